"""Model-agnostic evaluation: Monte-Carlo joint likelihood for the
latent-variable model, exact likelihood for the baselines, marginal
precision-recall curves, and variational-bound diagnostics.

All log-domain accumulation goes through log-sum-exp, so saturated decoders
cannot produce Inf/NaN. Monte-Carlo noise is seeded per (base seed, datapoint
index): parallel and serial evaluation produce identical numbers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from .baselines import (
    ChainModel,
    IndependentModel,
    independent_jll_rows,
    pcc_joint_loglik_rows,
    pcc_marginals,
)
from .cvae import CvaeModel, bernoulli_loglik_np
from .data import LabeledDataset

DEFAULT_MC_SAMPLES = 10000
DEFAULT_ELBO_SAMPLES = 256
# Stream tags keeping the likelihood and bound-diagnostic draws distinct.
_MC_STREAM = 0x4D43
_ELBO_STREAM = 0x454C

FORMAT_VERSION = 1


def default_thresholds() -> np.ndarray:
    """201 evenly spaced thresholds, descending over [0, 1]."""
    return np.linspace(1.0, 0.0, 201)


def _point_rng(seed, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _MC_STREAM, int(index)])


@dataclass
class PointStats:
    """Monte-Carlo likelihood stats for one datapoint."""

    log_lik: float
    std_error: float
    marginals: np.ndarray


def cvae_point_stats(
    model: CvaeModel, x, y, n_samples: int, rng: np.random.Generator
) -> PointStats:
    """One datapoint's MC log-likelihood, its delta-method standard error,
    and MC marginal probabilities, all from a single set of prior samples.

    log Pr(y | x) is estimated as logsumexp_s(log Pr(y | z_s, x)) - log S with
    z_s drawn from the context prior.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))[:1]
    y = np.atleast_1d(np.asarray(y, dtype=np.float64)).reshape(1, -1)
    phi = model.feature_np(x)
    g = model.prior_gauss_np(phi)
    m = model.config.latent_dim
    z = g.mean + np.exp(0.5 * g.log_var) * rng.standard_normal((n_samples, m))
    phi_tiled = np.repeat(phi, n_samples, axis=0)
    logits = model.decoder_logits_np(phi_tiled, z)
    lls = bernoulli_loglik_np(y, logits)  # (S,)
    log_lik = float(np_logsumexp(lls) - math.log(n_samples))
    # u has mean exactly 1 by construction; se(log mean w) ~ std(u)/sqrt(S).
    u = np.exp(lls - log_lik)
    se = float(u.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    from scipy.special import expit

    marginals = np.clip(expit(logits).mean(axis=0), 1e-15, 1.0 - 1e-15)
    return PointStats(log_lik, se, marginals)


@dataclass
class McDatasetStats:
    neg_jll: float
    std_error: float
    point_log_liks: np.ndarray
    point_std_errors: np.ndarray
    marginals: np.ndarray  # (N, l)


def cvae_dataset_stats(
    model: CvaeModel, dataset, n_samples: int = DEFAULT_MC_SAMPLES, seed=0
) -> McDatasetStats:
    x, y = dataset.features, dataset.labels
    n = x.shape[0]
    lls = np.empty(n)
    ses = np.empty(n)
    marginals = np.empty((n, model.config.label_count))
    for i in range(n):
        stats = cvae_point_stats(model, x[i], y[i], n_samples, _point_rng(seed, i))
        lls[i] = stats.log_lik
        ses[i] = stats.std_error
        marginals[i] = stats.marginals
    pooled = float(np.sqrt((ses**2).sum()) / n)
    return McDatasetStats(float(-lls.mean()), pooled, lls, ses, marginals)


def cvae_neg_jll(
    model: CvaeModel, dataset, n_samples: int = DEFAULT_MC_SAMPLES, seed=0
) -> float:
    """Mean over the dataset of -log Pr(y_i | x_i), MC-estimated with
    ``n_samples`` prior draws per datapoint."""
    return cvae_dataset_stats(model, dataset, n_samples, seed).neg_jll


def exact_neg_jll(model, dataset) -> float:
    """Deterministic mean negative joint log-likelihood for baseline models."""
    x, y = dataset.features, dataset.labels
    if isinstance(model, IndependentModel):
        rows = independent_jll_rows(model, x, y)
    elif isinstance(model, ChainModel):
        rows = pcc_joint_loglik_rows(model, x, y)
    else:
        raise TypeError(f"exact_neg_jll does not apply to {type(model).__name__}")
    return float(-rows.mean())


def marginal_probs(model, x, n_samples: int = DEFAULT_MC_SAMPLES, seed=0) -> np.ndarray:
    """Per-label occurrence probabilities at one context row.

    MC over prior samples for the latent-variable model; exact sigmoids for
    the independent model; exact enumeration for chains (l <= 20).
    """
    if isinstance(model, CvaeModel):
        y_dummy = np.zeros(model.config.label_count)
        return cvae_point_stats(
            model, x, y_dummy, n_samples, _point_rng(seed, 0)
        ).marginals
    if isinstance(model, IndependentModel):
        return model.probs_np(x)[0]
    if isinstance(model, ChainModel):
        return pcc_marginals(model, x)
    raise TypeError(f"marginal_probs does not apply to {type(model).__name__}")


def dataset_marginals(model, dataset, n_samples: int = DEFAULT_MC_SAMPLES, seed=0) -> np.ndarray:
    if isinstance(model, CvaeModel):
        return cvae_dataset_stats(model, dataset, n_samples, seed).marginals
    if isinstance(model, IndependentModel):
        return model.probs_np(dataset.features)
    if isinstance(model, ChainModel):
        return np.stack([pcc_marginals(model, row) for row in dataset.features])
    raise TypeError(f"dataset_marginals does not apply to {type(model).__name__}")


@dataclass
class PrCurve:
    """Per-label precision/recall over a descending threshold sweep.

    ``included`` marks labels with at least one positive example; labels
    without positives have no recall and are excluded from macro aggregates.
    """

    thresholds: np.ndarray
    precision: np.ndarray  # (l, T)
    recall: np.ndarray  # (l, T); NaN rows for excluded labels
    average_precision: np.ndarray  # (l,); NaN for excluded labels
    included: np.ndarray  # (l,) bool
    macro_precision: np.ndarray  # (T,)
    macro_recall: np.ndarray  # (T,)
    macro_ap: float


def pr_curve(marginals, truth, thresholds=None) -> PrCurve:
    """Precision/recall per label plus macro averages across labels.

    Precision at zero predicted positives is defined as 1. Average precision
    integrates precision over recall with the trapezoid rule, anchored at
    (recall 0, precision 1) when the sweep does not reach zero recall.
    """
    marginals = np.atleast_2d(np.asarray(marginals, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth))
    if marginals.shape != truth.shape:
        raise ValueError(
            f"marginals shape {marginals.shape} vs truth shape {truth.shape}"
        )
    if thresholds is None:
        thresholds = default_thresholds()
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.ndim != 1 or len(thresholds) < 2:
        raise ValueError("need a 1-D threshold grid with at least two points")
    if np.any(np.diff(thresholds) > 0):
        raise ValueError("thresholds must be sorted descending")

    n, l = marginals.shape
    t_count = len(thresholds)
    precision = np.empty((l, t_count))
    recall = np.full((l, t_count), np.nan)
    ap = np.full(l, np.nan)
    included = np.zeros(l, dtype=bool)
    for j in range(l):
        pos = truth[:, j] == 1
        npos = int(pos.sum())
        pred = marginals[None, :, j] >= thresholds[:, None]  # (T, N)
        npred = pred.sum(axis=1)
        tp = (pred & pos[None, :]).sum(axis=1)
        precision[j] = np.where(npred > 0, tp / np.maximum(npred, 1), 1.0)
        if npos == 0:
            continue
        included[j] = True
        recall[j] = tp / npos
        r, p = recall[j], precision[j]
        if r[0] > 0.0:
            r = np.concatenate([[0.0], r])
            p = np.concatenate([[1.0], p])
        ap[j] = _trapezoid(p, r)
    if included.any():
        macro_precision = precision[included].mean(axis=0)
        macro_recall = recall[included].mean(axis=0)
        macro_ap = float(ap[included].mean())
    else:
        macro_precision = np.full(t_count, np.nan)
        macro_recall = np.full(t_count, np.nan)
        macro_ap = float("nan")
    return PrCurve(
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        average_precision=ap,
        included=included,
        macro_precision=macro_precision,
        macro_recall=macro_recall,
        macro_ap=macro_ap,
    )


def _trapezoid(y, x) -> float:
    fn = getattr(np, "trapezoid", None) or np.trapz
    return float(fn(y, x))


@dataclass
class ElboGap:
    """MC log-likelihood minus mean bound; a diagnostic, never an assertion.

    The gap should be nonnegative up to Monte-Carlo error; it is reported
    whatever its size.
    """

    mc_log_lik: float
    mean_elbo: float
    gap: float
    std_error: float


def _elbo_means(model: CvaeModel, dataset, elbo_samples: int, seed):
    """Per-point bound estimate averaged over fresh recognition noise."""
    x, y = dataset.features, dataset.labels
    n = x.shape[0]
    m = model.config.latent_dim
    elbos = np.empty(n)
    ses = np.empty(n)
    for i in range(n):
        rng = np.random.default_rng([int(seed), _ELBO_STREAM, i])
        noise = rng.standard_normal((elbo_samples, m))
        x_tiled = np.repeat(x[i : i + 1], elbo_samples, axis=0)
        y_tiled = np.repeat(y[i : i + 1], elbo_samples, axis=0)
        recon, kl = model.elbo_rows_np(x_tiled, y_tiled, noise)
        elbos[i] = recon.mean() - kl[0]
        ses[i] = recon.std(ddof=1) / math.sqrt(elbo_samples) if elbo_samples > 1 else 0.0
    return elbos, ses


def elbo_gap(
    model: CvaeModel,
    dataset,
    n_samples: int = DEFAULT_MC_SAMPLES,
    seed=0,
    elbo_samples: int = DEFAULT_ELBO_SAMPLES,
) -> ElboGap:
    """gap = MC log-likelihood - mean bound, with a pooled standard error
    covering both estimators."""
    stats = cvae_dataset_stats(model, dataset, n_samples, seed)
    elbos, elbo_ses = _elbo_means(model, dataset, elbo_samples, seed)
    n = dataset.n
    mc_ll = float(-stats.neg_jll)
    mean_elbo = float(elbos.mean())
    pooled = float(np.sqrt((stats.point_std_errors**2 + elbo_ses**2).sum()) / n)
    return ElboGap(mc_ll, mean_elbo, mc_ll - mean_elbo, pooled)


@dataclass
class EvalReport:
    """Everything a run comparison needs for one model/dataset pair."""

    model_kind: str
    neg_jll: float
    neg_jll_std_error: float | None
    n_points: int
    mc_samples: int | None
    seed: int | None
    dataset_hash: str | None
    label_names: list[str]
    pr: PrCurve
    excluded_labels: list[str]
    elbo_diagnostic: ElboGap | None
    train_minutes: float | None
    run_label: str | None = None

    @property
    def macro_ap(self) -> float:
        return self.pr.macro_ap

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        per_label = {}
        for j, name in enumerate(self.label_names):
            per_label[name] = {
                "precision": self.pr.precision[j].tolist(),
                "recall": [clean(float(r)) for r in self.pr.recall[j]],
                "average_precision": clean(float(self.pr.average_precision[j])),
            }
        diag = None
        if self.elbo_diagnostic is not None:
            diag = {
                "mc_log_lik": self.elbo_diagnostic.mc_log_lik,
                "mean_elbo": self.elbo_diagnostic.mean_elbo,
                "gap": self.elbo_diagnostic.gap,
                "std_error": self.elbo_diagnostic.std_error,
            }
        return {
            "format_version": FORMAT_VERSION,
            "model_kind": self.model_kind,
            "run_label": self.run_label,
            "neg_jll": self.neg_jll,
            "neg_jll_std_error": self.neg_jll_std_error,
            "macro_ap": clean(self.macro_ap),
            "n_points": self.n_points,
            "mc_samples": self.mc_samples,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
            "excluded_labels": self.excluded_labels,
            "elbo_diagnostic": diag,
            "train_minutes": self.train_minutes,
            "thresholds": self.pr.thresholds.tolist(),
            "macro_precision": [clean(float(p)) for p in self.pr.macro_precision],
            "macro_recall": [clean(float(r)) for r in self.pr.macro_recall],
            "per_label": per_label,
        }


def evaluate_model(
    model,
    dataset: LabeledDataset,
    n_samples: int = DEFAULT_MC_SAMPLES,
    seed=0,
    dataset_hash: str | None = None,
    train_minutes: float | None = None,
    elbo_samples: int = DEFAULT_ELBO_SAMPLES,
    thresholds=None,
    run_label: str | None = None,
) -> EvalReport:
    """Build the full report: joint likelihood, marginal PR, diagnostics."""
    label_names = dataset.label_names or [f"label{j}" for j in range(dataset.l)]
    diag = None
    se = None
    if isinstance(model, CvaeModel):
        stats = cvae_dataset_stats(model, dataset, n_samples, seed)
        neg_jll = stats.neg_jll
        se = stats.std_error
        marginals = stats.marginals
        elbos, elbo_ses = _elbo_means(model, dataset, elbo_samples, seed)
        mc_ll = -neg_jll
        pooled = float(
            np.sqrt((stats.point_std_errors**2 + elbo_ses**2).sum()) / dataset.n
        )
        diag = ElboGap(mc_ll, float(elbos.mean()), mc_ll - float(elbos.mean()), pooled)
        mc_used = n_samples
    else:
        neg_jll = exact_neg_jll(model, dataset)
        marginals = dataset_marginals(model, dataset)
        mc_used = None
    # y is discrete, so every joint probability is <= 1 and neg_jll >= 0.
    if neg_jll < -1e-9:
        raise AssertionError(f"negative neg_jll {neg_jll} for a discrete label space")
    pr = pr_curve(marginals, dataset.labels, thresholds)
    excluded = [label_names[j] for j in range(dataset.l) if not pr.included[j]]
    return EvalReport(
        model_kind=model.kind,
        neg_jll=float(neg_jll),
        neg_jll_std_error=se,
        n_points=dataset.n,
        mc_samples=mc_used,
        seed=seed if mc_used is not None else None,
        dataset_hash=dataset_hash,
        label_names=list(label_names),
        pr=pr,
        excluded_labels=excluded,
        elbo_diagnostic=diag,
        train_minutes=train_minutes,
        run_label=run_label,
    )


def write_pr_csv(report: EvalReport, path) -> None:
    """One tidy CSV: label ('macro' rows first), threshold, precision, recall."""
    lines = ["label,threshold,precision,recall"]
    for t, p, r in zip(report.pr.thresholds, report.pr.macro_precision, report.pr.macro_recall):
        lines.append(f"macro,{t!r},{p!r},{r!r}")
    for j, name in enumerate(report.label_names):
        for t, p, r in zip(report.pr.thresholds, report.pr.precision[j], report.pr.recall[j]):
            lines.append(f"{name},{t!r},{p!r},{r!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
