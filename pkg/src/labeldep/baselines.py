"""Comparison models: a conditionally independent Bernoulli model and
probabilistic classifier chains with exact chain-rule likelihood and
exhaustive joint-mode search at small label counts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .cvae import bernoulli_loglik, bernoulli_loglik_np, clip_probs
from .nn import Mlp, MlpSpec
from .training import TrainConfig, as_xy, fit

# 2^l outcomes are enumerated exactly; beyond this we refuse rather than
# approximate.
MAX_ENUMERATION_LABELS = 20


@dataclass
class IndependentConfig:
    feature_dim: int
    label_count: int
    hidden_widths: tuple = (64, 64)
    hidden_activation: str = "relu"
    keep_prob: float = 0.8
    label_names: list[str] | None = None

    def __post_init__(self):
        if self.feature_dim < 1 or self.label_count < 1:
            raise ValueError("feature_dim and label_count must be >= 1")
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)


class IndependentModel:
    """Single MLP to per-label logits; the joint factorizes exactly over labels."""

    kind = "independent"

    def __init__(self, config: IndependentConfig, net: Mlp):
        self.config = config
        self.net = net

    @classmethod
    def build(cls, config: IndependentConfig, seed) -> "IndependentModel":
        rng = np.random.default_rng(seed)
        spec = MlpSpec(
            [config.feature_dim, *config.hidden_widths, config.label_count],
            config.hidden_activation,
            "identity",
            config.keep_prob,
        )
        return cls(config, Mlp.init(spec, rng))

    def parameters(self):
        return self.net.parameters()

    def gradients(self, tape):
        return self.net.gradients(tape)

    def param_items(self):
        items = []
        for i, layer in enumerate(self.net.layers, start=1):
            items.append((f"net.layer{i}.weight", layer.weight))
            items.append((f"net.layer{i}.bias", layer.bias))
        return items

    def loss_graph(self, tape, x, y, *, rng, train) -> ad.Var:
        """Mean negative Bernoulli log-likelihood over the batch."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        logits = self.net.forward(
            tape, tape.leaf(x, "x"), train=train, dropout_rng=rng
        )
        return ad.negate(ad.reduce_mean(bernoulli_loglik(y, logits)))

    def logits_np(self, x) -> np.ndarray:
        return self.net.forward_np(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    def probs_np(self, x) -> np.ndarray:
        return clip_probs(expit(self.logits_np(x)))


def independent_jll(model: IndependentModel, x, y) -> float:
    """Exact joint log-likelihood sum_j log Pr(y_j | x); no sampling."""
    return float(independent_jll_rows(model, np.atleast_2d(x), np.atleast_2d(y))[0])


def independent_jll_rows(model: IndependentModel, x, y) -> np.ndarray:
    return bernoulli_loglik_np(np.atleast_2d(y), model.logits_np(x))


def train_independent(train_set, val_set, config: TrainConfig, arch=None, on_epoch=None):
    """Build and fit an independent model; returns (model, history)."""
    x, y = as_xy(train_set)
    if arch is None:
        arch = IndependentConfig(feature_dim=x.shape[1], label_count=y.shape[1])
    model = IndependentModel.build(arch, config.seed)
    history = fit(model, (x, y), as_xy(val_set), config, on_epoch=on_epoch)
    return model, history


@dataclass
class ChainConfig:
    feature_dim: int
    label_count: int
    label_order: tuple = None  # permutation of 0..l-1; dataset column order if None
    hidden_widths: tuple = (64,)
    hidden_activation: str = "relu"
    keep_prob: float = 0.8
    label_names: list[str] | None = None

    def __post_init__(self):
        if self.feature_dim < 1 or self.label_count < 0:
            raise ValueError("feature_dim must be >= 1 and label_count >= 0")
        if self.label_order is None:
            self.label_order = tuple(range(self.label_count))
        self.label_order = tuple(int(j) for j in self.label_order)
        if sorted(self.label_order) != list(range(self.label_count)):
            raise ValueError(
                f"label_order must be a permutation of 0..{self.label_count - 1}, "
                f"got {self.label_order}"
            )
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)


class ChainModel:
    """l sequential binary classifiers; classifier at position j sees the
    context plus the true values of the j earlier labels (in chain order).

    The joint is Pr(y | x) = prod_j Pr(y_order[j] | x, y_order[:j]); the chain
    rule makes this an exactly normalized distribution for any weights.
    """

    kind = "pcc"

    def __init__(self, config: ChainConfig, classifiers: list[IndependentModel]):
        if len(classifiers) != config.label_count:
            raise ValueError("need one classifier per label")
        self.config = config
        self.classifiers = classifiers

    @classmethod
    def build(cls, config: ChainConfig, seed) -> "ChainModel":
        classifiers = []
        for jpos in range(config.label_count):
            arch = IndependentConfig(
                feature_dim=config.feature_dim + jpos,
                label_count=1,
                hidden_widths=config.hidden_widths,
                hidden_activation=config.hidden_activation,
                keep_prob=config.keep_prob,
            )
            classifiers.append(IndependentModel.build(arch, [seed, jpos]))
        return cls(config, classifiers)

    def param_items(self):
        items = []
        for jpos, clf in enumerate(self.classifiers, start=1):
            for name, arr in clf.param_items():
                items.append((f"classifier{jpos}.{name.removeprefix('net.')}", arr))
        return items

    def conditional_logits(self, jpos: int, x: np.ndarray, prefix: np.ndarray) -> np.ndarray:
        """Logit of label order[jpos] given context rows and true prefix rows."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        prefix = np.asarray(prefix, dtype=np.float64).reshape(x.shape[0], jpos)
        return self.classifiers[jpos].logits_np(np.concatenate([x, prefix], axis=1))[:, 0]


def train_pcc(train_set, val_set, config: TrainConfig, label_order=None, arch=None, on_epoch=None):
    """Teacher-forced chain training: classifier j fits the true label
    order[j] from the context and the true earlier labels.

    Each classifier trains with its own Adam state and early stopping; epoch
    records gain a ``classifier`` field (position in chain order). Returns
    (model, history).
    """
    x, y = as_xy(train_set)
    xv, yv = as_xy(val_set)
    l = y.shape[1]
    if arch is None:
        arch = ChainConfig(feature_dim=x.shape[1], label_count=l, label_order=label_order)
    elif label_order is not None:
        arch = ChainConfig(
            feature_dim=arch.feature_dim,
            label_count=arch.label_count,
            label_order=label_order,
            hidden_widths=arch.hidden_widths,
            hidden_activation=arch.hidden_activation,
            keep_prob=arch.keep_prob,
            label_names=arch.label_names,
        )
    order = arch.label_order
    model = ChainModel.build(arch, config.seed)
    history = []
    for jpos in range(l):
        cols = list(order[:jpos])
        x_j = np.concatenate([x, y[:, cols].astype(np.float64)], axis=1)
        xv_j = np.concatenate([xv, yv[:, cols].astype(np.float64)], axis=1)
        y_j = y[:, [order[jpos]]]
        yv_j = yv[:, [order[jpos]]]

        def record(rec, jpos=jpos):
            rec = rec.to_dict()
            rec["classifier"] = jpos
            history.append(rec)
            if on_epoch is not None:
                on_epoch(rec)

        sub_config = TrainConfig(
            epochs=config.epochs,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            seed=config.seed + jpos,
            patience=config.patience,
            min_improvement=config.min_improvement,
        )
        fit(model.classifiers[jpos], (x_j, y_j), (xv_j, yv_j), sub_config, on_epoch=record)
    return model, history


def pcc_joint_loglik(chain: ChainModel, x, y) -> float:
    """Exact sum_j log Pr(y_order[j] | x, y_order[:j]); no approximation."""
    return float(pcc_joint_loglik_rows(chain, np.atleast_2d(x), np.atleast_2d(y))[0])


def pcc_joint_loglik_rows(chain: ChainModel, x, y) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    order = chain.config.label_order
    total = np.zeros(x.shape[0])
    for jpos in range(chain.config.label_count):
        prefix = y[:, list(order[:jpos])]
        logits = chain.conditional_logits(jpos, x, prefix)
        target = y[:, order[jpos]]
        total += -np.logaddexp(0.0, (1.0 - 2.0 * target) * logits)
    return total


def enumerate_patterns(l: int) -> np.ndarray:
    """All 2^l binary outcomes in lexicographic order, shape (2^l, l)."""
    if l > MAX_ENUMERATION_LABELS:
        raise ValueError(
            f"refusing to enumerate 2^{l} outcomes (limit l <= {MAX_ENUMERATION_LABELS})"
        )
    if l == 0:
        return np.zeros((1, 0), dtype=np.int64)
    codes = np.arange(2**l, dtype=np.int64)[:, None]
    shifts = np.arange(l - 1, -1, -1, dtype=np.int64)
    return (codes >> shifts) & 1


def chain_pattern_log_probs(chain: ChainModel, x) -> np.ndarray:
    """log Pr(pattern | x) for every outcome, in lexicographic pattern order."""
    l = chain.config.label_count
    patterns = enumerate_patterns(l).astype(np.float64)
    x_row = np.atleast_2d(np.asarray(x, dtype=np.float64))[:1]
    x_tiled = np.repeat(x_row, patterns.shape[0], axis=0)
    return pcc_joint_loglik_rows(chain, x_tiled, patterns)


def pcc_joint_mode(chain: ChainModel, x) -> np.ndarray:
    """Exhaustive argmax over all 2^l outcomes; ties go to the
    lexicographically smallest pattern. Refuses l > 20."""
    l = chain.config.label_count
    patterns = enumerate_patterns(l)
    if l == 0:
        return patterns[0]
    log_probs = chain_pattern_log_probs(chain, x)
    return patterns[int(np.argmax(log_probs))].copy()


def pcc_marginals(chain: ChainModel, x) -> np.ndarray:
    """Exact per-label marginals by summing the enumerated joint."""
    patterns = enumerate_patterns(chain.config.label_count)
    probs = np.exp(chain_pattern_log_probs(chain, x))
    return clip_probs(probs @ patterns)
