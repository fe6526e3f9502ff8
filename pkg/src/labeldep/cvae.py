"""Latent-variable model of a conditional joint distribution over binary labels.

Four dense networks share the work: a feature trunk phi(x); a prior net mapping
phi to a diagonal Gaussian over the latent z; a recognition net mapping
(phi, y) to a second diagonal Gaussian, used only during training; and a
decoder mapping (phi, z) to per-label Bernoulli logits. Training maximizes the
single-sample variational bound per datapoint:

    log-likelihood of y under the decoder at z ~ recognition
    minus the closed-form KL between the recognition and prior Gaussians,

which lower-bounds the true conditional log-likelihood log Pr(y | x). All
likelihood math runs on logits, never on probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .nn import Mlp, MlpSpec
from .training import TrainConfig, as_xy, fit

# Sigmoid outputs are clipped to this open interval when reported as
# probabilities; float64 rounds sigmoid(|t| > ~37) to exactly 0 or 1 otherwise.
PROB_FLOOR = 1e-15


@dataclass
class GaussianParams:
    """Per-dimension mean and log-variance of a diagonal Gaussian.

    Fields are tape Vars inside a differentiable graph and plain arrays in
    evaluation paths; variance = exp(log_var) is positive by construction.
    """

    mean: object
    log_var: object


@dataclass
class ElboTerms:
    """Single-datapoint bound decomposition: elbo = reconstruction - kl."""

    reconstruction: float
    kl: float
    elbo: float


@dataclass
class CvaeConfig:
    feature_dim: int
    label_count: int
    latent_dim: int = 16
    feature_widths: tuple = (64, 64)
    prior_widths: tuple = (32,)
    recognition_widths: tuple = (32,)
    decoder_widths: tuple = (64,)
    hidden_activation: str = "relu"
    keep_prob: float = 0.8
    logvar_bound: float = 10.0
    label_names: list[str] | None = None

    def __post_init__(self):
        if self.feature_dim < 1 or self.label_count < 1 or self.latent_dim < 1:
            raise ValueError("feature_dim, label_count and latent_dim must be >= 1")
        self.feature_widths = tuple(int(w) for w in self.feature_widths)
        self.prior_widths = tuple(int(w) for w in self.prior_widths)
        self.recognition_widths = tuple(int(w) for w in self.recognition_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if self.logvar_bound <= 0:
            raise ValueError("logvar_bound must be positive")

    @property
    def phi_dim(self) -> int:
        return self.feature_widths[-1]


def reparameterize(q: GaussianParams, noise: ad.Var) -> ad.Var:
    """z = mean + exp(log_var / 2) * noise; differentiable in mean and log_var.

    The caller owns the rng; ``noise`` must hold standard-normal draws.
    """
    if q.mean.value.shape != noise.value.shape:
        raise ad.ShapeError(
            f"reparameterize: mean shape {q.mean.value.shape} vs noise shape "
            f"{noise.value.shape}"
        )
    std = ad.exp(ad.scale(q.log_var, 0.5))
    return ad.add(q.mean, ad.mul(std, noise))


def kl_diag_gauss(q: GaussianParams, p: GaussianParams) -> ad.Var:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis.

    sum_j [ (lvp_j - lvq_j)/2 + (exp(lvq_j) + (mq_j - mp_j)^2) / (2 exp(lvp_j)) - 1/2 ]

    Nonnegative for all inputs, zero iff q == p.
    """
    if q.mean.value.shape != p.mean.value.shape:
        raise ad.ShapeError(
            f"kl_diag_gauss: shapes {q.mean.value.shape} and {p.mean.value.shape} differ"
        )
    diff = ad.sub(q.mean, p.mean)
    ratio = ad.exp(ad.sub(q.log_var, p.log_var))
    scaled_sq = ad.mul(ad.mul(diff, diff), ad.exp(ad.negate(p.log_var)))
    inner = ad.add(ad.sub(p.log_var, q.log_var), ad.add(ratio, scaled_sq))
    per_dim = ad.add_scalar(ad.scale(inner, 0.5), -0.5)
    return ad.reduce_sum(per_dim, axis=-1)


def kl_diag_gauss_np(q_mean, q_log_var, p_mean, p_log_var) -> np.ndarray:
    """Plain-array twin of kl_diag_gauss for evaluation paths."""
    diff = q_mean - p_mean
    inner = (p_log_var - q_log_var) + np.exp(q_log_var - p_log_var) + diff * diff * np.exp(-p_log_var)
    return (0.5 * inner - 0.5).sum(axis=-1)


def bernoulli_loglik(y, logits: ad.Var) -> ad.Var:
    """log prod_j Bernoulli(y_j | sigmoid(t_j)), reduced over the last axis.

    Computed in the numerically stable logit form -sum_j softplus((1-2 y_j) t_j);
    exact for saturated logits where probabilities would round to 0 or 1.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != logits.value.shape:
        raise ad.ShapeError(
            f"bernoulli_loglik: labels shape {y.shape} vs logits shape "
            f"{logits.value.shape}"
        )
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be binary 0/1")
    sign = logits.tape.leaf(1.0 - 2.0 * y, "bernoulli_sign")
    return ad.negate(ad.reduce_sum(ad.softplus(ad.mul(sign, logits)), axis=-1))


def bernoulli_loglik_np(y, logits) -> np.ndarray:
    """Plain-array twin of bernoulli_loglik (same stable logit form)."""
    y = np.asarray(y, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    return -np.logaddexp(0.0, (1.0 - 2.0 * y) * logits).sum(axis=-1)


def clip_probs(p: np.ndarray) -> np.ndarray:
    """Keep reported probabilities strictly inside (0, 1) at float64 resolution."""
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


class CvaeModel:
    """The four-network model plus its latent dimension and parameter set."""

    kind = "cvae"

    def __init__(self, config: CvaeConfig, feature_net, prior_net, recognition_net, decoder_net):
        self.config = config
        self.feature_net = feature_net
        self.prior_net = prior_net
        self.recognition_net = recognition_net
        self.decoder_net = decoder_net

    @classmethod
    def build(cls, config: CvaeConfig, seed: int) -> "CvaeModel":
        rng = np.random.default_rng(seed)
        k, l, m = config.feature_dim, config.label_count, config.latent_dim
        act, keep = config.hidden_activation, config.keep_prob
        f = config.phi_dim
        feature = Mlp.init(
            MlpSpec([k, *config.feature_widths], act, "identity", keep), rng
        )
        prior = Mlp.init(
            MlpSpec([f, *config.prior_widths, 2 * m], act, "identity", keep), rng
        )
        recognition = Mlp.init(
            MlpSpec([f + l, *config.recognition_widths, 2 * m], act, "identity", keep), rng
        )
        decoder = Mlp.init(
            MlpSpec([f + m, *config.decoder_widths, l], act, "identity", keep), rng
        )
        return cls(config, feature, prior, recognition, decoder)

    def named_nets(self) -> list[tuple[str, Mlp]]:
        return [
            ("feature", self.feature_net),
            ("prior", self.prior_net),
            ("recognition", self.recognition_net),
            ("decoder", self.decoder_net),
        ]

    def parameters(self) -> list[np.ndarray]:
        return [p for _, net in self.named_nets() for p in net.parameters()]

    def gradients(self, tape: ad.Tape) -> list[np.ndarray]:
        return [g for _, net in self.named_nets() for g in net.gradients(tape)]

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, array) pairs, e.g. 'decoder.layer1.weight'."""
        items = []
        for name, net in self.named_nets():
            for i, layer in enumerate(net.layers, start=1):
                items.append((f"{name}.layer{i}.weight", layer.weight))
                items.append((f"{name}.layer{i}.bias", layer.bias))
        return items

    # -- differentiable graph -------------------------------------------------

    def _bind_all(self, tape: ad.Tape) -> dict:
        return {name: net.bind(tape, prefix=f"{name}.") for name, net in self.named_nets()}

    def _split_gauss(self, raw: ad.Var) -> GaussianParams:
        m = self.config.latent_dim
        b = self.config.logvar_bound
        mean = ad.slice_last(raw, 0, m)
        log_var = ad.clamp(ad.slice_last(raw, m, 2 * m), -b, b)
        return GaussianParams(mean, log_var)

    def _check_batch(self, x, y, noise):
        k, l, m = self.config.feature_dim, self.config.label_count, self.config.latent_dim
        if x.ndim != 2 or x.shape[1] != k:
            raise ad.ShapeError(f"features have shape {x.shape}, model expects (n, {k})")
        if y.shape != (x.shape[0], l):
            raise ad.ShapeError(f"labels have shape {y.shape}, model expects ({x.shape[0]}, {l})")
        if noise.shape != (x.shape[0], m):
            raise ad.ShapeError(f"noise has shape {noise.shape}, model expects ({x.shape[0]}, {m})")

    def elbo_rows_bound(
        self, tape, bound, x, y, noise, *, train=False, dropout_rng=None
    ) -> tuple[ad.Var, ad.Var]:
        """Per-datapoint reconstruction and KL Vars (shape (n,)) from explicit
        parameter bindings; the functional core of the training objective."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
        self._check_batch(x, y, noise)
        kw = {"train": train, "dropout_rng": dropout_rng}
        xv = tape.leaf(x, "x")
        yv = tape.leaf(y, "y")
        phi = self.feature_net.apply(bound["feature"], xv, **kw)
        q = self._split_gauss(
            self.recognition_net.apply(bound["recognition"], ad.concat([phi, yv]), **kw)
        )
        p = self._split_gauss(self.prior_net.apply(bound["prior"], phi, **kw))
        z = reparameterize(q, tape.leaf(noise, "noise"))
        logits = self.decoder_net.apply(bound["decoder"], ad.concat([phi, z]), **kw)
        recon = bernoulli_loglik(y, logits)
        kl = kl_diag_gauss(q, p)
        return recon, kl

    def elbo_rows(self, tape, x, y, noise, *, train=False, dropout_rng=None):
        return self.elbo_rows_bound(
            tape, self._bind_all(tape), x, y, noise, train=train, dropout_rng=dropout_rng
        )

    def loss_graph(self, tape, x, y, *, rng, train) -> ad.Var:
        """Mean of -elbo over the batch; one fresh noise draw per datapoint."""
        n = np.atleast_2d(x).shape[0]
        noise = rng.standard_normal((n, self.config.latent_dim))
        recon, kl = self.elbo_rows(tape, x, y, noise, train=train, dropout_rng=rng)
        return ad.negate(ad.reduce_mean(ad.sub(recon, kl)))

    def elbo(self, x, y, noise) -> ElboTerms:
        """Single-datapoint bound terms at the given standard-normal noise."""
        tape = ad.Tape()
        recon, kl = self.elbo_rows(tape, x, y, noise)
        r = float(recon.value[0])
        k = float(kl.value[0])
        return ElboTerms(reconstruction=r, kl=k, elbo=r - k)

    def elbo_rows_np(self, x, y, noise) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode (reconstruction, kl) rows as plain arrays."""
        tape = ad.Tape()
        recon, kl = self.elbo_rows(tape, x, y, noise)
        return recon.value.copy(), kl.value.copy()

    def functional_loss_fn(self, x, y, noise):
        """A gradient-check target: f(params) -> (loss, param_vars).

        Eval mode with frozen noise, so the loss is deterministic in the
        parameters; feed it to ``autodiff.finite_diff_check``.
        """
        shapes = [(name, net, len(net.layers)) for name, net in self.named_nets()]

        def f(arrs):
            tape = ad.Tape()
            pvars = [tape.leaf(a) for a in arrs]
            bound = {}
            pos = 0
            for name, net, n_layers in shapes:
                pairs = []
                for _ in range(n_layers):
                    pairs.append((pvars[pos], pvars[pos + 1]))
                    pos += 2
                bound[name] = pairs
            recon, kl = self.elbo_rows_bound(tape, bound, x, y, noise)
            loss = ad.negate(ad.reduce_mean(ad.sub(recon, kl)))
            return loss, pvars

        return f

    # -- evaluation paths (plain arrays, no tape) -----------------------------

    def feature_np(self, x: np.ndarray) -> np.ndarray:
        return self.feature_net.forward_np(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    def prior_gauss_np(self, phi: np.ndarray) -> GaussianParams:
        raw = self.prior_net.forward_np(phi)
        m = self.config.latent_dim
        b = self.config.logvar_bound
        return GaussianParams(raw[..., :m], np.clip(raw[..., m:], -b, b))

    def recognition_gauss_np(self, phi: np.ndarray, y: np.ndarray) -> GaussianParams:
        raw = self.recognition_net.forward_np(np.concatenate([phi, y], axis=-1))
        m = self.config.latent_dim
        b = self.config.logvar_bound
        return GaussianParams(raw[..., :m], np.clip(raw[..., m:], -b, b))

    def decoder_logits_np(self, phi: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.decoder_net.forward_np(np.concatenate([phi, z], axis=-1))

    def decoder_probs_np(self, phi: np.ndarray, z: np.ndarray) -> np.ndarray:
        return clip_probs(expit(self.decoder_logits_np(phi, z)))

    def sample_y(self, x, count: int, seed) -> np.ndarray:
        """Ancestral samples: z from the context prior, labels from the decoder.

        Returns a (count, label_count) 0/1 array; deterministic given seed.
        """
        if count < 0:
            raise ValueError("count must be >= 0")
        rng = np.random.default_rng(seed)
        l, m = self.config.label_count, self.config.latent_dim
        phi = self.feature_np(np.atleast_2d(np.asarray(x, dtype=np.float64))[:1])
        g = self.prior_gauss_np(phi)
        z = g.mean + np.exp(0.5 * g.log_var) * rng.standard_normal((count, m))
        probs = self.decoder_probs_np(np.repeat(phi, count, axis=0), z)
        return (rng.random((count, l)) < probs).astype(np.int64)

    def export_embeddings(self) -> np.ndarray:
        """Columns of the decoder's final dense layer, one vector per label.

        Shape (label_count, last_hidden_width).
        """
        return self.decoder_net.layers[-1].weight.T.copy()


def train_cvae(model: CvaeModel, train_set, val_set, config: TrainConfig, on_epoch=None):
    """Minibatch training of -elbo with Adam and early stopping.

    Returns the per-epoch metrics history; the model is updated in place.
    """
    return fit(model, as_xy(train_set), as_xy(val_set), config, on_epoch=on_epoch)
