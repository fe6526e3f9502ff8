"""Dense-layer kit: Glorot init, MLP forward with inverted dropout, Adam,
and patience-based early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


@dataclass
class MlpSpec:
    """Layer widths (input width first), activations, dropout keep-probability.

    Dropout applies only to hidden activations, never to the input or the
    output layer.
    """

    widths: list[int]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    keep_prob: float = 1.0

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"hidden activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")

    @property
    def fan_in(self) -> int:
        return self.widths[0]

    @property
    def fan_out(self) -> int:
        return self.widths[-1]


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class Mlp:
    """Fully connected network over tape Vars, with a plain-array eval path.

    Parameters persist as numpy arrays and are bound onto each fresh tape as
    leaves (``bind``); the binding is cached per tape so repeated forwards in
    one step accumulate gradients into the same leaves.
    """

    def __init__(self, spec: MlpSpec, layers: list[DenseLayer]):
        self.spec = spec
        self.layers = layers
        self._bound_tape = None
        self._bound = None

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases; deterministic given rng state."""
        layers = []
        for fan_in, fan_out in zip(spec.widths, spec.widths[1:]):
            a = glorot_bound(fan_in, fan_out)
            layers.append(
                DenseLayer(
                    weight=rng.uniform(-a, a, size=(fan_in, fan_out)),
                    bias=np.zeros(fan_out, dtype=np.float64),
                )
            )
        return cls(spec, layers)

    def parameters(self) -> list[np.ndarray]:
        return [arr for layer in self.layers for arr in (layer.weight, layer.bias)]

    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.parameters())

    def bind(self, tape: ad.Tape, prefix: str = "") -> list[tuple[ad.Var, ad.Var]]:
        """Register all parameters as leaves on ``tape`` (cached per tape)."""
        if self._bound_tape is not tape:
            bound = []
            for i, layer in enumerate(self.layers, start=1):
                bound.append(
                    (
                        tape.leaf(layer.weight, f"{prefix}layer{i}.weight"),
                        tape.leaf(layer.bias, f"{prefix}layer{i}.bias"),
                    )
                )
            self._bound_tape = tape
            self._bound = bound
        return self._bound

    def apply(
        self,
        bound,
        x: ad.Var,
        *,
        train: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> ad.Var:
        """Affine + activation per layer using explicit bound parameter Vars.

        In train mode, hidden activations get an inverted dropout mask: units
        survive with probability keep_prob and survivors are scaled by
        1/keep_prob, so the eval-mode forward is the mask expectation.
        """
        keep = self.spec.keep_prob
        h = x
        last = len(bound) - 1
        for i, (w, b) in enumerate(bound):
            h = ad.broadcast_add_row(ad.matmul(h, w), b)
            if i < last:
                h = _activate(h, self.spec.hidden_activation)
                if train and keep < 1.0:
                    if dropout_rng is None:
                        raise ValueError("train-mode dropout requires an rng")
                    mask = (dropout_rng.random(h.value.shape) < keep) / keep
                    h = ad.mul(h, h.tape.leaf(mask, "dropout_mask"))
            elif self.spec.output_activation == "sigmoid":
                h = ad.sigmoid(h)
        return h

    def forward(
        self,
        tape: ad.Tape,
        x: ad.Var,
        *,
        train: bool = False,
        dropout_rng: np.random.Generator | None = None,
        prefix: str = "",
    ) -> ad.Var:
        return self.apply(self.bind(tape, prefix), x, train=train, dropout_rng=dropout_rng)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode forward on plain arrays (no tape, no dropout).

        Matches ``forward(train=False)`` bitwise: same numpy expressions in
        the same order.
        """
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = h @ layer.weight + layer.bias
            if i < last:
                h = _activate_np(h, self.spec.hidden_activation)
            elif self.spec.output_activation == "sigmoid":
                h = expit(h)
        return h

    def gradients(self, tape: ad.Tape) -> list[np.ndarray]:
        """Gradient arrays aligned with parameters(), after backward on ``tape``."""
        if self._bound_tape is not tape:
            raise ad.AutodiffError("gradients requested for a tape this MLP was not bound to")
        out = []
        for w, b in self._bound:
            out.append(w.grad if w.grad is not None else np.zeros_like(w.value))
            out.append(b.grad if b.grad is not None else np.zeros_like(b.value))
        return out


def _activate(h: ad.Var, kind: str) -> ad.Var:
    return ad.relu(h) if kind == "relu" else ad.tanh(h)


def _activate_np(h: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(h, 0.0) if kind == "relu" else np.tanh(h)


class Adam:
    """Adam with bias correction: theta -= lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(
        self,
        params,
        learning_rate: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        """One in-place update; aborts (no state change) on non-finite grads."""
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError(
                f"expected {len(self.params)} gradient arrays, got {len(grads)}"
            )
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise ad.NumericError(
                    f"non-finite gradient for parameter {i}; optimizer step aborted"
                )
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EarlyStopper:
    """Signals stop after ``patience`` consecutive non-improving epochs.

    Improvement means the validation loss dropped below the best seen by more
    than ``min_improvement`` (absolute).
    """

    patience: int
    min_improvement: float = 1e-6
    best: float = math.inf
    epochs_since_improvement: int = field(default=0)

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        val_loss = float(val_loss)
        if not math.isfinite(val_loss):
            raise ValueError("validation loss must be finite")
        if val_loss < self.best - self.min_improvement:
            self.best = val_loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience
