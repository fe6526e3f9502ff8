"""Datasets and featurization: JSONL ingestion, synthetic generators with
exact ground-truth joint tables, per-band pixel-value histograms, binary PPM
input, train-statistics standardization, and seeded splits.

Everything here is deterministic given its seed; datasets are immutable once
constructed and safe to share across workers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset, image, or generator specification."""


@dataclass
class LabeledDataset:
    """N context rows paired with N binary label rows."""

    features: np.ndarray  # (N, k) float64
    labels: np.ndarray  # (N, l) int64, values in {0, 1}
    feature_names: list[str] | None = None
    label_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DatasetError("features and labels must be 2-D matrices")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"row count mismatch: {self.features.shape[0]} feature rows vs "
                f"{self.labels.shape[0]} label rows"
            )
        if self.features.shape[1] < 1 or self.labels.shape[1] < 1:
            raise DatasetError("need at least one feature and one label column")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DatasetError("labels must be binary 0/1")
        if self.feature_names is not None and len(self.feature_names) != self.k:
            raise DatasetError("feature_names length does not match feature count")
        if self.label_names is not None and len(self.label_names) != self.l:
            raise DatasetError("label_names length does not match label count")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def k(self) -> int:
        return self.features.shape[1]

    @property
    def l(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.feature_names, self.label_names
        )


def load_jsonl(path) -> LabeledDataset:
    """Read one {"x": [...], "y": [...]} object per line; line 1 fixes k and l.

    Errors name the offending 1-based line number.
    """
    xs, ys = [], []
    k = l = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON, line {lineno}: {e}") from e
            if not isinstance(row, dict) or "x" not in row or "y" not in row:
                raise DatasetError(f"missing 'x' or 'y' key, line {lineno}")
            x, y = row["x"], row["y"]
            if k is None:
                k, l = len(x), len(y)
                if k < 1 or l < 1:
                    raise DatasetError(f"empty feature or label vector, line {lineno}")
            if len(x) != k:
                raise DatasetError(
                    f"ragged feature row (expected {k}, got {len(x)}), line {lineno}"
                )
            if len(y) != l:
                raise DatasetError(
                    f"ragged label row (expected {l}, got {len(y)}), line {lineno}"
                )
            if any(v not in (0, 1) for v in y):
                raise DatasetError(f"non-binary label, line {lineno}")
            xs.append([float(v) for v in x])
            ys.append([int(v) for v in y])
    if not xs:
        raise DatasetError(f"empty dataset file: {path}")
    return LabeledDataset(np.array(xs), np.array(ys))


def save_jsonl(dataset: LabeledDataset, path) -> None:
    """Write the canonical JSONL form; load_jsonl(save_jsonl(d)) == d."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(json.dumps({"x": x.tolist(), "y": y.tolist()}) + "\n")


GENERATOR_KINDS = ("multimode", "xor-pair", "independent-control")


@dataclass
class SyntheticSpec:
    """Generator with a known joint distribution, for oracle-backed tests.

    multimode:           y is one of the given patterns (categorical weights),
                         each bit then flipped with probability ``noise``;
                         context is irrelevant uniform noise.
    xor-pair:            two labels; y1 = xor of two context thresholds,
                         y2 = 1 - y1, plus flip noise. Context-dependent, but
                         the x-marginal joint equals the two-mode table.
    independent-control: labels drawn independently with the per-label
                         marginals implied by (patterns, weights, noise);
                         a control where independence genuinely holds.
    """

    kind: str
    patterns: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    noise: float = 0.0
    context_dim: int = 4
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise DatasetError(f"unknown generator kind {self.kind!r}")
        if self.kind == "xor-pair":
            if not self.patterns:
                self.patterns = [[1, 0], [0, 1]]
                self.weights = [0.5, 0.5]
            if self.context_dim < 2:
                raise DatasetError("xor-pair needs context_dim >= 2")
        if not self.patterns:
            raise DatasetError("patterns must be non-empty")
        widths = {len(p) for p in self.patterns}
        if len(widths) != 1:
            raise DatasetError("patterns must all have the same length")
        if self.kind == "xor-pair" and self.label_count != 2:
            raise DatasetError("xor-pair patterns must have length 2")
        for p in self.patterns:
            if any(b not in (0, 1) for b in p):
                raise DatasetError("patterns must be binary 0/1 vectors")
        if len(self.weights) != len(self.patterns):
            raise DatasetError("weights and patterns must have equal length")
        if abs(sum(self.weights) - 1.0) > 1e-9 or any(w < 0 for w in self.weights):
            raise DatasetError("weights must be nonnegative and sum to 1")
        if not 0.0 <= self.noise < 0.5:
            raise DatasetError("noise must be in [0, 0.5)")
        if self.context_dim < 1 or self.n < 1:
            raise DatasetError("context_dim and n must be >= 1")

    @property
    def label_count(self) -> int:
        return len(self.patterns[0])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "patterns": [list(p) for p in self.patterns],
            "weights": list(self.weights),
            "noise": self.noise,
            "context_dim": self.context_dim,
            "n": self.n,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        known = {"kind", "patterns", "weights", "noise", "context_dim", "n", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise DatasetError(f"unknown spec fields: {sorted(unknown)}")
        if "kind" not in doc:
            raise DatasetError("spec is missing 'kind'")
        return cls(**doc)


def _decimal_fraction(x) -> Fraction:
    # Treat user-supplied values as the decimals they were written as.
    return Fraction(str(x))


def _pattern_key(bits) -> str:
    return "".join(str(int(b)) for b in bits)


def joint_table_fractions(spec: SyntheticSpec) -> dict[str, Fraction]:
    """Exact joint table over all 2^l outcomes, in rational arithmetic.

    Weights are normalized exactly so the table sums to exactly 1. For
    xor-pair the table is the x-marginal joint (x is uniform, the threshold
    split is exactly 50/50).
    """
    l = spec.label_count
    eps = _decimal_fraction(spec.noise)
    weights = [_decimal_fraction(w) for w in spec.weights]
    total = sum(weights)
    weights = [w / total for w in weights]
    outcomes = [tuple((i >> (l - 1 - j)) & 1 for j in range(l)) for i in range(2**l)]

    if spec.kind == "independent-control":
        marginals = []
        for j in range(l):
            q = sum(w for w, p in zip(weights, spec.patterns) if p[j] == 1)
            marginals.append(q * (1 - eps) + (1 - q) * eps)
        table = {}
        for o in outcomes:
            prob = Fraction(1)
            for j, bit in enumerate(o):
                prob *= marginals[j] if bit == 1 else (1 - marginals[j])
            table[_pattern_key(o)] = prob
        return table

    if spec.kind == "xor-pair":
        patterns = [(1, 0), (0, 1)]
        weights = [Fraction(1, 2), Fraction(1, 2)]
    else:
        patterns = [tuple(int(b) for b in p) for p in spec.patterns]

    table = {}
    for o in outcomes:
        prob = Fraction(0)
        for w, p in zip(weights, patterns):
            term = w
            for j in range(l):
                term *= (1 - eps) if o[j] == p[j] else eps
            prob += term
        table[_pattern_key(o)] = prob
    return table


def joint_table(spec: SyntheticSpec) -> dict[str, float]:
    """The exact joint table converted to floats, keyed by label bitstring."""
    return {k: float(v) for k, v in joint_table_fractions(spec).items()}


def table_entropy_nats(table: dict[str, float]) -> float:
    probs = np.array([p for p in table.values() if p > 0.0])
    return float(-(probs * np.log(probs)).sum())


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, dict[str, float]]:
    """Draw a dataset from the generator and return its exact joint table."""
    rng = np.random.default_rng(spec.seed)
    l = spec.label_count
    x = rng.random((spec.n, spec.context_dim))
    if spec.kind == "multimode":
        comp = rng.choice(len(spec.patterns), size=spec.n, p=list(spec.weights))
        y = np.array(spec.patterns, dtype=np.int64)[comp]
    elif spec.kind == "xor-pair":
        g = (x[:, 0] > 0.5).astype(np.int64) ^ (x[:, 1] > 0.5).astype(np.int64)
        y = np.stack([g, 1 - g], axis=1)
    else:  # independent-control
        table = joint_table_fractions(spec)
        eps = float(_decimal_fraction(spec.noise))
        marg = []
        for j in range(l):
            q = sum(
                w for w, p in zip(spec.weights, spec.patterns) if p[j] == 1
            ) / sum(spec.weights)
            marg.append(q * (1 - eps) + (1 - q) * eps)
        y = (rng.random((spec.n, l)) < np.array(marg)).astype(np.int64)
        dataset = LabeledDataset(
            x, y, label_names=[f"label{j}" for j in range(l)]
        )
        return dataset, {k: float(v) for k, v in table.items()}
    if spec.noise > 0.0:
        flips = rng.random((spec.n, l)) < spec.noise
        y = y ^ flips.astype(np.int64)
    dataset = LabeledDataset(x, y, label_names=[f"label{j}" for j in range(l)])
    return dataset, joint_table(spec)


@dataclass
class HistogramFeature:
    """Per-band pixel-value histogram: d bands by b bins of pixel fractions."""

    matrix: np.ndarray  # (d, b), rows sum to 1

    def flatten(self) -> np.ndarray:
        """Row-major feature vector of length d * b."""
        return self.matrix.ravel().copy()


def histogram_featurize(image: np.ndarray, bins: int) -> HistogramFeature:
    """Fraction of pixels per value range, per band.

    Bin j of band i counts pixels with value in [j*256/bins, (j+1)*256/bins),
    divided by the pixel count. Invariant to any permutation of pixels.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise DatasetError(f"image must be (bands, H, W), got shape {image.shape}")
    d = image.shape[0]
    if d < 1:
        raise DatasetError("image needs at least one band")
    n_pixels = image.shape[1] * image.shape[2]
    if n_pixels == 0:
        raise DatasetError("empty image")
    if bins < 1 or 256 % bins != 0:
        raise DatasetError(f"bins must divide 256, got {bins}")
    if image.min() < 0 or image.max() > 255:
        raise DatasetError("pixel values must be 8-bit (0..255)")
    width = 256 // bins
    rows = []
    for band in image.astype(np.int64):
        counts = np.bincount(band.ravel(), minlength=256)
        rows.append(counts.reshape(bins, width).sum(axis=1) / n_pixels)
    return HistogramFeature(np.array(rows))


def read_ppm(path) -> np.ndarray:
    """Binary PPM (magic P6, maxval 255) to a (3, H, W) uint8 array, bands R,G,B."""
    raw = Path(path).read_bytes()
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(raw):
            c = raw[pos : pos + 1]
            if c == b"#":
                while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"truncated PPM header: {path}")
        return raw[start:pos]

    magic = next_token()
    if magic != b"P6":
        raise DatasetError(f"not a binary PPM (magic {magic!r}, expected b'P6'): {path}")
    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    if maxval != 255:
        raise DatasetError(f"unsupported PPM maxval {maxval}, expected 255: {path}")
    pos += 1  # single whitespace byte after maxval
    expected = 3 * width * height
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise DatasetError(
            f"truncated PPM payload: expected {expected} bytes, got {len(payload)}: {path}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).copy()


@dataclass
class Standardization:
    """Per-column center/scale fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, dataset: LabeledDataset) -> LabeledDataset:
        if dataset.k != self.mean.shape[0]:
            raise DatasetError(
                f"dataset has {dataset.k} feature columns, stats expect {self.mean.shape[0]}"
            )
        return LabeledDataset(
            (dataset.features - self.mean) / self.std,
            dataset.labels,
            dataset.feature_names,
            dataset.label_names,
        )

    def transform_rows(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardization":
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))


def standardize_features(train: LabeledDataset, *others: LabeledDataset):
    """Center/scale every dataset by the TRAIN columns' mean and std.

    Near-constant columns (std < 1e-12) are centered only, scale 1. Returns
    (transformed datasets in input order, stats).
    """
    if train.n == 0:
        raise DatasetError("cannot standardize an empty training set")
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    stats = Standardization(mean, std)
    transformed = [stats.transform(d) for d in (train, *others)]
    return transformed, stats


def split(dataset: LabeledDataset, fractions, seed) -> list[LabeledDataset]:
    """Seeded shuffle, then contiguous cuts.

    Every split after the first takes floor(fraction * N) rows; the first
    absorbs the rounding remainder. Producing an empty split is an error.
    """
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1, got {sum(fractions)}")
    if any(f <= 0 for f in fractions):
        raise DatasetError("fractions must be positive")
    n = dataset.n
    sizes = [int(f * n) for f in fractions[1:]]
    first = n - sum(sizes)
    sizes = [first, *sizes]
    if any(s <= 0 for s in sizes):
        raise DatasetError(f"split produced an empty part: sizes {sizes} from N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = []
    offset = 0
    for s in sizes:
        parts.append(dataset.subset(perm[offset : offset + s]))
        offset += s
    return parts
