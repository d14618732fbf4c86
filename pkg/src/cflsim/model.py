"""Local learner: a one-hidden-layer sigmoid network with softmax output,
trained by full-batch gradient descent.

Parameters live in one flat float64 vector laid out as
[W1.ravel(), b1, W2.ravel(), b2] for shapes (dim, hidden, classes), so a
model travels over a link as a single vector and mixing is plain vector
arithmetic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Raised when gradient descent produces non-finite parameters."""


@dataclass(frozen=True)
class ModelShapes:
    dim: int
    hidden: int
    classes: int

    def __post_init__(self) -> None:
        if self.dim < 1 or self.hidden < 1 or self.classes < 2:
            raise ValueError("need dim >= 1, hidden >= 1, classes >= 2")

    @property
    def n_params(self) -> int:
        d, h, k = self.dim, self.hidden, self.classes
        return d * h + h + h * k + k


@dataclass(frozen=True)
class ModelParams:
    shapes: ModelShapes
    theta: np.ndarray

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.shapes.n_params,):
            raise ValueError(
                f"theta length {theta.shape} != expected ({self.shapes.n_params},)"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")
        theta = theta.copy()
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def unpack(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        d, h, k = self.shapes.dim, self.shapes.hidden, self.shapes.classes
        t = self.theta
        w1 = t[: d * h].reshape(d, h)
        b1 = t[d * h: d * h + h]
        w2 = t[d * h + h: d * h + h + h * k].reshape(h, k)
        b2 = t[d * h + h + h * k:]
        return w1, b1, w2, b2

    def replace_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(self.shapes, theta)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, dim) float64
    labels: np.ndarray    # (n,) int64 in [0, classes)

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if y.shape != (x.shape[0],):
            raise ValueError("label count must match sample count")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain NaN/Inf")
        if x.shape[0] and y.min() < 0:
            raise ValueError("negative class label")
        x = x.copy(); x.flags.writeable = False
        y = y.copy(); y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    local_steps: int = 1

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")


def init_params(seed: int, shapes: ModelShapes) -> ModelParams:
    """Seeded uniform(+-1/sqrt(fan_in)) init, drawn layer by layer."""
    rng = np.random.default_rng(seed)
    d, h, k = shapes.dim, shapes.hidden, shapes.classes
    s1 = 1.0 / np.sqrt(d)
    s2 = 1.0 / np.sqrt(h)
    parts = [
        rng.uniform(-s1, s1, size=d * h),
        rng.uniform(-s1, s1, size=h),
        rng.uniform(-s2, s2, size=h * k),
        rng.uniform(-s2, s2, size=k),
    ]
    return ModelParams(shapes, np.concatenate(parts))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(p: ModelParams, x: np.ndarray):
    w1, b1, w2, b2 = p.unpack()
    hidden = _sigmoid(x @ w1 + b1)
    logits = hidden @ w2 + b2
    return hidden, logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_shapes(p: ModelParams, d: Dataset) -> None:
    if d.features.shape[1] != p.shapes.dim:
        raise ValueError(
            f"feature dim {d.features.shape[1]} != model dim {p.shapes.dim}")
    if d.n_samples and int(d.labels.max()) >= p.shapes.classes:
        raise ValueError("label out of range for model classes")


def loss(p: ModelParams, d: Dataset) -> float:
    """Mean cross-entropy of the softmax outputs."""
    _check_shapes(p, d)
    _, logits = _forward(p, d.features)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(d.n_samples), d.labels].mean())


def accuracy(p: ModelParams, d: Dataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    _check_shapes(p, d)
    _, logits = _forward(p, d.features)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == d.labels))


def grad(p: ModelParams, d: Dataset) -> np.ndarray:
    """Analytic full-batch gradient, same layout as theta."""
    _check_shapes(p, d)
    x, y = d.features, d.labels
    n = d.n_samples
    w1, b1, w2, b2 = p.unpack()
    hidden, logits = _forward(p, x)
    probs = np.exp(_log_softmax(logits))
    dz2 = probs
    dz2[np.arange(n), y] -= 1.0
    dz2 /= n
    g_w2 = hidden.T @ dz2
    g_b2 = dz2.sum(axis=0)
    dh = dz2 @ w2.T
    dz1 = dh * hidden * (1.0 - hidden)
    g_w1 = x.T @ dz1
    g_b1 = dz1.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def gd_steps(p: ModelParams, d: Dataset, cfg: TrainConfig) -> ModelParams:
    """Apply local_steps full-batch GD updates theta <- theta - lr * grad."""
    theta = p.theta.copy()
    cur = p
    for _ in range(cfg.local_steps):
        g = grad(cur, d)
        theta -= cfg.lr * g
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergedError("parameters became non-finite during GD")
        cur = ModelParams(p.shapes, theta)
    return cur


def average_params(params: list[ModelParams],
                   weights: np.ndarray | None = None) -> ModelParams:
    """Weighted average of parameter vectors (uniform when weights is None)."""
    if not params:
        raise ValueError("need at least one model")
    stack = np.stack([p.theta for p in params])
    if weights is None:
        avg = stack.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        avg = (w / w.sum()) @ stack
    return ModelParams(params[0].shapes, avg)


# ---------------------------------------------------------------------------
# Data: synthetic Gaussian blobs and the IDX file format
# ---------------------------------------------------------------------------

def synth_data(
    seed: int,
    n_per_device: int,
    n_devices: int,
    dim: int,
    n_classes: int,
    shards_per_device: int,
    *,
    spread: float = 3.0,
    test_samples: int = 1000,
) -> tuple[list[Dataset], Dataset]:
    """Gaussian class blobs split across devices by label shards.

    Class k has unit covariance around mean spread * e_k (a scaled simplex;
    requires dim >= n_classes).  Each device draws ``shards_per_device``
    shards, each shard holding samples of a single label, so small shard
    counts give strongly non-IID splits and shards_per_device == n_classes
    recovers an IID split where every device sees every label.  The
    held-out test set cycles through the classes.  Deterministic per seed.
    """
    if dim < n_classes:
        raise ValueError("need dim >= n_classes to place class means")
    if shards_per_device < 1 or shards_per_device > n_classes:
        raise ValueError("shards_per_device must be in [1, n_classes]")
    if n_per_device % shards_per_device != 0:
        raise ValueError(
            f"{n_per_device} samples per device cannot be split into "
            f"{shards_per_device} equal shards")
    rng = np.random.default_rng(seed)
    means = np.zeros((n_classes, dim))
    means[np.arange(n_classes), np.arange(n_classes)] = spread

    if shards_per_device == n_classes:
        shard_labels = np.tile(np.arange(n_classes), n_devices)
    else:
        n_shards = n_devices * shards_per_device
        reps = -(-n_shards // n_classes)  # ceil
        pool = np.tile(np.arange(n_classes), reps)[:n_shards]
        shard_labels = rng.permutation(pool)

    shard_size = n_per_device // shards_per_device
    devices = []
    for i in range(n_devices):
        labels = shard_labels[i * shards_per_device: (i + 1) * shards_per_device]
        xs, ys = [], []
        for lab in labels:
            xs.append(means[lab] + rng.standard_normal((shard_size, dim)))
            ys.append(np.full(shard_size, lab, dtype=np.int64))
        devices.append(Dataset(np.concatenate(xs), np.concatenate(ys)))

    test_labels = np.arange(test_samples, dtype=np.int64) % n_classes
    test_x = means[test_labels] + rng.standard_normal((test_samples, dim))
    return devices, Dataset(test_x, test_labels)


def partition_dataset(
    d: Dataset,
    seed: int,
    n_devices: int,
    n_per_device: int,
    shards_per_device: int,
    n_classes: int,
) -> list[Dataset]:
    """Shard an existing dataset across devices by label, mirroring the
    synthetic partition scheme (used for MNIST-style data)."""
    if n_per_device % shards_per_device != 0:
        raise ValueError("samples per device must divide into equal shards")
    rng = np.random.default_rng(seed)
    n_shards = n_devices * shards_per_device
    reps = -(-n_shards // n_classes)
    pool = np.tile(np.arange(n_classes), reps)[:n_shards]
    shard_labels = rng.permutation(pool)
    shard_size = n_per_device // shards_per_device

    by_label = {k: rng.permutation(np.flatnonzero(d.labels == k))
                for k in range(n_classes)}
    used = {k: 0 for k in range(n_classes)}
    devices = []
    for i in range(n_devices):
        idx = []
        for lab in shard_labels[i * shards_per_device: (i + 1) * shards_per_device]:
            lab = int(lab)
            start = used[lab]
            take = by_label[lab][start: start + shard_size]
            if len(take) < shard_size:
                raise ValueError(f"not enough samples of class {lab} to shard")
            used[lab] += shard_size
            idx.append(take)
        sel = np.concatenate(idx)
        devices.append(Dataset(d.features[sel], d.labels[sel]))
    return devices


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair (big-endian magic + dims, then raw
    unsigned bytes).  Pixels are scaled to [0, 1] by dividing by 255."""
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ValueError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != _IDX_IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad images magic 0x{magic:08x}")
        raw = fh.read(count * rows * cols)
        if len(raw) < count * rows * cols:
            raise ValueError(f"{images_path}: truncated image data")
        features = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
        features = features.reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ValueError(f"{labels_path}: truncated IDX header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != _IDX_LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad labels magic 0x{magic:08x}")
        raw = fh.read(n_labels)
        if len(raw) < n_labels:
            raise ValueError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n_labels != count:
        raise ValueError(
            f"image count {count} != label count {n_labels}")
    return Dataset(features, labels)
