"""Dataset synthesis, client partitioning, and data-level defenses.

Partitions keep client datasets pairwise disjoint and disjoint from the
holdout pool, which is what lets the attack treat non-target clients as
clean null-hypothesis material. The three data-level defenses (mixup,
augmentation, subsampling) transform training batches only; attack
targets are always original records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

from .errors import (
    ConfigError,
    DataFormatError,
    EmptySampleError,
    InsufficientDataError,
    ParameterError,
)
from .model import LabeledSample
from .numstat import RngStream


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus integer labels; immutable after construction."""

    features: np.ndarray  # (n, input_dim) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    geometry: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ConfigError("features must be (n, d) aligned with labels")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("dataset features must be finite")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")
        if self.geometry is not None:
            rows, cols = self.geometry
            if rows * cols != self.input_dim:
                raise ConfigError(
                    f"geometry {self.geometry} does not match input_dim {self.input_dim}"
                )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.features[i], int(self.labels[i]))

    def arrays(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True, eq=False)
class Partition:
    """Disjoint per-client index lists plus a disjoint holdout pool."""

    client_indices: list[np.ndarray]
    holdout_indices: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "client_indices",
            [np.asarray(c, dtype=np.int64) for c in self.client_indices],
        )
        object.__setattr__(
            self, "holdout_indices", np.asarray(self.holdout_indices, dtype=np.int64)
        )
        all_idx = np.concatenate(self.client_indices + [self.holdout_indices])
        if len(np.unique(all_idx)) != len(all_idx):
            raise ConfigError("partition lists must be pairwise disjoint")
        if len(all_idx) and all_idx.min() < 0:
            raise ConfigError("partition indices must be nonnegative")

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


@dataclass(frozen=True, eq=False)
class EvalSplit:
    """Candidate member / non-member index pools for one target client."""

    member_indices: np.ndarray
    nonmember_indices: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "member_indices", np.asarray(self.member_indices, dtype=np.int64))
        object.__setattr__(
            self, "nonmember_indices", np.asarray(self.nonmember_indices, dtype=np.int64)
        )
        if np.intersect1d(self.member_indices, self.nonmember_indices).size:
            raise ConfigError("member and non-member pools overlap")


def synth_blobs(
    rng: RngStream,
    num_classes: int,
    input_dim: int,
    per_class: int,
    class_sep: float,
) -> Dataset:
    """Gaussian blobs with unit covariance, one mean per class.

    Class means sit at pairwise distance ``class_sep`` (scaled simplex on
    the coordinate axes when input_dim >= num_classes, random directions
    otherwise), so ``class_sep = 0`` makes the classes indistinguishable.
    """
    if num_classes < 1 or input_dim < 1 or per_class < 1:
        raise ParameterError("num_classes, input_dim, per_class must be positive")
    if class_sep < 0:
        raise ParameterError(f"class_sep must be >= 0, got {class_sep}")
    g = rng.generator()
    scale = class_sep / math.sqrt(2.0)
    means = np.zeros((num_classes, input_dim))
    if input_dim >= num_classes:
        for c in range(num_classes):
            means[c, c] = scale
    else:
        dirs = g.standard_normal((num_classes, input_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = scale * dirs
    feats = np.empty((num_classes * per_class, input_dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        feats[block] = means[c] + g.standard_normal((per_class, input_dim))
        labels[block] = c
    return Dataset(feats, labels, num_classes)


def load_csv(path: str, num_classes: int | None = None, geometry: tuple[int, int] | None = None) -> Dataset:
    """Load ``label,f1,...,fd`` rows (UTF-8, no header) into a Dataset.

    Parse failures name the offending 1-based line number. When
    ``num_classes`` is omitted it is inferred as ``max(label) + 1``.
    """
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) < 2:
                raise DataFormatError(f"line {lineno}: expected label plus features")
            try:
                label = int(fields[0])
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-integer label {fields[0]!r}") from None
            try:
                feats = [float(f) for f in fields[1:]]
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-numeric feature value") from None
            if rows and len(feats) != len(rows[0]):
                raise DataFormatError(
                    f"line {lineno}: expected {len(rows[0])} features, got {len(feats)}"
                )
            if label < 0:
                raise DataFormatError(f"line {lineno}: negative label {label}")
            if num_classes is not None and label >= num_classes:
                raise DataFormatError(
                    f"line {lineno}: label {label} out of range for {num_classes} classes"
                )
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise EmptySampleError(f"{path}: empty dataset file")
    nc = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(np.array(rows), np.array(labels), nc, geometry)


def _deal_stratified(g: np.random.Generator, dataset: Dataset, num_clients: int) -> list[list[int]]:
    """Shuffle each class and deal it across clients as evenly as possible.

    The +1 remainder chunks rotate with the class index so no client is
    systematically favored.
    """
    pools: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = g.permutation(idx)
        base, rem = divmod(len(idx), num_clients)
        pos = 0
        for j in range(num_clients):
            k = (c + j) % num_clients
            take = base + (1 if j < rem else 0)
            pools[k].extend(idx[pos : pos + take].tolist())
            pos += take
    return pools


def partition_iid(
    rng: RngStream,
    dataset: Dataset,
    num_clients: int,
    per_client: int,
    holdout: int,
) -> Partition:
    """Class-stratified uniform partition into equal-size clients plus holdout."""
    if num_clients < 1 or per_client < 1 or holdout < 0:
        raise ParameterError("num_clients, per_client positive; holdout >= 0")
    if num_clients * per_client + holdout > len(dataset):
        raise InsufficientDataError(
            f"need {num_clients * per_client + holdout} samples, have {len(dataset)}"
        )
    g = rng.generator()
    pools = _deal_stratified(g, dataset, num_clients)
    clients: list[np.ndarray] = []
    leftover: list[int] = []
    for pool in pools:
        arr = g.permutation(np.array(pool, dtype=np.int64))
        if len(arr) < per_client:
            raise InsufficientDataError(
                f"client pool of {len(arr)} cannot supply per_client={per_client}"
            )
        clients.append(np.sort(arr[:per_client]))
        leftover.extend(arr[per_client:].tolist())
    leftover_arr = g.permutation(np.array(leftover, dtype=np.int64))
    return Partition(clients, np.sort(leftover_arr[:holdout]))


def partition_dirichlet(
    rng: RngStream,
    dataset: Dataset,
    num_clients: int,
    beta: float,
    holdout: int,
) -> Partition:
    """Non-IID partition: per-class client proportions drawn from Dirichlet(beta).

    ``beta = inf`` is a documented alias for the IID partition with
    ``per_client = (n - holdout) // num_clients``. Rounding residuals go
    to the clients with the largest fractional shares.
    """
    if math.isinf(beta):
        per_client = (len(dataset) - holdout) // num_clients
        return partition_iid(rng, dataset, num_clients, per_client, holdout)
    if beta <= 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    if num_clients < 1 or holdout < 0 or holdout >= len(dataset):
        raise ParameterError("invalid num_clients/holdout")
    g = rng.generator()

    # Reserve the holdout stratified by class (largest-remainder counts).
    holdout_idx: list[int] = []
    remain_by_class: list[np.ndarray] = []
    class_sizes = np.array(
        [np.count_nonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    )
    quotas = holdout * class_sizes / len(dataset)
    counts = np.floor(quotas).astype(int)
    frac_order = np.argsort(-(quotas - counts), kind="stable")
    for c in frac_order[: holdout - counts.sum()]:
        counts[c] += 1
    for c in range(dataset.num_classes):
        idx = g.permutation(np.flatnonzero(dataset.labels == c))
        holdout_idx.extend(idx[: counts[c]].tolist())
        remain_by_class.append(idx[counts[c] :])

    clients: list[list[int]] = [[] for _ in range(num_clients)]
    for c, idx in enumerate(remain_by_class):
        if len(idx) == 0:
            continue
        props = g.dirichlet(np.full(num_clients, float(beta)))
        raw = props * len(idx)
        take = np.floor(raw).astype(int)
        order = np.argsort(-(raw - take), kind="stable")
        for k in order[: len(idx) - take.sum()]:
            take[k] += 1
        pos = 0
        for k in range(num_clients):
            clients[k].extend(idx[pos : pos + take[k]].tolist())
            pos += take[k]
    return Partition(
        [np.sort(np.array(c, dtype=np.int64)) for c in clients],
        np.sort(np.array(holdout_idx, dtype=np.int64)),
    )


def make_eval_split(
    rng: RngStream,
    partition: Partition,
    target_client: int,
    nonmember_source: str = "holdout",
    holdout_fraction: float = 0.1,
    others_fraction: float = 0.1,
) -> EvalSplit:
    """Member / non-member pools for attacking one client.

    ``holdout`` draws non-members from the holdout pool only;
    ``holdout+others`` mixes a fraction of the holdout with a fraction of
    every other client's training data (defaults keep one tenth of each).
    """
    if not (0 <= target_client < partition.num_clients):
        raise ConfigError(f"target_client {target_client} out of range")
    members = partition.client_indices[target_client]
    g = rng.generator()
    if nonmember_source == "holdout":
        nonmembers = partition.holdout_indices.copy()
    elif nonmember_source == "holdout+others":
        if not (0 < holdout_fraction <= 1) or not (0 < others_fraction <= 1):
            raise ConfigError("nonmember pool fractions must be in (0, 1]")
        parts = []
        nh = math.ceil(holdout_fraction * len(partition.holdout_indices))
        if nh:
            parts.append(g.choice(partition.holdout_indices, nh, replace=False))
        for k, idx in enumerate(partition.client_indices):
            if k == target_client or len(idx) == 0:
                continue
            nk = math.ceil(others_fraction * len(idx))
            parts.append(g.choice(idx, nk, replace=False))
        nonmembers = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    else:
        raise ConfigError(f"unknown nonmember_source {nonmember_source!r}")
    return EvalSplit(np.sort(members), np.sort(nonmembers))


@dataclass(frozen=True, eq=False)
class MixedBatch:
    """Convex combinations of a batch with its in-batch permutation partner.

    Training loss contract for row i with coefficient ``lam``:
    ``lam * loss(features[i], labels_a[i]) + (1 - lam) * loss(features[i], labels_b[i])``.
    """

    features: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    lam: float


def mix_with_lambda(
    x: np.ndarray, y: np.ndarray, partner: np.ndarray, lam: float
) -> MixedBatch:
    """Deterministic core of mixup for a fixed coefficient and pairing."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mixed = lam * x + (1.0 - lam) * x[partner]
    return MixedBatch(mixed, y.copy(), y[partner].copy(), float(lam))


def mixup(rng: RngStream, x: np.ndarray, y: np.ndarray, alpha: float) -> MixedBatch:
    """Mix a batch with a random in-batch partner, lam ~ Beta(alpha, alpha).

    One coefficient is drawn per batch (the convention of the original
    mixup procedure).
    """
    if alpha <= 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise ParameterError("mixup needs a batch of at least 2 samples")
    g = rng.generator()
    lam = float(g.beta(alpha, alpha))
    partner = g.permutation(len(x))
    return mix_with_lambda(x, y, partner, lam)


@dataclass(frozen=True)
class AugmentOps:
    """Which augmentation primitives the defense applies during training."""

    flip_h: bool = False
    shift: bool = False
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def needs_geometry(self) -> bool:
        return self.flip_h or self.shift


def flip_horizontal(x: np.ndarray, geometry: tuple[int, int]) -> np.ndarray:
    """Reverse every row of the grid-structured feature vector."""
    rows, cols = geometry
    return np.asarray(x, dtype=np.float64).reshape(rows, cols)[:, ::-1].ravel().copy()


def shift_grid(x: np.ndarray, geometry: tuple[int, int], dy: int, dx: int) -> np.ndarray:
    """Translate the grid by (dy, dx) with zero fill outside the frame."""
    rows, cols = geometry
    grid = np.asarray(x, dtype=np.float64).reshape(rows, cols)
    out = np.zeros_like(grid)
    src_r = slice(max(0, -dy), min(rows, rows - dy))
    src_c = slice(max(0, -dx), min(cols, cols - dx))
    dst_r = slice(max(0, dy), min(rows, rows + dy))
    dst_c = slice(max(0, dx), min(cols, cols + dx))
    out[dst_r, dst_c] = grid[src_r, src_c]
    return out.ravel()


def augment(
    rng: RngStream,
    sample: LabeledSample,
    geometry: tuple[int, int] | None,
    ops: AugmentOps,
) -> LabeledSample:
    """Random label-preserving transform: optional flip, +/-1 px shift, noise."""
    if ops.needs_geometry and geometry is None:
        raise ConfigError("flip/shift augmentation requires grid geometry")
    g = rng.generator()
    x = np.asarray(sample.x, dtype=np.float64).copy()
    if ops.flip_h and g.integers(2):
        x = flip_horizontal(x, geometry)
    if ops.shift:
        dy, dx = g.integers(-1, 2, size=2)
        x = shift_grid(x, geometry, int(dy), int(dx))
    if ops.noise_std > 0:
        x = x + ops.noise_std * g.standard_normal(len(x))
    return LabeledSample(x, sample.y)


def augment_batch(
    g: np.random.Generator,
    x: np.ndarray,
    geometry: tuple[int, int] | None,
    ops: AugmentOps,
) -> np.ndarray:
    """Vectorized augmentation of a training batch (labels unchanged)."""
    if ops.needs_geometry and geometry is None:
        raise ConfigError("flip/shift augmentation requires grid geometry")
    out = np.array(x, dtype=np.float64, copy=True)
    n = len(out)
    if ops.flip_h:
        mask = g.integers(2, size=n).astype(bool)
        for i in np.flatnonzero(mask):
            out[i] = flip_horizontal(out[i], geometry)
    if ops.shift:
        offsets = g.integers(-1, 2, size=(n, 2))
        for i in range(n):
            out[i] = shift_grid(out[i], geometry, int(offsets[i, 0]), int(offsets[i, 1]))
    if ops.noise_std > 0:
        out += ops.noise_std * g.standard_normal(out.shape)
    return out


def subsample(rng: RngStream, indices: np.ndarray, portion: float) -> np.ndarray:
    """ceil(portion * n) distinct indices drawn without replacement."""
    if not (0 < portion <= 1):
        raise ParameterError(f"portion must be in (0, 1], got {portion}")
    indices = np.asarray(indices, dtype=np.int64)
    take = math.ceil(portion * len(indices))
    return rng.generator().choice(indices, take, replace=False)
