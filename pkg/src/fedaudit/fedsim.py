"""Synchronous FedAvg over K clients with per-round trace recording.

Each round: every client runs local SGD from the current global model,
uploads a gradient-like update (parameter delta divided by the round's
effective learning rate, after any update-level defense), and the server
replaces the global model with

    w  <-  w - (lr_eff / K) * sum_k update_k

which with the delta/lr_eff convention is exact model averaging. The full
observation available to a semi-honest server — every per-client update
plus the per-round global models — is recorded as an UpdateTrace and can
be persisted and replayed without retraining.

Update-level defenses (perturb / quantize / sparsify) transform the
uploaded vector; data-level defenses (mixup / augment / sample) act inside
local training. All randomness is drawn from per-(round, client) streams,
so client execution order cannot change the trace.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as mdl
from .data import (
    AugmentOps,
    Dataset,
    Partition,
    augment_batch,
    mix_with_lambda,
)
from .errors import (
    ConfigError,
    IntegrityError,
    ParameterError,
    ShapeMismatchError,
)
from .model import ModelSpec
from .numstat import RngStream

UPDATE_DEFENSES = ("perturb", "quantize", "sparsify")
DATA_DEFENSES = ("mixup", "augment", "sample", "augment_and_sample")
DEFENSE_KINDS = ("none",) + UPDATE_DEFENSES + DATA_DEFENSES

# Stream tags for deriving per-purpose RNG streams from the run seed.
TAG_INIT = 1
TAG_CLIENT = 2
TAG_DEFENSE = 3

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DefenseConfig:
    """One defense and its parameters; ranges follow the evaluated grids."""

    kind: str = "none"
    clip_norm: float | None = None
    noise_std: float | None = None
    bits: int | None = None
    rate: float | None = None
    alpha: float | None = None
    portion: float | None = None
    augment_ops: AugmentOps | None = None

    def __post_init__(self) -> None:
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense kind {self.kind!r}")
        if self.kind == "perturb":
            if self.clip_norm is None or self.clip_norm <= 0:
                raise ConfigError("perturb requires clip_norm > 0")
            if self.noise_std is None or self.noise_std < 0:
                raise ConfigError("perturb requires noise_std >= 0")
        if self.kind == "quantize":
            if self.bits is None or not (1 <= self.bits <= 10):
                raise ConfigError("quantize requires bits in [1, 10]")
        if self.kind == "sparsify":
            if self.rate is None or not (0 <= self.rate <= 0.99):
                raise ConfigError("sparsify requires rate in [0, 0.99]")
        if self.kind == "mixup":
            if self.alpha is None or self.alpha <= 0:
                raise ConfigError("mixup requires alpha > 0")
        if self.kind in ("sample", "augment_and_sample"):
            if self.portion is None or not (0 < self.portion <= 1):
                raise ConfigError("sample requires portion in (0, 1]")
        if self.kind in ("augment", "augment_and_sample"):
            if self.augment_ops is None:
                raise ConfigError("augment requires an AugmentOps block")

    @property
    def is_update_level(self) -> bool:
        return self.kind in UPDATE_DEFENSES

    @property
    def is_data_level(self) -> bool:
        return self.kind in DATA_DEFENSES

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        for name in ("clip_norm", "noise_std", "bits", "rate", "alpha", "portion"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        if self.augment_ops is not None:
            d["augment_ops"] = {
                "flip_h": self.augment_ops.flip_h,
                "shift": self.augment_ops.shift,
                "noise_std": self.augment_ops.noise_std,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        d = dict(d)
        ops = d.pop("augment_ops", None)
        known = {"kind", "clip_norm", "noise_std", "bits", "rate", "alpha", "portion"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown defense keys: {sorted(unknown)}")
        return cls(augment_ops=AugmentOps(**ops) if ops is not None else None, **d)


@dataclass(frozen=True)
class FedConfig:
    """Federation hyperparameters for one run."""

    num_clients: int
    rounds: int
    local_epochs: int = 1
    lr: float = 0.1
    lr_decay: float = 1.0
    batch_size: int = 32
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 2:
            raise ConfigError("num_clients must be >= 2")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not (0 < self.lr_decay <= 1):
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def lr_effective(config: FedConfig, round_index: int) -> float:
    """Learning rate shared by local steps and server scaling at a round."""
    return config.lr * config.lr_decay**round_index


@dataclass(frozen=True, eq=False)
class RoundRecord:
    """Everything the server observed in one communication round."""

    round_index: int
    global_before: np.ndarray  # (d,) model distributed at round start
    updates: np.ndarray  # (K, d) post-defense uploads
    lr_effective: float


@dataclass(eq=False)
class UpdateTrace:
    """The server-side observation of a whole federation run."""

    model_spec: ModelSpec
    rounds: list[RoundRecord]
    final_model: np.ndarray
    round_accuracy: list[float]
    defense: DefenseConfig
    seed: int

    @property
    def num_rounds(self) -> int:
        return len(self.rounds)

    @property
    def num_clients(self) -> int:
        return self.rounds[0].updates.shape[0]

    @property
    def dim(self) -> int:
        return self.rounds[0].updates.shape[1]

    def prefix(self, num_rounds: int) -> "UpdateTrace":
        """Trace truncated to its first ``num_rounds`` rounds."""
        if not (1 <= num_rounds <= self.num_rounds):
            raise ParameterError(f"prefix length {num_rounds} out of range")
        if num_rounds == self.num_rounds:
            final = self.final_model
        else:
            final = self.rounds[num_rounds].global_before
        return UpdateTrace(
            model_spec=self.model_spec,
            rounds=self.rounds[:num_rounds],
            final_model=final,
            round_accuracy=self.round_accuracy[:num_rounds],
            defense=self.defense,
            seed=self.seed,
        )

    def scaled_updates(self, factor: float) -> "UpdateTrace":
        """Copy of the trace with every uploaded update multiplied by ``factor``."""
        rounds = [
            RoundRecord(r.round_index, r.global_before, factor * r.updates, r.lr_effective)
            for r in self.rounds
        ]
        return UpdateTrace(
            model_spec=self.model_spec,
            rounds=rounds,
            final_model=self.final_model,
            round_accuracy=list(self.round_accuracy),
            defense=self.defense,
            seed=self.seed,
        )


def defend_update(update: np.ndarray, defense: DefenseConfig, rng: RngStream) -> np.ndarray:
    """Apply an update-level defense to one uploaded vector.

    perturb   : L2-clip to clip_norm, then add iid Gaussian(0, noise_std^2).
    quantize  : symmetric uniform grid of 2^bits levels over [-max|v|, max|v|];
                bits = 1 degenerates to sign(v) * mean(|v|).
    sparsify  : zero the floor(rate * d) smallest-magnitude entries, ties
                broken by index order.
    """
    update = np.asarray(update, dtype=np.float64)
    if defense.kind == "none":
        return update.copy()
    if not defense.is_update_level:
        raise ConfigError(f"{defense.kind} is not an update-level defense")
    if defense.kind == "perturb":
        n = float(np.linalg.norm(update))
        out = update * min(1.0, defense.clip_norm / n) if n > 0 else update.copy()
        if defense.noise_std > 0:
            out = out + defense.noise_std * rng.generator().standard_normal(len(out))
        return out
    if defense.kind == "quantize":
        bits = int(defense.bits)
        if bits == 1:
            return np.sign(update) * np.mean(np.abs(update))
        s = float(np.max(np.abs(update)))
        if s == 0.0:
            return np.zeros_like(update)
        levels = np.linspace(-s, s, 2**bits)
        step = 2 * s / (2**bits - 1)
        idx = np.clip(np.round((update + s) / step).astype(int), 0, 2**bits - 1)
        return levels[idx]
    # sparsify
    k = int(math.floor(defense.rate * len(update)))
    out = update.copy()
    if k > 0:
        order = np.argsort(np.abs(update), kind="stable")
        out[order[:k]] = 0.0
    return out


def _local_train(
    spec: ModelSpec,
    params: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    lr: float,
    config: FedConfig,
    geometry: tuple[int, int] | None,
    rng: RngStream,
) -> np.ndarray:
    """Local SGD with data-level defenses woven into the epoch loop."""
    defense = config.defense
    if not defense.is_data_level:
        return mdl.sgd_epochs(spec, params, x, y, lr, config.local_epochs, config.batch_size, rng)
    g = rng.generator()
    w = np.array(params, dtype=np.float64, copy=True)
    n = len(y)
    for _ in range(config.local_epochs):
        if defense.kind in ("sample", "augment_and_sample"):
            take = math.ceil(defense.portion * n)
            pool = g.choice(n, take, replace=False)
        else:
            pool = np.arange(n)
        perm = g.permutation(pool)
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start : start + config.batch_size]
            bx, by = x[batch], y[batch]
            if defense.kind in ("augment", "augment_and_sample"):
                bx = augment_batch(g, bx, geometry, defense.augment_ops)
            if defense.kind == "mixup" and len(batch) >= 2:
                lam = float(g.beta(defense.alpha, defense.alpha))
                partner = g.permutation(len(batch))
                mixed = mix_with_lambda(bx, by, partner, lam)
                grad = lam * mdl.grad_batch(spec, w, mixed.features, mixed.labels_a)
                grad += (1.0 - lam) * mdl.grad_batch(spec, w, mixed.features, mixed.labels_b)
            else:
                grad = mdl.grad_batch(spec, w, bx, by)
            w -= lr * grad
    return w


def client_update(
    spec: ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    global_params: np.ndarray,
    config: FedConfig,
    lr_eff: float,
    rng: RngStream,
    geometry: tuple[int, int] | None = None,
) -> np.ndarray:
    """One client's pre-defense upload: (w_global - w_local_after) / lr_eff.

    With one full-batch epoch and no defense this is exactly the mean
    training gradient at the global model.
    """
    if len(y) == 0:
        raise ConfigError("client has no training samples")
    w_after = _local_train(spec, global_params, x, y, lr_eff, config, geometry, rng)
    return (np.asarray(global_params, dtype=np.float64) - w_after) / lr_eff


def aggregate(
    updates: Sequence[np.ndarray] | np.ndarray,
    global_params: np.ndarray,
    lr_eff: float,
) -> np.ndarray:
    """Server step: w - lr_eff * mean(updates), summed in client-index order."""
    arr = np.asarray(updates, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError("updates must form a (K, d) matrix")
    global_params = np.asarray(global_params, dtype=np.float64)
    if arr.shape[1] != global_params.shape[0]:
        raise ShapeMismatchError(
            f"update dim {arr.shape[1]} != model dim {global_params.shape[0]}"
        )
    return global_params - lr_eff * arr.mean(axis=0)


def run_federation(
    dataset: Dataset,
    partition: Partition,
    spec: ModelSpec,
    config: FedConfig,
) -> UpdateTrace:
    """Run the synchronous loop and record the complete observation trace.

    Per-round utility is the holdout accuracy of the freshly aggregated
    model (NaN when the partition has no holdout). Deterministic in
    ``config.seed`` regardless of client execution order.
    """
    if partition.num_clients != config.num_clients:
        raise ConfigError(
            f"partition has {partition.num_clients} clients, config says {config.num_clients}"
        )
    for k, idx in enumerate(partition.client_indices):
        if len(idx) == 0:
            raise ConfigError(f"client {k} has no training samples")
    root = RngStream(config.seed)
    omega = mdl.init_params(spec, root.derive(TAG_INIT))
    client_arrays = [dataset.arrays(idx) for idx in partition.client_indices]
    have_holdout = len(partition.holdout_indices) > 0
    if have_holdout:
        hx, hy = dataset.arrays(partition.holdout_indices)
    rounds: list[RoundRecord] = []
    accuracy: list[float] = []
    for t in range(config.rounds):
        lr_eff = lr_effective(config, t)
        updates = np.empty((config.num_clients, spec.param_count()))
        for k, (cx, cy) in enumerate(client_arrays):
            upd = client_update(
                spec, cx, cy, omega, config, lr_eff,
                root.derive(TAG_CLIENT, t, k), dataset.geometry,
            )
            if config.defense.is_update_level:
                upd = defend_update(upd, config.defense, root.derive(TAG_DEFENSE, t, k))
            updates[k] = upd
        new_omega = aggregate(updates, omega, lr_eff)
        rounds.append(RoundRecord(t, omega, updates, lr_eff))
        accuracy.append(
            mdl.accuracy(spec, new_omega, hx, hy) if have_holdout else float("nan")
        )
        omega = new_omega
    return UpdateTrace(
        model_spec=spec,
        rounds=rounds,
        final_model=omega,
        round_accuracy=accuracy,
        defense=config.defense,
        seed=config.seed,
    )


# --------------------------------------------------------------------------
# Trace persistence
#
# Directory layout (all arrays raw .npy so reruns are byte-identical):
#   trace_meta.json          round count, dims, model spec, defense, lr
#                            schedule, per-round accuracy, seed
#   round_TTTT_global.npy    (d,)   global model at the start of round T
#   round_TTTT_updates.npy   (K, d) post-defense uploads of round T
#   final_model.npy          (d,)   global model after the last aggregation
# --------------------------------------------------------------------------


def _model_spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "kind": spec.kind,
        "input_dim": spec.input_dim,
        "hidden_dim": spec.hidden_dim,
        "num_classes": spec.num_classes,
        "init_std": spec.init_std,
    }


def _model_spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(**d)


def save_trace(trace: UpdateTrace, trace_dir: str) -> None:
    """Persist a trace; formats documented above."""
    os.makedirs(trace_dir, exist_ok=True)
    meta = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "model": _model_spec_to_dict(trace.model_spec),
        "num_clients": trace.num_clients,
        "num_rounds": trace.num_rounds,
        "dim": trace.dim,
        "seed": trace.seed,
        "defense": trace.defense.to_dict(),
        "lr_effective": [r.lr_effective for r in trace.rounds],
        "round_accuracy": trace.round_accuracy,
    }
    with open(os.path.join(trace_dir, "trace_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for r in trace.rounds:
        np.save(os.path.join(trace_dir, f"round_{r.round_index:04d}_global.npy"), r.global_before)
        np.save(os.path.join(trace_dir, f"round_{r.round_index:04d}_updates.npy"), r.updates)
    np.save(os.path.join(trace_dir, "final_model.npy"), trace.final_model)


def _load_array(path: str, shape: tuple[int, ...]) -> np.ndarray:
    if not os.path.exists(path):
        raise IntegrityError(f"missing trace file: {path}")
    try:
        arr = np.load(path)
    except Exception as exc:
        raise IntegrityError(f"corrupt trace file {path}: {exc}") from exc
    if arr.shape != shape:
        raise IntegrityError(f"trace file {path} has shape {arr.shape}, expected {shape}")
    return arr


def load_trace(trace_dir: str) -> UpdateTrace:
    """Load a persisted trace, verifying presence and shape of every file."""
    meta_path = os.path.join(trace_dir, "trace_meta.json")
    if not os.path.exists(meta_path):
        raise IntegrityError(f"missing trace file: {meta_path}")
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt trace file {meta_path}: {exc}") from exc
    if meta.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise IntegrityError(f"unsupported trace schema: {meta.get('schema_version')}")
    spec = _model_spec_from_dict(meta["model"])
    k, t, d = meta["num_clients"], meta["num_rounds"], meta["dim"]
    if spec.param_count() != d:
        raise IntegrityError(f"model spec implies dim {spec.param_count()}, meta says {d}")
    lr_sched = meta["lr_effective"]
    if len(lr_sched) != t or len(meta["round_accuracy"]) != t:
        raise IntegrityError("lr_effective/round_accuracy length does not match num_rounds")
    rounds = []
    for i in range(t):
        g = _load_array(os.path.join(trace_dir, f"round_{i:04d}_global.npy"), (d,))
        u = _load_array(os.path.join(trace_dir, f"round_{i:04d}_updates.npy"), (k, d))
        rounds.append(RoundRecord(i, g, u, float(lr_sched[i])))
    final = _load_array(os.path.join(trace_dir, "final_model.npy"), (d,))
    return UpdateTrace(
        model_spec=spec,
        rounds=rounds,
        final_model=final,
        round_accuracy=[float(a) for a in meta["round_accuracy"]],
        defense=DefenseConfig.from_dict(meta["defense"]),
        seed=int(meta["seed"]),
    )
