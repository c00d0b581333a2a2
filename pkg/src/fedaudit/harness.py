"""Experiment runner: config parsing, train -> attack -> evaluate, replay.

A run executes, for every (defense sweep value, seed) pair: build the
dataset and partition, train the federation, persist the update trace,
run every configured attack against it, and score the attacks. Artifacts
land in one report directory:

  report_dir/
    report.json                   provenance, per-method Pareto fronts and
                                  hypervolumes, per-run decision-set checks
    metrics.csv                   seed,method,defense,param,auc,tpr_at_fpr,
                                  fpr_cap,achieved_fpr,utility_loss
    runs/<defense>_<param>/seed<seed>/
      trace/                      persisted update trace (see fedsim)
      targets.csv                 sample_id,is_member,label,f1,...,fd (header)
      attack_scores.csv           method,sample_id,is_member_truth,score
      attack_rounds.json          per-round audit scores and series
    plots/                        CSV series emitted by the plots command

Everything except report.json timestamps is a pure function of
(config, seed): rerunning a config produces byte-identical metric CSVs,
and replaying a persisted trace reproduces the inline attack results
bit-exactly.

CLI: ``run <config>``, ``replay <trace_dir> <attack_config>``,
``report <report_dir>``, ``plots <report_dir>`` with ``--out``,
``--seed-override`` and ``--jobs``. Exit codes: 0 ok, 2 config error,
3 integrity error, 4 runtime failure. The ``FEDAUDIT_OUT`` environment
variable supplies the default output root.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import attack as atk
from . import data as dat
from . import fedsim as fed
from . import metrics as met
from . import model as mdl
from .errors import ConfigError, FedAuditError, IntegrityError
from .numstat import RngStream

ENV_OUT = "FEDAUDIT_OUT"
CONFIG_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1

# Harness-level stream tags (fedsim uses 1..3 on the same seed).
TAG_DATA = 10
TAG_PARTITION = 11
TAG_EVAL = 12
TAG_TARGETS = 13

METRICS_HEADER = (
    "seed,method,defense,param,auc,tpr_at_fpr,fpr_cap,achieved_fpr,utility_loss"
)
SCORES_HEADER = "method,sample_id,is_member_truth,score"


def _require_keys(d: dict, path: str, allowed: set[str], required: set[str]) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{path}: missing keys {sorted(missing)}")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int | None = 5
    input_dim: int | None = 16
    per_class: int | None = 130
    class_sep: float | None = 1.0
    csv_path: str | None = None
    geometry: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be synthetic or csv, got {self.kind!r}")
        if self.kind == "synthetic":
            for name in ("num_classes", "input_dim", "per_class", "class_sep"):
                if getattr(self, name) is None:
                    raise ConfigError(f"dataset.{name} is required for synthetic data")
        else:
            if not self.csv_path:
                raise ConfigError("dataset.csv_path is required for csv data")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        _require_keys(
            d, "dataset",
            {"kind", "num_classes", "input_dim", "per_class", "class_sep", "csv_path", "geometry"},
            {"kind"},
        )
        geom = d.get("geometry")
        return cls(
            kind=d["kind"],
            num_classes=d.get("num_classes"),
            input_dim=d.get("input_dim"),
            per_class=d.get("per_class"),
            class_sep=d.get("class_sep"),
            csv_path=d.get("csv_path"),
            geometry=tuple(geom) if geom is not None else None,
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "input_dim": self.input_dim,
            "per_class": self.per_class,
            "class_sep": self.class_sep,
            "csv_path": self.csv_path,
            "geometry": list(self.geometry) if self.geometry is not None else None,
        }


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "iid"
    clients: int = 10
    per_client: int | None = 100
    holdout: int = 200
    beta: float | None = None
    nonmember_source: str = "holdout"
    holdout_fraction: float = 0.1
    others_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("iid", "dirichlet"):
            raise ConfigError(f"partition.kind must be iid or dirichlet, got {self.kind!r}")
        if self.kind == "iid" and self.per_client is None:
            raise ConfigError("partition.per_client is required for iid")
        if self.kind == "dirichlet" and self.beta is None:
            raise ConfigError("partition.beta is required for dirichlet")
        if self.holdout < 1:
            raise ConfigError("partition.holdout must be >= 1 (non-member pool)")
        if self.nonmember_source not in ("holdout", "holdout+others"):
            raise ConfigError(
                f"partition.nonmember_source must be holdout or holdout+others, "
                f"got {self.nonmember_source!r}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionConfig":
        _require_keys(
            d, "partition",
            {"kind", "clients", "per_client", "holdout", "beta", "nonmember_source",
             "holdout_fraction", "others_fraction"},
            {"kind", "clients", "holdout"},
        )
        beta = d.get("beta")
        if isinstance(beta, str):
            if beta != "inf":
                raise ConfigError(f"partition.beta string must be 'inf', got {beta!r}")
            beta = math.inf
        return cls(
            kind=d["kind"],
            clients=d["clients"],
            per_client=d.get("per_client"),
            holdout=d["holdout"],
            beta=beta,
            nonmember_source=d.get("nonmember_source", "holdout"),
            holdout_fraction=d.get("holdout_fraction", 0.1),
            others_fraction=d.get("others_fraction", 0.1),
        )

    def to_dict(self) -> dict:
        beta = self.beta
        if beta is not None and math.isinf(beta):
            beta = "inf"
        return {
            "kind": self.kind,
            "clients": self.clients,
            "per_client": self.per_client,
            "holdout": self.holdout,
            "beta": beta,
            "nonmember_source": self.nonmember_source,
            "holdout_fraction": self.holdout_fraction,
            "others_fraction": self.others_fraction,
        }


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"
    hidden_dim: int = 32
    init_std: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        _require_keys(d, "model", {"kind", "hidden_dim", "init_std"}, {"kind"})
        return cls(
            kind=d["kind"],
            hidden_dim=d.get("hidden_dim", 32 if d["kind"] == "mlp" else 0),
            init_std=d.get("init_std", 0.1),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hidden_dim": self.hidden_dim, "init_std": self.init_std}


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 3
    lr: float = 0.1
    lr_decay: float = 0.99
    batch_size: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "FederationConfig":
        _require_keys(
            d, "federation",
            {"rounds", "local_epochs", "lr", "lr_decay", "batch_size"},
            {"rounds"},
        )
        return cls(
            rounds=d["rounds"],
            local_epochs=d.get("local_epochs", 3),
            lr=d.get("lr", 0.1),
            lr_decay=d.get("lr_decay", 0.99),
            batch_size=d.get("batch_size", 32),
        )

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "batch_size": self.batch_size,
        }


@dataclass(frozen=True)
class AttackSuiteConfig:
    methods: tuple[str, ...] = ("fedmia_ii",)
    delta_grid: tuple[float, ...] = (0.5, 0.7, 0.9)
    fpr_cap: float = 0.01
    target_client: int = 0
    targets_per_class: int = 200
    sigma_floor_rel: float = atk.SIGMA_FLOOR_REL
    leave_one_out: bool = False

    def __post_init__(self) -> None:
        unknown = set(self.methods) - set(atk.ALL_METHODS)
        if unknown:
            raise ConfigError(f"attack.methods: unknown methods {sorted(unknown)}")
        if not self.methods:
            raise ConfigError("attack.methods must not be empty")
        if not (0 <= self.fpr_cap < 1):
            raise ConfigError("attack.fpr_cap must be in [0, 1)")
        if self.targets_per_class < 1:
            raise ConfigError("attack.targets_per_class must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSuiteConfig":
        _require_keys(
            d, "attack",
            {"methods", "delta_grid", "fpr_cap", "target_client", "targets_per_class",
             "sigma_floor_rel", "leave_one_out"},
            {"methods"},
        )
        return cls(
            methods=tuple(d["methods"]),
            delta_grid=tuple(d.get("delta_grid", (0.5, 0.7, 0.9))),
            fpr_cap=d.get("fpr_cap", 0.01),
            target_client=d.get("target_client", 0),
            targets_per_class=d.get("targets_per_class", 200),
            sigma_floor_rel=d.get("sigma_floor_rel", atk.SIGMA_FLOOR_REL),
            leave_one_out=d.get("leave_one_out", False),
        )

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "delta_grid": list(self.delta_grid),
            "fpr_cap": self.fpr_cap,
            "target_client": self.target_client,
            "targets_per_class": self.targets_per_class,
            "sigma_floor_rel": self.sigma_floor_rel,
            "leave_one_out": self.leave_one_out,
        }


_SWEEP_KEYS = {
    "defense", "clip_norm", "noise_std", "bits", "rate", "alpha", "portion",
    "flip_h", "shift", "augment_noise_std",
}


@dataclass(frozen=True)
class SweepConfig:
    """A defense kind with at most one list-valued parameter (the sweep axis)."""

    defense: str = "none"
    params: tuple[tuple[str, object], ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        _require_keys(d, "sweep", _SWEEP_KEYS, {"defense"})
        kind = d["defense"]
        if kind not in fed.DEFENSE_KINDS:
            raise ConfigError(f"sweep.defense: unknown kind {kind!r}")
        params = tuple(sorted((k, v) for k, v in d.items() if k != "defense"))
        axes = [k for k, v in params if isinstance(v, (list, tuple))]
        if len(axes) > 1:
            raise ConfigError(f"sweep: at most one list-valued parameter, got {axes}")
        return cls(defense=kind, params=params)

    def to_dict(self) -> dict:
        out: dict = {"defense": self.defense}
        for k, v in self.params:
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def expand(self) -> list[tuple[object, fed.DefenseConfig]]:
        """(sweep value, DefenseConfig) pairs; value None when nothing varies."""
        params = dict(self.params)
        axis = next((k for k, v in params.items() if isinstance(v, (list, tuple))), None)
        values = list(params[axis]) if axis else [None]
        out = []
        for v in values:
            p = dict(params)
            if axis:
                p[axis] = v
            out.append((v, _defense_from_params(self.defense, p)))
        return out


def _defense_from_params(kind: str, p: dict) -> fed.DefenseConfig:
    ops = None
    if kind in ("augment", "augment_and_sample"):
        ops = dat.AugmentOps(
            flip_h=bool(p.pop("flip_h", False)),
            shift=bool(p.pop("shift", False)),
            noise_std=float(p.pop("augment_noise_std", 0.0)),
        )
    for stray in ("flip_h", "shift", "augment_noise_std"):
        if stray in p:
            raise ConfigError(f"sweep.{stray} only applies to augment defenses")
    if kind == "none" and p:
        raise ConfigError(f"sweep: defense 'none' takes no parameters, got {sorted(p)}")
    allowed = {
        "perturb": {"clip_norm", "noise_std"},
        "quantize": {"bits"},
        "sparsify": {"rate"},
        "mixup": {"alpha"},
        "sample": {"portion"},
        "augment": set(),
        "augment_and_sample": {"portion"},
        "none": set(),
    }[kind]
    unknown = set(p) - allowed
    if unknown:
        raise ConfigError(f"sweep: {sorted(unknown)} not valid for defense {kind!r}")
    return fed.DefenseConfig(kind=kind, augment_ops=ops, **p)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    attack: AttackSuiteConfig = field(default_factory=AttackSuiteConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: tuple[int, ...] = (1,)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        needs_null = set(self.attack.methods) & set(atk.FEDMIA_METHODS)
        if needs_null and self.partition.clients < 3:
            raise ConfigError("fedmia methods need at least 3 clients")
        if not (0 <= self.attack.target_client < self.partition.clients):
            raise ConfigError("attack.target_client out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _require_keys(
            d, "config",
            {"schema_version", "dataset", "partition", "model", "federation",
             "attack", "sweep", "seeds"},
            {"schema_version", "dataset", "partition", "model", "federation",
             "attack", "seeds"},
        )
        if d["schema_version"] != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version must be {CONFIG_SCHEMA_VERSION}, got {d['schema_version']}"
            )
        return cls(
            dataset=DatasetConfig.from_dict(d["dataset"]),
            partition=PartitionConfig.from_dict(d["partition"]),
            model=ModelConfig.from_dict(d["model"]),
            federation=FederationConfig.from_dict(d["federation"]),
            attack=AttackSuiteConfig.from_dict(d["attack"]),
            sweep=SweepConfig.from_dict(d.get("sweep", {"defense": "none"})),
            seeds=tuple(d["seeds"]),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "dataset": self.dataset.to_dict(),
            "partition": self.partition.to_dict(),
            "model": self.model.to_dict(),
            "federation": self.federation.to_dict(),
            "attack": self.attack.to_dict(),
            "sweep": self.sweep.to_dict(),
            "seeds": list(self.seeds),
        }


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def config_hash(config: ExperimentConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Building experiment inputs
# --------------------------------------------------------------------------


def build_dataset(config: ExperimentConfig, seed: int) -> dat.Dataset:
    dc = config.dataset
    if dc.kind == "csv":
        return dat.load_csv(dc.csv_path, dc.num_classes, dc.geometry)
    rng = RngStream(seed).derive(TAG_DATA)
    ds = dat.synth_blobs(rng, dc.num_classes, dc.input_dim, dc.per_class, dc.class_sep)
    if dc.geometry is not None:
        ds = dat.Dataset(ds.features, ds.labels, ds.num_classes, dc.geometry)
    return ds


def build_partition(config: ExperimentConfig, dataset: dat.Dataset, seed: int) -> dat.Partition:
    pc = config.partition
    rng = RngStream(seed).derive(TAG_PARTITION)
    if pc.kind == "iid":
        return dat.partition_iid(rng, dataset, pc.clients, pc.per_client, pc.holdout)
    return dat.partition_dirichlet(rng, dataset, pc.clients, pc.beta, pc.holdout)


@dataclass(frozen=True, eq=False)
class TargetCohort:
    """The scored records: features, labels, dataset ids, membership truth."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    is_member: np.ndarray


def select_targets(
    config: ExperimentConfig, dataset: dat.Dataset, partition: dat.Partition, seed: int
) -> TargetCohort:
    """Equal-size member/non-member cohorts, capped by pool availability."""
    pc, ac = config.partition, config.attack
    pools = dat.make_eval_split(
        RngStream(seed).derive(TAG_EVAL),
        partition,
        ac.target_client,
        pc.nonmember_source,
        pc.holdout_fraction,
        pc.others_fraction,
    )
    if len(pools.nonmember_indices) == 0:
        raise ConfigError("non-member pool is empty; increase partition.holdout")
    g = RngStream(seed).derive(TAG_TARGETS).generator()
    n = min(ac.targets_per_class, len(pools.member_indices), len(pools.nonmember_indices))
    mem = np.sort(g.choice(pools.member_indices, n, replace=False))
    non = np.sort(g.choice(pools.nonmember_indices, n, replace=False))
    ids = np.concatenate([mem, non])
    x, y = dataset.arrays(ids)
    is_member = np.concatenate([np.ones(n, dtype=bool), np.zeros(n, dtype=bool)])
    return TargetCohort(x, y, ids, is_member)


# --------------------------------------------------------------------------
# Attacks against one trace
# --------------------------------------------------------------------------


def run_attacks(
    trace: fed.UpdateTrace,
    cohort: TargetCohort,
    ac: AttackSuiteConfig,
) -> tuple[dict[str, dict[int, float]], dict]:
    """All configured attacks; returns scores per method and the audit sidecar."""
    ids = [int(i) for i in cohort.ids]
    scores: dict[str, dict[int, float]] = {}
    sidecar: dict = {
        "sample_ids": ids,
        "is_member": [bool(b) for b in cohort.is_member],
        "delta_grid": list(ac.delta_grid),
        "inclusion_checks": {},
    }
    for method in ac.methods:
        if method in atk.FEDMIA_METHODS:
            variant = "I" if method == "fedmia_i" else "II"
            ms = atk.fedmia_scores(
                trace, cohort.x, cohort.y, ids, ac.target_client, variant,
                sigma_floor_rel=ac.sigma_floor_rel, leave_one_out=ac.leave_one_out,
            )
            scores[method] = {sid: ms[sid].aggregate for sid in ids}
            sidecar[method] = {"per_round": [ms[sid].per_round.tolist() for sid in ids]}
            checks = {}
            for delta in ac.delta_grid:
                ds_ = atk.decision_sets(ms, delta)
                checks[repr(float(delta))] = atk.check_aggregate_inclusion(ds_)
            sidecar["inclusion_checks"][method] = checks
    base_methods = [m for m in ac.methods if m in atk.BASELINE_METHODS]
    if base_methods:
        targets = [mdl.LabeledSample(cohort.x[i], int(cohort.y[i])) for i in range(len(ids))]
        base = atk.baselines(trace, targets, ac.target_client, ids, base_methods)
        scores.update(base)
    sidecar["series"] = _audit_series(trace, cohort, ac)
    return {m: scores[m] for m in ac.methods}, sidecar


def _audit_series(trace: fed.UpdateTrace, cohort: TargetCohort, ac: AttackSuiteConfig) -> dict:
    """Per-round raw series needed to draw attack-strength-vs-round curves."""
    series: dict = {}
    methods = set(ac.methods)
    if methods & {"blackbox_loss", "loss_series"}:
        losses = np.stack(
            [mdl.loss_many(trace.model_spec, r.global_before, cohort.x, cohort.y)
             for r in trace.rounds], axis=1,
        )
        series["loss_global"] = losses.tolist()
    if methods & {"grad_cosine", "avg_cosine"}:
        cos = atk.measure_cohort(trace, cohort.x, cohort.y, "cosine")[:, :, ac.target_client]
        series["cosine_target"] = cos.tolist()
    if "grad_diff" in methods:
        gd = atk.measure_cohort(trace, cohort.x, cohort.y, "grad_diff")[:, :, ac.target_client]
        series["grad_diff_target"] = gd.tolist()
    if "grad_norm" in methods:
        norms = [float(np.linalg.norm(r.updates[ac.target_client])) for r in trace.rounds]
        series["update_norm_target"] = norms
    return series


def _fmt(x: float) -> str:
    return repr(float(x))


def _param_label(value: object) -> str:
    if value is None:
        return ""
    return _fmt(value) if isinstance(value, float) else str(value)


def _write_targets_csv(path: str, dataset_dim: int, cohort: TargetCohort) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "is_member", "label"] + [f"f{i+1}" for i in range(dataset_dim)])
        for i, sid in enumerate(cohort.ids):
            row = [int(sid), int(cohort.is_member[i]), int(cohort.y[i])]
            row += [_fmt(v) for v in cohort.x[i]]
            w.writerow(row)


def load_targets_csv(path: str) -> TargetCohort:
    if not os.path.exists(path):
        raise IntegrityError(f"missing targets file: {path}")
    ids, members, labels, feats = [], [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["sample_id", "is_member", "label"]:
            raise IntegrityError(f"corrupt targets file {path}: bad header")
        for row in reader:
            ids.append(int(row[0]))
            members.append(bool(int(row[1])))
            labels.append(int(row[2]))
            feats.append([float(v) for v in row[3:]])
    if not ids:
        raise IntegrityError(f"corrupt targets file {path}: no rows")
    return TargetCohort(
        np.array(feats), np.array(labels, dtype=np.int64),
        np.array(ids, dtype=np.int64), np.array(members, dtype=bool),
    )


def _write_scores_csv(path: str, cohort: TargetCohort, scores: dict[str, dict[int, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SCORES_HEADER + "\n")
        truth = dict(zip((int(i) for i in cohort.ids), cohort.is_member))
        for method, per_id in scores.items():
            for sid in cohort.ids:
                sid = int(sid)
                fh.write(f"{method},{sid},{int(truth[sid])},{_fmt(per_id[sid])}\n")


def _metric_rows(
    seed: int,
    defense_kind: str,
    param: object,
    utility_loss: float,
    cohort: TargetCohort,
    scores: dict[str, dict[int, float]],
    ac: AttackSuiteConfig,
) -> list[dict]:
    rows = []
    for method, per_id in scores.items():
        arr = np.array([per_id[int(sid)] for sid in cohort.ids])
        sc = met.ScoredCohort(arr, cohort.is_member)
        tpr, achieved = met.operating_point(sc, ac.fpr_cap)
        rows.append(
            {
                "seed": seed,
                "method": method,
                "defense": defense_kind,
                "param": _param_label(param),
                "auc": met.auc(sc),
                "tpr_at_fpr": tpr,
                "fpr_cap": ac.fpr_cap,
                "achieved_fpr": achieved,
                "utility_loss": utility_loss,
            }
        )
    return rows


def run_single(
    config: ExperimentConfig,
    defense: fed.DefenseConfig,
    param: object,
    seed: int,
    run_dir: str,
) -> tuple[list[dict], dict]:
    """One (defense, seed) job: train, persist, attack, score."""
    dataset = build_dataset(config, seed)
    partition = build_partition(config, dataset, seed)
    spec = mdl.ModelSpec(
        kind=config.model.kind,
        input_dim=dataset.input_dim,
        hidden_dim=config.model.hidden_dim if config.model.kind == "mlp" else 0,
        num_classes=dataset.num_classes,
        init_std=config.model.init_std,
    )
    fc = config.federation
    fed_config = fed.FedConfig(
        num_clients=config.partition.clients,
        rounds=fc.rounds,
        local_epochs=fc.local_epochs,
        lr=fc.lr,
        lr_decay=fc.lr_decay,
        batch_size=fc.batch_size,
        defense=defense,
        seed=seed,
    )
    cohort = select_targets(config, dataset, partition, seed)
    trace = fed.run_federation(dataset, partition, spec, fed_config)

    os.makedirs(run_dir, exist_ok=True)
    fed.save_trace(trace, os.path.join(run_dir, "trace"))
    _write_targets_csv(os.path.join(run_dir, "targets.csv"), dataset.input_dim, cohort)

    scores, sidecar = run_attacks(trace, cohort, config.attack)
    _write_scores_csv(os.path.join(run_dir, "attack_scores.csv"), cohort, scores)
    with open(os.path.join(run_dir, "attack_rounds.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)
        fh.write("\n")

    utility_loss = 1.0 - trace.round_accuracy[-1]
    rows = _metric_rows(seed, defense.kind, param, utility_loss, cohort, scores, config.attack)
    return rows, sidecar.get("inclusion_checks", {})


def _job(args: tuple) -> tuple[list[dict], dict]:
    return run_single(*args)


def run_experiment(
    config: ExperimentConfig,
    out_dir: str,
    seed_override: int | None = None,
    jobs: int = 1,
) -> str:
    """Execute the full sweep x seeds grid and write the report directory."""
    seeds = (seed_override,) if seed_override is not None else config.seeds
    points = config.sweep.expand()
    os.makedirs(out_dir, exist_ok=True)

    job_args = []
    for value, defense in points:
        label = f"{defense.kind}_{_param_label(value)}" if value is not None else defense.kind
        for seed in seeds:
            run_dir = os.path.join(out_dir, "runs", label, f"seed{seed}")
            job_args.append((config, defense, value, seed, run_dir))

    results: list[tuple[list[dict], dict]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, job_args))
    else:
        results = [_job(a) for a in job_args]

    all_rows: list[dict] = []
    inclusion: dict = {}
    for (cfg, defense, value, seed, _run_dir), (rows, checks) in zip(job_args, results):
        all_rows.extend(rows)
        if checks:
            key = f"{defense.kind}:{_param_label(value)}:seed{seed}"
            inclusion[key] = checks

    _write_metrics_csv(os.path.join(out_dir, "metrics.csv"), all_rows)
    report = _build_report(config, all_rows, inclusion)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def _write_metrics_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r['seed']},{r['method']},{r['defense']},{r['param']},"
                f"{_fmt(r['auc'])},{_fmt(r['tpr_at_fpr'])},{_fmt(r['fpr_cap'])},"
                f"{_fmt(r['achieved_fpr'])},{_fmt(r['utility_loss'])}\n"
            )


def _build_report(config: ExperimentConfig, rows: list[dict], inclusion: dict) -> dict:
    per_method: dict = {}
    for method in config.attack.methods:
        m_rows = [r for r in rows if r["method"] == method]
        points = []
        seen = []
        for r in m_rows:
            key = (r["defense"], r["param"])
            if key not in seen:
                seen.append(key)
        for defense, param in seen:
            grp = [r for r in m_rows if (r["defense"], r["param"]) == (defense, param)]
            points.append(
                {
                    "defense": defense,
                    "param": param,
                    "mean_auc": float(np.mean([g["auc"] for g in grp])),
                    "mean_tpr_at_fpr": float(np.mean([g["tpr_at_fpr"] for g in grp])),
                    "mean_utility_loss": float(np.mean([g["utility_loss"] for g in grp])),
                }
            )
        coords = [
            (min(1.0, max(0.0, p["mean_utility_loss"])), p["mean_tpr_at_fpr"]) for p in points
        ]
        front = met.pareto_front(coords)
        per_method[method] = {
            "points": points,
            "pareto_front": [[p.utility_loss, p.privacy_leakage] for p in front],
            "hypervolume": met.hypervolume(coords),
        }
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "code_version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "fpr_cap": config.attack.fpr_cap,
        "inclusion_checks": inclusion,
        "per_method": per_method,
    }


# --------------------------------------------------------------------------
# Replay
# --------------------------------------------------------------------------


def replay_attack(trace_dir: str, ac: AttackSuiteConfig, out_dir: str | None = None) -> list[dict]:
    """Re-run attacks on a persisted trace; equals the inline results bit-exactly."""
    trace = fed.load_trace(trace_dir)
    cohort = load_targets_csv(os.path.join(os.path.dirname(trace_dir.rstrip("/")), "targets.csv"))
    scores, sidecar = run_attacks(trace, cohort, ac)
    utility_loss = 1.0 - trace.round_accuracy[-1]
    rows = _metric_rows(trace.seed, trace.defense.kind, None, utility_loss, cohort, scores, ac)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_scores_csv(os.path.join(out_dir, "attack_scores.csv"), cohort, scores)
        with open(os.path.join(out_dir, "attack_rounds.json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh)
            fh.write("\n")
        _write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return rows


# --------------------------------------------------------------------------
# Plot data
# --------------------------------------------------------------------------


def _read_metrics_csv(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise IntegrityError(f"missing metrics file: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _prefix_scores_for_round(method: str, sidecar: dict, t: int) -> np.ndarray:
    """Cohort scores for one method using only the first t+1 rounds."""
    if method in atk.FEDMIA_METHODS:
        pr = np.array(sidecar[method]["per_round"])
        return pr[:, : t + 1].mean(axis=1)
    series = sidecar["series"]
    if method == "blackbox_loss":
        return -np.array(series["loss_global"])[:, t]
    if method == "loss_series":
        return -np.array(series["loss_global"])[:, : t + 1].mean(axis=1)
    if method == "grad_cosine":
        return np.array(series["cosine_target"])[:, t]
    if method == "avg_cosine":
        return np.array(series["cosine_target"])[:, : t + 1].mean(axis=1)
    if method == "grad_diff":
        return np.array(series["grad_diff_target"])[:, : t + 1].mean(axis=1)
    if method == "grad_norm":
        n = len(sidecar["sample_ids"])
        return np.full(n, -series["update_norm_target"][t])
    raise ConfigError(f"unknown method {method!r}")


def emit_plots(report_dir: str) -> str:
    """Write plot-ready CSV series (histograms, round curves, Pareto fronts)."""
    report_path = os.path.join(report_dir, "report.json")
    if not os.path.exists(report_path):
        raise IntegrityError(f"missing report file: {report_path}")
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    config = ExperimentConfig.from_dict(report["config"])
    plots_dir = os.path.join(report_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)

    points = config.sweep.expand()
    seeds = config.seeds
    for value, defense in points:
        label = f"{defense.kind}_{_param_label(value)}" if value is not None else defense.kind
        per_seed_scores: dict[str, list[np.ndarray]] = {m: [] for m in config.attack.methods}
        members: list[np.ndarray] = []
        sidecars = []
        for seed in seeds:
            run_dir = os.path.join(report_dir, "runs", label, f"seed{seed}")
            spath = os.path.join(run_dir, "attack_scores.csv")
            if not os.path.exists(spath):
                raise IntegrityError(f"missing run artifact: {spath}")
            by_method: dict[str, list[tuple[int, float]]] = {}
            mem: dict[int, bool] = {}
            with open(spath, "r", encoding="utf-8", newline="") as fh:
                for row in csv.DictReader(fh):
                    sid = int(row["sample_id"])
                    by_method.setdefault(row["method"], []).append((sid, float(row["score"])))
                    mem[sid] = bool(int(row["is_member_truth"]))
            for m, pairs in by_method.items():
                per_seed_scores[m].append(np.array([s for _, s in pairs]))
            members.append(np.array([mem[sid] for sid, _ in by_method[config.attack.methods[0]]]))
            with open(os.path.join(run_dir, "attack_rounds.json"), "r", encoding="utf-8") as fh:
                sidecars.append(json.load(fh))

        # Score histograms: one row per (bin, class).
        for method in config.attack.methods:
            scores = np.concatenate(per_seed_scores[method])
            is_mem = np.concatenate(members)
            lo, hi = float(scores.min()), float(scores.max())
            if lo == hi:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, 21)
            with open(
                os.path.join(plots_dir, f"hist_{method}_{label}.csv"), "w",
                encoding="utf-8", newline="",
            ) as fh:
                fh.write("bin_lo,bin_hi,cls,count\n")
                for cls, mask in (("member", is_mem), ("nonmember", ~is_mem)):
                    counts, _ = np.histogram(scores[mask], bins=edges)
                    for i, c in enumerate(counts):
                        fh.write(f"{_fmt(edges[i])},{_fmt(edges[i+1])},{cls},{int(c)}\n")

        # Attack strength vs communication round (seed-mean AUC / TPR).
        num_rounds = config.federation.rounds
        with open(
            os.path.join(plots_dir, f"rounds_{label}.csv"), "w", encoding="utf-8", newline=""
        ) as fh:
            fh.write("method,round,auc,tpr_at_fpr\n")
            for method in config.attack.methods:
                for t in range(num_rounds):
                    aucs, tprs = [], []
                    for si, sidecar in enumerate(sidecars):
                        arr = _prefix_scores_for_round(method, sidecar, t)
                        sc = met.ScoredCohort(arr, np.array(sidecar["is_member"], dtype=bool))
                        aucs.append(met.auc(sc))
                        tprs.append(met.tpr_at_fpr(sc, config.attack.fpr_cap))
                    fh.write(
                        f"{method},{t},{_fmt(float(np.mean(aucs)))},{_fmt(float(np.mean(tprs)))}\n"
                    )

    # Pareto fronts per method, sorted by utility loss.
    for method, block in report["per_method"].items():
        with open(
            os.path.join(plots_dir, f"pareto_{method}.csv"), "w", encoding="utf-8", newline=""
        ) as fh:
            fh.write("utility_loss,privacy_leakage\n")
            for u, leak in block["pareto_front"]:
                fh.write(f"{_fmt(u)},{_fmt(leak)}\n")
    return plots_dir


# --------------------------------------------------------------------------
# Report summary
# --------------------------------------------------------------------------


def summarize_report(report_dir: str) -> str:
    """Human-readable summary of a report directory."""
    rows = _read_metrics_csv(os.path.join(report_dir, "metrics.csv"))
    report_path = os.path.join(report_dir, "report.json")
    hv_lines = []
    if os.path.exists(report_path):
        with open(report_path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
        checks = [
            ok for per_method in report.get("inclusion_checks", {}).values()
            for per_delta in per_method.values() for ok in per_delta.values()
        ]
        if checks:
            hv_lines.append(
                f"aggregate-decision inclusion checks: {sum(checks)}/{len(checks)} passed"
            )
        for method, block in sorted(report.get("per_method", {}).items()):
            hv_lines.append(f"hypervolume[{method}] = {block['hypervolume']:.4f}")
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["defense"], r["param"], r["method"]), []).append(r)
    lines = [f"{'defense':<20}{'param':<10}{'method':<16}{'auc':>8}{'tpr':>8}{'util_loss':>11}"]
    for (defense, param, method), grp in sorted(groups.items()):
        mean = lambda k: float(np.mean([float(g[k]) for g in grp]))  # noqa: E731
        lines.append(
            f"{defense:<20}{param:<10}{method:<16}"
            f"{mean('auc'):>8.3f}{mean('tpr_at_fpr'):>8.3f}{mean('utility_loss'):>11.3f}"
        )
    return "\n".join(lines + hv_lines)


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------


def _default_out() -> str:
    return os.environ.get(ENV_OUT, "fedaudit_out")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedaudit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a full experiment from a config file")
    run.add_argument("config")
    run.add_argument("--out", default=None, help=f"output dir (default ${ENV_OUT} or ./fedaudit_out)")
    run.add_argument("--seed-override", type=int, default=None)
    run.add_argument("--jobs", type=int, default=1)

    rp = sub.add_parser("replay", help="re-run attacks against a persisted trace")
    rp.add_argument("trace_dir")
    rp.add_argument("attack_config")
    rp.add_argument("--out", default=None)

    rep = sub.add_parser("report", help="summarize a report directory")
    rep.add_argument("report_dir")

    pl = sub.add_parser("plots", help="emit plot-ready CSV series for a report")
    pl.add_argument("report_dir")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config)
            out = args.out or _default_out()
            run_experiment(config, out, args.seed_override, args.jobs)
            print(f"report written to {out}")
        elif args.command == "replay":
            try:
                with open(args.attack_config, "r", encoding="utf-8") as fh:
                    ac = AttackSuiteConfig.from_dict(json.load(fh))
            except FileNotFoundError:
                raise ConfigError(f"attack config not found: {args.attack_config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid attack config: {exc}") from exc
            rows = replay_attack(args.trace_dir, ac, args.out)
            for r in rows:
                print(
                    f"{r['method']}: auc={r['auc']:.4f} "
                    f"tpr@fpr<={r['fpr_cap']}: {r['tpr_at_fpr']:.4f}"
                )
        elif args.command == "report":
            print(summarize_report(args.report_dir))
        elif args.command == "plots":
            out = emit_plots(args.report_dir)
            print(f"plot data written to {out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 3
    except FedAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0
