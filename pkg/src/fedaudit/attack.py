"""Membership inference against a recorded federation trace.

The main attack scores a target record in three steps, per round:

  1. Reduce each client's high-dimensional upload to a scalar measurement
     conditioned on the target record — by default the cosine between the
     upload and the record's gradient at that round's global model
     (variant II), or the record's loss under the client's reconstructed
     post-training model (variant I).

  2. Estimate the null distribution of that measurement from the
     non-target clients: take the population mean/std over all K-1
     non-target values, drop values beyond three standard deviations on
     the member side (they may themselves be contaminated), and fit a
     Gaussian to the survivors. Because client datasets are disjoint, at
     least K-2 of those values are guaranteed clean.

  3. Score the target client's measurement by its one-sided Gaussian tail
     probability under that null, then average the per-round scores over
     all recorded rounds.

A record is declared a member when the aggregate score exceeds a
threshold. Any record flagged by the aggregate score is necessarily
flagged by at least one single-round score at the same threshold (the
aggregate is a mean); ``check_aggregate_inclusion`` verifies this on
concrete decision sets.

Six single-signal attacks against the same trace are provided for
comparison, every score oriented so that higher means member.

With K - 1 = n non-target values the standardized deviation of a single
outlier is at most (n - 1) / sqrt(n), which stays below 3 for n <= 10: at
the common 10-client setting the 3-sigma filter removes nothing. The rule
is implemented verbatim anyway, and a leave-one-out variant is available
behind a flag for larger cohorts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model as mdl
from .errors import (
    ConfigError,
    ContractError,
    EmptySampleError,
    InsufficientClientsError,
    ZeroVectorError,
)
from .fedsim import UpdateTrace
from .model import LabeledSample
from .numstat import gaussian_cdf, summary

MEASUREMENT_KINDS = ("cosine", "loss", "grad_norm", "grad_diff")
ORIENTATIONS = ("member_high", "member_low")

# Which side of the null a member lands on, per measurement.
DEFAULT_ORIENTATION = {
    "cosine": "member_high",
    "loss": "member_low",
    "grad_norm": "member_low",
    "grad_diff": "member_high",
}

BASELINE_METHODS = (
    "blackbox_loss",
    "grad_cosine",
    "grad_norm",
    "loss_series",
    "avg_cosine",
    "grad_diff",
)
FEDMIA_METHODS = ("fedmia_i", "fedmia_ii")
ALL_METHODS = FEDMIA_METHODS + BASELINE_METHODS

# Relative floor applied to the null variance before the tail integral;
# absorbs rounds where every kept measurement is identical.
SIGMA_FLOOR_REL = 1e-8


@dataclass(frozen=True)
class Measurement:
    """A measurement kind plus the tail direction members fall on."""

    kind: str
    orientation: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in MEASUREMENT_KINDS:
            raise ConfigError(f"unknown measurement kind {self.kind!r}")
        if self.orientation is not None and self.orientation not in ORIENTATIONS:
            raise ConfigError(f"unknown orientation {self.orientation!r}")

    @property
    def resolved_orientation(self) -> str:
        return self.orientation or DEFAULT_ORIENTATION[self.kind]


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    """Per-(round, client) measurements for one target record."""

    sample_id: int
    target_client: int
    values: np.ndarray  # (T, K)


@dataclass(frozen=True)
class RoundOutDistribution:
    """Gaussian null fitted to the filtered non-target measurements."""

    round_index: int
    kept_clients: tuple[int, ...]
    mu_out: float
    v_out: float


@dataclass(frozen=True, eq=False)
class MembershipScore:
    """Per-round tail probabilities and their mean for one target record."""

    per_round: np.ndarray  # (T,) values in [0, 1]
    aggregate: float


@dataclass(frozen=True)
class DecisionSets:
    """Members called at threshold delta, per round and by the aggregate score."""

    delta: float
    per_round: tuple[frozenset, ...]
    aggregate: frozenset


def measure_cohort(
    trace: UpdateTrace,
    x: np.ndarray,
    y: np.ndarray,
    kind: str,
) -> np.ndarray:
    """Measurements for a whole cohort at once, shape (n, T, K).

    cosine     : cos(update_k_t, grad of record at that round's global model)
    loss       : record loss under client k's reconstructed local model
                 (global_t - lr_eff_t * update_k_t)
    grad_norm  : ||update_k_t||, identical for every record
    grad_diff  : raw inner product <update_k_t, grad of record>

    A zero record gradient (stationary point) raises ZeroVectorError; a
    zero-norm defended upload yields cosine 0 (uninformative direction).
    """
    if kind not in MEASUREMENT_KINDS:
        raise ConfigError(f"unknown measurement kind {kind!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    spec = trace.model_spec
    out = np.empty((n, trace.num_rounds, trace.num_clients))
    for t, rec in enumerate(trace.rounds):
        updates = rec.updates
        if kind == "grad_norm":
            out[:, t, :] = np.linalg.norm(updates, axis=1)[None, :]
            continue
        if kind == "loss":
            for k in range(trace.num_clients):
                local = rec.global_before - rec.lr_effective * updates[k]
                out[:, t, k] = mdl.loss_many(spec, local, x, y)
            continue
        grads = mdl.grad_samples(spec, rec.global_before, x, y)
        dots = grads @ updates.T
        if kind == "grad_diff":
            out[:, t, :] = dots
            continue
        gnorm = np.linalg.norm(grads, axis=1)
        if np.any(gnorm == 0.0):
            raise ZeroVectorError(
                "target record has zero gradient at a recorded model (stationary point)"
            )
        unorm = np.linalg.norm(updates, axis=1)
        cos = np.zeros_like(dots)
        nz = unorm > 0.0
        cos[:, nz] = dots[:, nz] / (gnorm[:, None] * unorm[None, nz])
        out[:, t, :] = cos
    return out


def measure(
    trace: UpdateTrace,
    target: LabeledSample,
    measurement: Measurement | str,
    sample_id: int = 0,
    target_client: int = 0,
) -> MeasurementMatrix:
    """Measurement matrix M[t][k] for a single target record."""
    kind = measurement.kind if isinstance(measurement, Measurement) else measurement
    values = measure_cohort(trace, target.x[None, :], np.array([target.y]), kind)[0]
    return MeasurementMatrix(sample_id, target_client, values)


def _round_out(
    values: np.ndarray,
    target_client: int,
    orientation: str,
    round_index: int,
    leave_one_out: bool = False,
) -> RoundOutDistribution:
    """Fit the null to the non-target values of one round (the 3-sigma step)."""
    k = len(values)
    if k < 3:
        raise InsufficientClientsError(
            f"need at least 3 clients for a null estimate, got {k}"
        )
    others = np.delete(np.arange(k), target_client)
    vals = values[others]
    if leave_one_out:
        keep_mask = np.ones(len(vals), dtype=bool)
        for j in range(len(vals)):
            rest = np.delete(vals, j)
            st = summary(rest)
            bound = 3.0 * np.sqrt(st.variance)
            if orientation == "member_high":
                keep_mask[j] = vals[j] <= st.mean + bound
            else:
                keep_mask[j] = vals[j] >= st.mean - bound
        if not keep_mask.any():
            keep_mask[:] = True
    else:
        st = summary(vals)
        bound = 3.0 * np.sqrt(st.variance)
        if orientation == "member_high":
            keep_mask = vals <= st.mean + bound
        else:
            keep_mask = vals >= st.mean - bound
    kept = others[keep_mask]
    st_out = summary(values[kept])
    return RoundOutDistribution(round_index, tuple(int(c) for c in kept), st_out.mean, st_out.variance)


def estimate_out(
    matrix: MeasurementMatrix,
    round_index: int,
    orientation: str,
    leave_one_out: bool = False,
) -> RoundOutDistribution:
    """Null distribution for one round of a target's measurement matrix."""
    if orientation not in ORIENTATIONS:
        raise ConfigError(f"unknown orientation {orientation!r}")
    return _round_out(
        matrix.values[round_index],
        matrix.target_client,
        orientation,
        round_index,
        leave_one_out,
    )


def score_round(
    m_target: float,
    out: RoundOutDistribution,
    orientation: str,
    sigma_floor_rel: float = SIGMA_FLOOR_REL,
) -> float:
    """One-sided Gaussian tail probability of the target measurement.

    member_high scores P(X <= m) under the null, member_low the mirror
    P(X >= m). The variance is floored at (sigma_floor_rel*(1+|mu|))^2 so
    a collapsed null still yields a well-defined score.
    """
    floor = sigma_floor_rel * (1.0 + abs(out.mu_out))
    v = max(out.v_out, floor * floor)
    p = gaussian_cdf(float(m_target), out.mu_out, v)
    return p if orientation == "member_high" else 1.0 - p


def score_temporal(per_round: Sequence[float] | np.ndarray) -> float:
    """Mean of the per-round scores (the aggregate membership score)."""
    arr = np.asarray(per_round, dtype=np.float64)
    if arr.size == 0:
        raise EmptySampleError("no per-round scores to aggregate")
    return float(arr.mean())


def fedmia_scores(
    trace: UpdateTrace,
    x: np.ndarray,
    y: np.ndarray,
    sample_ids: Sequence[int],
    target_client: int,
    variant: str = "II",
    orientation: str | None = None,
    sigma_floor_rel: float = SIGMA_FLOOR_REL,
    leave_one_out: bool = False,
) -> dict[int, MembershipScore]:
    """Steps 1-3 for a cohort of target records.

    Variant I measures per-client loss (members score on the low tail),
    variant II measures update/gradient cosine (high tail).
    """
    if variant not in ("I", "II"):
        raise ConfigError(f"unknown variant {variant!r}; expected 'I' or 'II'")
    if not (0 <= target_client < trace.num_clients):
        raise ConfigError(f"target_client {target_client} out of range")
    kind = "loss" if variant == "I" else "cosine"
    orient = orientation or DEFAULT_ORIENTATION[kind]
    values = measure_cohort(trace, x, y, kind)  # (n, T, K)
    scores: dict[int, MembershipScore] = {}
    for i, sid in enumerate(sample_ids):
        per_round = np.empty(trace.num_rounds)
        for t in range(trace.num_rounds):
            out = _round_out(values[i, t], target_client, orient, t, leave_one_out)
            per_round[t] = score_round(values[i, t, target_client], out, orient, sigma_floor_rel)
        scores[int(sid)] = MembershipScore(per_round, score_temporal(per_round))
    return scores


def decision_sets(scores: Mapping[int, MembershipScore], delta: float) -> DecisionSets:
    """Members called at threshold delta (strict: score > delta)."""
    ids = list(scores)
    num_rounds = len(next(iter(scores.values())).per_round) if scores else 0
    per_round = tuple(
        frozenset(sid for sid in ids if scores[sid].per_round[t] > delta)
        for t in range(num_rounds)
    )
    aggregate = frozenset(sid for sid in ids if scores[sid].aggregate > delta)
    return DecisionSets(float(delta), per_round, aggregate)


def fedmia(
    trace: UpdateTrace,
    targets: Sequence[LabeledSample],
    target_client: int,
    variant: str = "II",
    delta: float = 0.5,
    sample_ids: Sequence[int] | None = None,
    sigma_floor_rel: float = SIGMA_FLOOR_REL,
    leave_one_out: bool = False,
) -> tuple[dict[int, MembershipScore], DecisionSets]:
    """Score every target record and form decision sets at one threshold."""
    if len(targets) == 0:
        raise EmptySampleError("no target records")
    ids = list(sample_ids) if sample_ids is not None else list(range(len(targets)))
    x = np.stack([t.x for t in targets])
    y = np.array([t.y for t in targets])
    scores = fedmia_scores(
        trace, x, y, ids, target_client, variant,
        sigma_floor_rel=sigma_floor_rel, leave_one_out=leave_one_out,
    )
    return scores, decision_sets(scores, delta)


def baselines(
    trace: UpdateTrace,
    targets: Sequence[LabeledSample],
    target_client: int,
    sample_ids: Sequence[int] | None = None,
    methods: Iterable[str] = BASELINE_METHODS,
) -> dict[str, dict[int, float]]:
    """Single-signal attack scores, each oriented so higher means member.

    blackbox_loss : -loss under the final global model
    grad_cosine   : final-round cosine measurement of the target client
    grad_norm     : -||final-round target update|| (record-independent)
    loss_series   : -mean over rounds of the loss under each global model
    avg_cosine    : mean over rounds of the target-client cosine
    grad_diff     : mean over rounds of the raw inner product
    """
    methods = list(methods)
    unknown = set(methods) - set(BASELINE_METHODS)
    if unknown:
        raise ConfigError(f"unknown baseline methods: {sorted(unknown)}")
    if len(targets) == 0:
        raise EmptySampleError("no target records")
    ids = list(sample_ids) if sample_ids is not None else list(range(len(targets)))
    x = np.stack([t.x for t in targets])
    y = np.array([t.y for t in targets])
    spec = trace.model_spec
    results: dict[str, dict[int, float]] = {}

    need_cos = any(m in methods for m in ("grad_cosine", "avg_cosine"))
    cos = measure_cohort(trace, x, y, "cosine")[:, :, target_client] if need_cos else None
    if "blackbox_loss" in methods:
        vals = -mdl.loss_many(spec, trace.final_model, x, y)
        results["blackbox_loss"] = dict(zip(ids, vals.tolist()))
    if "grad_cosine" in methods:
        results["grad_cosine"] = dict(zip(ids, cos[:, -1].tolist()))
    if "avg_cosine" in methods:
        results["avg_cosine"] = dict(zip(ids, cos.mean(axis=1).tolist()))
    if "grad_norm" in methods:
        n = -float(np.linalg.norm(trace.rounds[-1].updates[target_client]))
        results["grad_norm"] = {sid: n for sid in ids}
    if "loss_series" in methods:
        per_round = np.stack(
            [mdl.loss_many(spec, rec.global_before, x, y) for rec in trace.rounds], axis=1
        )
        results["loss_series"] = dict(zip(ids, (-per_round.mean(axis=1)).tolist()))
    if "grad_diff" in methods:
        gd = measure_cohort(trace, x, y, "grad_diff")[:, :, target_client]
        results["grad_diff"] = dict(zip(ids, gd.mean(axis=1).tolist()))
    return {m: results[m] for m in methods}


def check_aggregate_inclusion(sets: DecisionSets, aggregate_from: DecisionSets | None = None) -> bool:
    """True iff every aggregate-flagged record is flagged in some round.

    When ``aggregate_from`` is given, its aggregate set is checked against
    ``sets``' per-round sets; both must share the same threshold.
    """
    if aggregate_from is None:
        aggregate_from = sets
    elif aggregate_from.delta != sets.delta:
        raise ContractError(
            f"decision sets use different thresholds: {sets.delta} vs {aggregate_from.delta}"
        )
    union: set = set()
    for v in sets.per_round:
        union |= v
    return aggregate_from.aggregate <= union
