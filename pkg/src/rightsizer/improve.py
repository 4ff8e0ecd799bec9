"""Phase 2: grow into leftover capacity, then shift resources locally.

Leftover server resources go to the colocated instance most impacted by
each kind, once, at phase start. After that the loop repeatedly ranks MRs
with partition-pruned stressing, pairs the most impacted MR with a much
less impacted colocated MR of the same kind, and moves a decaying delta
between them. Transfers that measure worse are reverted exactly; ones
that measure flat trigger a halving search for a smaller amount that
helps. Placement never changes here, so per-server totals are conserved.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional, Sequence

from .audit import AuditLog
from .clampdown import random_partitions
from .config import TuningConfig
from .domain import (
    AMOUNT_TOL,
    KIND_ORDER,
    ClusterSpec,
    Deployment,
    MRKey,
    PerfValue,
    ResourceKind,
    WorkloadSpec,
    allocation_floors,
    sorted_mrs,
)
from .seeding import derive_seed
from .simulator import (
    AppModel,
    ImpactTable,
    MeasureStats,
    is_degraded,
    rel_degradation,
    run_measurement,
)
from .stressing import StressSchedule, apply_stress

KEPT = "kept"
REFINED = "refined_by_binary_search"
BACKTRACKED = "backtracked"

# A donor must look at most half as impacted as its recipient; transfers
# between two similarly hot MRs just thrash.
DONOR_MARGIN = 0.5


@dataclass(frozen=True)
class TransferStep:
    """Record of one attempted donor -> recipient resource move."""

    donor: MRKey
    recipient: MRKey
    amount: float
    measured_before: PerfValue
    measured_after: PerfValue
    outcome: str

    def __post_init__(self) -> None:
        if self.donor.kind is not self.recipient.kind:
            raise ValueError("transfer pairs must share a resource kind")
        if self.outcome not in (KEPT, REFINED, BACKTRACKED):
            raise ValueError(f"unknown outcome {self.outcome!r}")


def assign_leftover(
    d: Deployment,
    impact: ImpactTable,
    cluster: ClusterSpec,
    audit: Optional[AuditLog] = None,
) -> Deployment:
    """Give each server's per-kind slack to its most impacted occupant.

    Ties (including the all-zero-impact case) fall to the first instance
    in id order, which the audit records as a forced tie-break.
    """
    updates: dict[MRKey, float] = {}
    for server in cluster.servers:
        occupants = d.instances_on(server.id)
        if not occupants:
            continue
        for kind in KIND_ORDER:
            slack = server.capacity[kind] - d.used(server.id, kind)
            if slack <= AMOUNT_TOL:
                continue
            scored = sorted(
                occupants, key=lambda i: (-impact.degradation(MRKey(i, kind)), i)
            )
            winner = scored[0]
            forced = impact.degradation(MRKey(winner, kind)) <= 0.0
            mr = MRKey(winner, kind)
            updates[mr] = d.allocation[mr] + slack
            if audit is not None:
                audit.emit(
                    "leftover_assign",
                    server=server.id,
                    kind=kind.value,
                    instance=winner,
                    amount=slack,
                    forced_tie_break=forced,
                )
    return d.with_allocations(updates) if updates else d


def rank_impacts_pruned(
    model: AppModel,
    d: Deployment,
    w: WorkloadSpec,
    baseline: PerfValue,
    schedule: StressSchedule,
    p: int,
    rng_seed: int,
    *,
    cluster: ClusterSpec,
    tau: float = 0.0,
    trials: int = 1,
    deterministic: bool = True,
    stats: Optional[MeasureStats] = None,
    seed_root: Optional[int] = None,
) -> list[tuple[MRKey, float]]:
    """Rank MRs by stress impact at partition-pruned measurement cost.

    Stresses p random partitions once, refines only the worst partition
    member-by-member, and scores everything else with its partition-level
    degradation: N*k/p + p probes per call instead of N*k. An empty result
    means no partition shows any impact beyond tau.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    floors = allocation_floors(cluster)
    fraction = schedule.fraction()
    rng = random.Random(derive_seed(rng_seed, "rank"))
    pool = d.mr_keys()

    scores: dict[MRKey, float] = {}
    partition_degradation: list[tuple[float, int]] = []
    parts = random_partitions(pool, p, rng)
    for part in parts:
        stressed = apply_stress(d, part.members, fraction, cluster, floors=floors)
        value = run_measurement(
            model, stressed, w,
            trials=trials, deterministic=deterministic, stats=stats, seed_root=seed_root,
        )
        deg = rel_degradation(value, baseline)
        partition_degradation.append((deg, part.id))
        for mr in part.members:
            scores[mr] = deg

    best_deg, best_id = max(partition_degradation, key=lambda t: (t[0], -t[1]))
    if best_deg <= tau:
        return []

    for mr in parts[best_id].members:
        stressed = apply_stress(d, [mr], fraction, cluster, floors=floors)
        value = run_measurement(
            model, stressed, w,
            trials=trials, deterministic=deterministic, stats=stats, seed_root=seed_root,
        )
        scores[mr] = rel_degradation(value, baseline)

    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].sort_key()))
    return ranked


def propose_transfer(
    ranking: Sequence[tuple[MRKey, float]],
    d: Deployment,
    floors: Optional[dict[ResourceKind, float]] = None,
    cluster: Optional[ClusterSpec] = None,
) -> Optional[tuple[MRKey, MRKey]]:
    """Pick (donor, recipient): colocated, same kind, donor much cooler.

    Scans recipients from the hottest MR down and donors from the coolest
    up; a donor qualifies when it sits above its floor and its degradation
    is at most half the recipient's. Returns None when nothing pairs.
    """
    if floors is None:
        if cluster is None:
            raise ValueError("propose_transfer needs floors or a cluster")
        floors = allocation_floors(cluster)
    if not ranking:
        return None
    by_score = {mr: score for mr, score in ranking}
    for recipient, recipient_score in ranking:
        if recipient_score <= 0:
            break
        for donor, donor_score in reversed(ranking):
            if donor == recipient:
                continue
            if donor_score >= recipient_score:
                break  # reversed scan has reached equally-hot MRs
            if donor_score > recipient_score * DONOR_MARGIN:
                continue
            if donor.kind is not recipient.kind:
                continue
            if d.placement[donor.instance] != d.placement[recipient.instance]:
                continue
            if d.allocation[donor] <= floors[donor.kind] + AMOUNT_TOL:
                continue
            return donor, recipient
    return None


def _transferred(d: Deployment, donor: MRKey, recipient: MRKey, amount: float) -> Deployment:
    return d.with_allocations(
        {
            donor: d.allocation[donor] - amount,
            recipient: d.allocation[recipient] + amount,
        }
    )


def execute_transfer(
    model: AppModel,
    d: Deployment,
    w: WorkloadSpec,
    pair: tuple[MRKey, MRKey],
    delta: float,
    baseline_iter: PerfValue,
    resolution: float,
    *,
    cluster: ClusterSpec,
    tau: float = 0.0,
    keep_threshold: Optional[float] = None,
    max_halvings: int = 7,
    trials: int = 1,
    deterministic: bool = True,
    stats: Optional[MeasureStats] = None,
    seed_root: Optional[int] = None,
    audit: Optional[AuditLog] = None,
) -> tuple[Deployment, TransferStep]:
    """Move delta donor -> recipient, keep/refine/backtrack by measurement.

    Per-server totals are conserved by construction. Degradation reverts
    to the exact input deployment; a flat result halves the amount until
    an improvement appears or the amount drops under `resolution`.
    """
    donor, recipient = pair
    floors = allocation_floors(cluster)
    if keep_threshold is None:
        keep_threshold = tau

    def finish(dep: Deployment, amount: float, after: PerfValue, outcome: str):
        step = TransferStep(
            donor=donor, recipient=recipient, amount=amount,
            measured_before=baseline_iter, measured_after=after, outcome=outcome,
        )
        if audit is not None:
            audit.emit(
                "transfer",
                donor_instance=donor.instance,
                recipient_instance=recipient.instance,
                kind=donor.kind.value,
                amount=amount,
                outcome=outcome,
                before=baseline_iter.value,
                after=after.value,
            )
        return dep, step

    if delta < 0 or delta > d.allocation[donor] - floors[donor.kind] + AMOUNT_TOL:
        raise ValueError(
            f"delta {delta:.6g} violates donor floor for {donor.instance}/{donor.kind.value}"
        )
    if delta <= AMOUNT_TOL:
        return finish(d, 0.0, baseline_iter, BACKTRACKED)

    def improved(value: PerfValue) -> bool:
        return rel_degradation(value, baseline_iter) < -keep_threshold

    candidate = _transferred(d, donor, recipient, delta)
    value = run_measurement(
        model, candidate, w,
        trials=trials, deterministic=deterministic, stats=stats, seed_root=seed_root,
    )
    if improved(value):
        return finish(candidate, delta, value, KEPT)
    if is_degraded(value, baseline_iter, tau):
        return finish(d, 0.0, value, BACKTRACKED)

    # Flat: the full step may have overshot a sweet spot; halve toward zero.
    amount = delta / 2.0
    halvings = 0
    last_value = value
    while halvings < max_halvings and amount >= resolution:
        candidate = _transferred(d, donor, recipient, amount)
        last_value = run_measurement(
            model, candidate, w,
            trials=trials, deterministic=deterministic, stats=stats, seed_root=seed_root,
        )
        if improved(last_value):
            return finish(candidate, amount, last_value, REFINED)
        amount /= 2.0
        halvings += 1
    return finish(d, 0.0, last_value, BACKTRACKED)


def run_phase2(
    model: AppModel,
    d1: Deployment,
    w: WorkloadSpec,
    impact: ImpactTable,
    cluster: ClusterSpec,
    config: TuningConfig,
    *,
    stats: Optional[MeasureStats] = None,
    audit: Optional[AuditLog] = None,
) -> tuple[Deployment, list[TransferStep]]:
    """Leftover assignment once, then one measured transfer per iteration.

    Stops when a ranking shows nothing impacted, no pair qualifies, the
    last iteration's relative improvement fell to improvement_threshold or
    below, or max_iterations is reached. The final value never exceeds the
    value entering the phase.
    """
    stats = stats if stats is not None else MeasureStats()
    audit = audit if audit is not None else AuditLog()
    tau = config.resolved_tau()
    floors = allocation_floors(cluster)
    seed_root = derive_seed(config.seed, "phase2")

    d = assign_leftover(d1, impact, cluster, audit=audit)
    value = run_measurement(
        model, d, w,
        trials=config.trials, deterministic=config.deterministic,
        stats=stats, seed_root=seed_root,
    )
    audit.emit("phase2_start", value=value.value)

    steps: list[TransferStep] = []
    schedule = StressSchedule(
        initial_fraction=config.initial_fraction, decay=config.decay
    )
    for iteration in range(config.max_iterations):
        ranking = rank_impacts_pruned(
            model, d, w, value, schedule, config.p,
            derive_seed(config.seed, "rank", iteration),
            cluster=cluster, tau=tau,
            trials=config.trials, deterministic=config.deterministic,
            stats=stats, seed_root=seed_root,
        )
        if not ranking:
            audit.emit("phase2_stop", reason="nothing_impacted", iteration=iteration)
            break
        pair = propose_transfer(ranking, d, floors=floors)
        if pair is None:
            audit.emit("phase2_stop", reason="no_transfer_pair", iteration=iteration)
            break
        donor, _ = pair
        server = d.placement[donor.instance]
        capacity = cluster.capacity(server, donor.kind)
        delta = min(
            schedule.fraction() * capacity,
            d.allocation[donor] - floors[donor.kind],
        )
        resolution = config.binary_search_resolution * capacity
        d_next, step = execute_transfer(
            model, d, w, pair, delta, value, resolution,
            cluster=cluster, tau=tau, keep_threshold=tau,
            max_halvings=config.max_halvings,
            trials=config.trials, deterministic=config.deterministic,
            stats=stats, seed_root=seed_root, audit=audit,
        )
        steps.append(step)
        improvement = 0.0
        if step.outcome in (KEPT, REFINED):
            improvement = -rel_degradation(step.measured_after, value)
            d, value = d_next, step.measured_after
        schedule = schedule.advanced()
        if improvement <= config.improvement_threshold:
            audit.emit(
                "phase2_stop", reason="improvement_below_threshold",
                iteration=iteration, improvement=improvement,
            )
            break
    else:
        audit.emit("phase2_stop", reason="max_iterations", iteration=config.max_iterations)

    audit.emit("phase2_done", value=value.value, kept_steps=sum(
        1 for s in steps if s.outcome in (KEPT, REFINED)
    ))
    return d, steps
