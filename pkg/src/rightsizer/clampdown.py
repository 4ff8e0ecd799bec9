"""Phase 1: discover impacted MRs, tighten the rest, pack onto fewer servers.

Probing stresses random groups of MRs together and only recurses into
groups whose stress degrades end-to-end performance, so measurement cost
stays near N*k/p + p per round instead of N*k when few MRs matter.
Tightening commits each round's stressed reductions for every
non-impacted MR; packing then rebuilds the placement with an
impact-diversity heuristic and verifies the result against the baseline,
retrying variants or adding servers until it matches.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .audit import AuditLog
from .config import TuningConfig
from .domain import (
    AMOUNT_TOL,
    KIND_ORDER,
    ClusterSpec,
    Deployment,
    MRKey,
    PerfValue,
    PlacementConstraint,
    ResourceKind,
    WorkloadSpec,
    allocation_floors,
    server_count,
    sorted_mrs,
    validate_deployment,
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


class InfeasibleConstraintsError(ValueError):
    """Placement constraints cannot be satisfied on this cluster."""


@dataclass(frozen=True)
class Partition:
    """One random group of MRs stressed together in a probe round."""

    id: int
    members: tuple[MRKey, ...]


@dataclass
class TightenResult:
    deployment: Deployment
    impact: ImpactTable
    baseline: PerfValue
    iterations: int
    final_fraction: float
    value: PerfValue


@dataclass
class ClampdownResult:
    """Verified output of phase 1 plus the evidence that produced it."""

    deployment: Deployment
    impact: ImpactTable
    baseline: PerfValue
    iterations: int
    audit: AuditLog
    final_fraction: float
    tightened: Optional[Deployment] = None  # pre-packing, original placement
    value_tightened: Optional[PerfValue] = None
    value_packed: Optional[PerfValue] = None
    measurements: int = 0


def random_partitions(members: Sequence[MRKey], p: int, rng: random.Random) -> list[Partition]:
    """Split MRs into at most p near-equal random groups (all non-empty)."""
    pool = sorted_mrs(members)
    rng.shuffle(pool)
    count = min(p, len(pool))
    base, extra = divmod(len(pool), count)
    parts: list[Partition] = []
    start = 0
    for i in range(count):
        size = base + (1 if i < extra else 0)
        parts.append(Partition(id=i, members=tuple(pool[start : start + size])))
        start += size
    return parts


def discover_imrs(
    model: AppModel,
    d: Deployment,
    w: WorkloadSpec,
    baseline: PerfValue,
    fraction: float,
    p: int,
    rng_seed: int,
    *,
    cluster: ClusterSpec,
    universe: Optional[Sequence[MRKey]] = None,
    tau: float = 0.0,
    trials: int = 1,
    deterministic: bool = True,
    stats: Optional[MeasureStats] = None,
    seed_root: Optional[int] = None,
) -> tuple[set[MRKey], ImpactTable]:
    """Find every MR whose individual stress degrades performance.

    Recursion: stress a whole partition; if performance survives, all its
    members are cleared at once (they inherit the group degradation as a
    low-resolution impact score). If it degrades, split into p random
    subpartitions and repeat, down to singletons whose exact degradation
    lands in the impact table.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    floors = allocation_floors(cluster)
    pool = d.mr_keys() if universe is None else sorted_mrs(universe)
    rng = random.Random(derive_seed(rng_seed, "discover"))

    imrs: set[MRKey] = set()
    entries: dict[MRKey, float] = {}

    def probe(members: tuple[MRKey, ...]) -> float:
        stressed = apply_stress(d, members, fraction, cluster, floors=floors)
        value = run_measurement(
            model, stressed, w,
            trials=trials, deterministic=deterministic, stats=stats, seed_root=seed_root,
        )
        degraded = is_degraded(value, baseline, tau)
        degradation = rel_degradation(value, baseline)
        if degraded and len(members) > 1:
            recurse(members)
        elif degraded:
            imrs.add(members[0])
            entries[members[0]] = degradation
        else:
            for mr in members:
                entries[mr] = degradation
        return degradation

    def recurse(members: Sequence[MRKey]) -> None:
        for part in random_partitions(members, p, rng):
            probe(part.members)

    if pool:
        recurse(pool)
    return imrs, ImpactTable(entries=entries, fraction=fraction)


def tighten(
    model: AppModel,
    d0: Deployment,
    w: WorkloadSpec,
    cluster: ClusterSpec,
    schedule: StressSchedule,
    p: int,
    *,
    rng_seed: int = 0,
    tau: float = 0.0,
    trials: int = 1,
    deterministic: bool = True,
    min_fraction: float = 0.01,
    stats: Optional[MeasureStats] = None,
    audit: Optional[AuditLog] = None,
) -> TightenResult:
    """Reduce every non-impacted allocation until only impacted MRs remain.

    Each round probes all above-floor MRs at the schedule's fraction and
    commits the stressed reduction for every NIMR in one batch. Because
    individually harmless reductions can degrade jointly, the batch is
    verified against the baseline; on failure it is rolled back and the
    round falls back to committing one MR at a time, skipping offenders.
    Stops when a round commits nothing or the fraction falls under
    min_fraction. Placement is never touched.
    """
    floors = allocation_floors(cluster)
    baseline = run_measurement(
        model, d0, w, trials=trials, deterministic=deterministic, stats=stats, seed_root=rng_seed
    )
    d = d0
    value = baseline
    impact = ImpactTable()
    iterations = 0
    final_fraction = schedule.fraction()

    while schedule.fraction() >= min_fraction:
        fraction = schedule.fraction()
        final_fraction = fraction
        universe = [mr for mr in d.mr_keys() if d.allocation[mr] > floors[mr.kind] + AMOUNT_TOL]
        if not universe:
            break
        imrs, round_impact = discover_imrs(
            model, d, w, baseline, fraction, p,
            derive_seed(rng_seed, "round", iterations),
            cluster=cluster, universe=universe, tau=tau,
            trials=trials, deterministic=deterministic, stats=stats, seed_root=rng_seed,
        )
        impact = impact.merged(round_impact)
        nimrs = [mr for mr in universe if mr not in imrs]
        iterations += 1

        if not nimrs:
            if audit is not None:
                audit.emit("tighten_iteration", iteration=iterations - 1, fraction=fraction,
                           probed=len(universe), imrs=len(imrs), committed=0, value=value.value)
            break

        batch = apply_stress(d, nimrs, fraction, cluster, floors=floors)
        committed = sum(
            1 for mr in nimrs if abs(batch.allocation[mr] - d.allocation[mr]) > AMOUNT_TOL
        )
        if committed == 0:
            break
        batch_value = run_measurement(
            model, batch, w, trials=trials, deterministic=deterministic, stats=stats, seed_root=rng_seed
        )
        reverted = False
        if is_degraded(batch_value, baseline, tau):
            # Joint effect of individually harmless reductions; retry one
            # at a time from the round's starting point.
            reverted = True
            committed = 0
            for mr in sorted_mrs(nimrs):
                candidate = apply_stress(d, [mr], fraction, cluster, floors=floors)
                if candidate == d:
                    continue
                candidate_value = run_measurement(
                    model, candidate, w,
                    trials=trials, deterministic=deterministic, stats=stats, seed_root=rng_seed,
                )
                if is_degraded(candidate_value, baseline, tau):
                    continue
                d, value = candidate, candidate_value
                committed += 1
        else:
            d, value = batch, batch_value
        if audit is not None:
            audit.emit("tighten_iteration", iteration=iterations - 1, fraction=fraction,
                       probed=len(universe), imrs=len(imrs), committed=committed,
                       batch_reverted=reverted, value=value.value)
        if committed == 0:
            break
        schedule = schedule.advanced()

    return TightenResult(
        deployment=d, impact=impact, baseline=baseline,
        iterations=iterations, final_fraction=final_fraction, value=value,
    )


def _colocation_groups(
    instances: Sequence[str], constraints: Sequence[PlacementConstraint]
) -> list[list[str]]:
    parent = {i: i for i in instances}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for c in constraints:
        if c.kind != "must_colocate":
            continue
        members = sorted(c.instances)
        for other in members[1:]:
            ra, rb = find(members[0]), find(other)
            if ra != rb:
                parent[rb] = ra

    groups: dict[str, list[str]] = {}
    for i in instances:
        groups.setdefault(find(i), []).append(i)
    return [sorted(g) for g in sorted(groups.values())]


def _separation_pairs(constraints: Sequence[PlacementConstraint]) -> set[frozenset[str]]:
    pairs: set[frozenset[str]] = set()
    for c in constraints:
        if c.kind != "must_separate":
            continue
        members = sorted(c.instances)
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                pairs.add(frozenset((a, b)))
    return pairs


def pack(
    model: AppModel,
    d_tight: Deployment,
    impact: ImpactTable,
    cluster: ClusterSpec,
    constraints: Sequence[PlacementConstraint],
    w: WorkloadSpec,
    baseline: PerfValue,
    max_variants: int = 10,
    rng_seed: int = 0,
    *,
    tau: float = 0.0,
    trials: int = 1,
    deterministic: bool = True,
    stats: Optional[MeasureStats] = None,
    audit: Optional[AuditLog] = None,
) -> Deployment:
    """Repack tight allocations onto the fewest servers that keep baseline.

    Placement order is first-fit decreasing by the (normalized)
    most-impacted-kind allocation; candidate servers are ranked by initial
    colocation, then impact-kind diversity, then round-robin distance.
    Each packed placement is measured; degraded ones trigger up to
    max_variants reshuffles per server count before a server is added.
    The original placement is the guaranteed final fallback.
    """
    instances = sorted(d_tight.placement)
    floors = allocation_floors(cluster)
    sep_pairs = _separation_pairs(constraints)

    for c in constraints:
        if c.kind == "must_separate" and len(c.instances) > len(cluster.servers):
            raise InfeasibleConstraintsError(
                f"must_separate over {sorted(c.instances)} exceeds the {len(cluster.servers)}-server cluster"
            )

    groups = _colocation_groups(instances, constraints)
    for group in groups:
        for pair in sep_pairs:
            if pair <= set(group):
                raise InfeasibleConstraintsError(
                    f"must_separate {sorted(pair)} conflicts with must_colocate group {group}"
                )

    max_cap = {k: max(s.capacity[k] for s in cluster.servers) for k in KIND_ORDER}
    mik = {i: impact.most_impacted_kind(i) for i in instances}

    def group_alloc(group: Sequence[str], kind: ResourceKind) -> float:
        return sum(d_tight.allocation[MRKey(i, kind)] for i in group)

    def size_key(group: Sequence[str]) -> float:
        return sum(d_tight.allocation[MRKey(i, mik[i])] / max_cap[mik[i]] for i in group)

    ffd_order = sorted(groups, key=lambda g: (-size_key(g), g))

    def attempt(order: Sequence[Sequence[str]], k: int) -> Optional[dict[str, str]]:
        servers = cluster.servers[:k]
        placement: dict[str, str] = {}
        used: dict[tuple[str, ResourceKind], float] = {}
        rr = 0
        for group in order:
            candidates = []
            for idx, server in enumerate(servers):
                if any(
                    used.get((server.id, kind), 0.0) + group_alloc(group, kind)
                    > server.capacity[kind] + AMOUNT_TOL
                    for kind in KIND_ORDER
                ):
                    continue
                occupants = [i for i, s in placement.items() if s == server.id]
                if any(
                    frozenset((member, occupant)) in sep_pairs
                    for member in group
                    for occupant in occupants
                ):
                    continue
                coloc = sum(
                    1
                    for occupant in occupants
                    for member in group
                    if d_tight.placement[occupant] == d_tight.placement[member]
                )
                diverse = 0 if any(mik[o] in {mik[m] for m in group} for o in occupants) else 1
                rr_distance = (idx - rr) % len(servers)
                candidates.append(((coloc, diverse, -rr_distance), idx))
            if not candidates:
                return None
            _, idx = max(candidates)
            server = servers[idx]
            for member in group:
                placement[member] = server.id
            for kind in KIND_ORDER:
                used[(server.id, kind)] = used.get((server.id, kind), 0.0) + group_alloc(group, kind)
            rr = (idx + 1) % len(servers)
        return placement

    # Smallest k admitting a constraint-respecting first-fit pass.
    k0 = None
    for k in range(1, len(cluster.servers) + 1):
        if attempt(ffd_order, k) is not None:
            k0 = k
            break

    initial_count = server_count(d_tight)
    rng = random.Random(derive_seed(rng_seed, "pack"))
    if k0 is not None:
        for k in range(k0, len(cluster.servers) + 1):
            orders = [list(ffd_order)]
            for _ in range(max_variants):
                shuffled = list(ffd_order)
                rng.shuffle(shuffled)
                orders.append(shuffled)
            for variant, order in enumerate(orders):
                placement = attempt(order, k)
                if placement is None:
                    continue
                candidate = d_tight.with_placement(placement)
                value = run_measurement(
                    model, candidate, w,
                    trials=trials, deterministic=deterministic, stats=stats, seed_root=rng_seed,
                )
                degraded = is_degraded(value, baseline, tau)
                if audit is not None:
                    audit.emit("pack_attempt", k=k, variant=variant,
                               value=value.value, accepted=not degraded)
                if not degraded:
                    return candidate
            if k >= initial_count:
                break

    if audit is not None:
        audit.emit("pack_fallback", k=initial_count)
    return d_tight


def run_phase1(
    model: AppModel,
    d0: Deployment,
    w: WorkloadSpec,
    cluster: ClusterSpec,
    constraints: Sequence[PlacementConstraint],
    config: TuningConfig,
    *,
    stats: Optional[MeasureStats] = None,
    audit: Optional[AuditLog] = None,
) -> ClampdownResult:
    """Measure the baseline, tighten, pack, and verify."""
    report = validate_deployment(d0, cluster, constraints)
    if not report.ok:
        raise ValueError("initial deployment invalid: " + "; ".join(report.violations))
    stats = stats if stats is not None else MeasureStats()
    audit = audit if audit is not None else AuditLog()
    tau = config.resolved_tau()

    schedule = StressSchedule(
        initial_fraction=config.initial_fraction, decay=config.decay
    )
    t = tighten(
        model, d0, w, cluster, schedule, config.p,
        rng_seed=derive_seed(config.seed, "tighten"),
        tau=tau, trials=config.trials, deterministic=config.deterministic,
        min_fraction=config.min_fraction, stats=stats, audit=audit,
    )
    packed = pack(
        model, t.deployment, t.impact, cluster, constraints, w, t.baseline,
        config.max_variants, derive_seed(config.seed, "pack"),
        tau=tau, trials=config.trials, deterministic=config.deterministic,
        stats=stats, audit=audit,
    )
    value_packed = run_measurement(
        model, packed, w,
        trials=config.trials, deterministic=config.deterministic,
        stats=stats, seed_root=derive_seed(config.seed, "verify"),
    )
    audit.emit("phase1_done", servers=server_count(packed), value=value_packed.value,
               baseline=t.baseline.value, iterations=t.iterations)
    return ClampdownResult(
        deployment=packed,
        impact=t.impact,
        baseline=t.baseline,
        iterations=t.iterations,
        audit=audit,
        final_fraction=t.final_fraction,
        tightened=t.deployment,
        value_tightened=t.value,
        value_packed=value_packed,
        measurements=stats.calls,
    )
