"""Brute-force references for testing the search heuristics.

These are deliberately naive: exhaustive single-MR stressing, and grid
enumeration over placements and allocations on desk-size instances. They
share nothing with the optimizer's pruned search paths.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Optional

from .domain import (
    AMOUNT_TOL,
    KIND_ORDER,
    ClusterSpec,
    Deployment,
    MRKey,
    PerfValue,
    WorkloadSpec,
    allocation_floors,
    server_count,
    sorted_mrs,
)
from .simulator import AppModel, MeasureStats, evaluate, is_degraded, run_measurement
from .stressing import apply_stress

MAX_ORACLE_INSTANCES = 4
MAX_ORACLE_SERVERS = 2
MAX_GRID_LEVELS = 5


def exhaustive_imr_set(
    model: AppModel,
    d: Deployment,
    w: WorkloadSpec,
    baseline: PerfValue,
    fraction: float,
    *,
    cluster: ClusterSpec,
    tau: float = 0.0,
    stats: Optional[MeasureStats] = None,
) -> set[MRKey]:
    """Stress every MR individually; return those that degrade performance.

    Exactly one measurement per MR (N x k total).
    """
    impacted: set[MRKey] = set()
    floors = allocation_floors(cluster)
    for mr in d.mr_keys():
        stressed = apply_stress(d, [mr], fraction, cluster, floors=floors)
        value = run_measurement(model, stressed, w, trials=1, deterministic=True, stats=stats)
        if is_degraded(value, baseline, tau):
            impacted.add(mr)
    return impacted


def _geometric_levels(lo: float, hi: float, levels: int) -> list[float]:
    if levels == 1 or hi <= lo:
        return [hi]
    ratio = (hi / lo) ** (1.0 / (levels - 1))
    return [lo * ratio**i for i in range(levels - 1)] + [hi]


@lru_cache(maxsize=None)
def _per_server_kind_choices(
    n_members: int,
    capacity: float,
    floor: float,
    levels: int,
    prune_dominated: bool,
) -> tuple[tuple[float, ...], ...]:
    """Feasible allocation tuples for one kind shared by n colocated instances."""
    grid = _geometric_levels(floor, capacity, levels)
    feasible = [
        combo
        for combo in itertools.product(grid, repeat=n_members)
        if sum(combo) <= capacity + AMOUNT_TOL
    ]
    if not prune_dominated:
        return tuple(feasible)
    # Latency is non-increasing in every allocation, so only componentwise-
    # maximal tuples can be optimal; dropping the rest keeps enumeration
    # exhaustive-equivalent while taming the cross product.
    maximal = []
    for combo in feasible:
        if not any(
            other != combo and all(o >= c for o, c in zip(other, combo))
            for other in feasible
        ):
            maximal.append(combo)
    return tuple(maximal)


def brute_force_best(
    model: AppModel,
    cluster: ClusterSpec,
    w: WorkloadSpec,
    grid_levels: int = 3,
    max_instances: int = MAX_ORACLE_INSTANCES,
    server_count_exact: Optional[int] = None,
    prune_dominated: bool = True,
) -> tuple[Deployment, PerfValue]:
    """Best deployment over a geometric allocation grid, by full enumeration.

    Searches every placement and every per-MR grid allocation subject to
    capacity sums, at the minimum feasible server count (or exactly
    `server_count_exact` when given). Ties pick the lexicographically
    smallest deployment encoding for determinism.
    """
    instance_ids = model.instance_ids()
    if len(instance_ids) > min(max_instances, MAX_ORACLE_INSTANCES):
        raise ValueError(f"oracle capped at {MAX_ORACLE_INSTANCES} instances")
    if len(cluster.servers) > MAX_ORACLE_SERVERS:
        raise ValueError(f"oracle capped at {MAX_ORACLE_SERVERS} servers")
    if not (1 <= grid_levels <= MAX_GRID_LEVELS):
        raise ValueError(f"grid_levels must be within [1, {MAX_GRID_LEVELS}]")

    floors = allocation_floors(cluster)
    server_ids = [s.id for s in cluster.servers]

    placements = [
        dict(zip(instance_ids, combo))
        for combo in itertools.product(server_ids, repeat=len(instance_ids))
    ]
    if server_count_exact is not None:
        placements = [p for p in placements if len(set(p.values())) == server_count_exact]
    counts = sorted({len(set(p.values())) for p in placements})

    best: Optional[tuple[float, tuple, Deployment]] = None
    for count in counts:
        for placement in placements:
            if len(set(placement.values())) != count:
                continue
            for d in _grid_deployments(placement, cluster, floors, grid_levels, prune_dominated):
                value = evaluate(model, d, w, deterministic=True).value
                key = _deployment_sort_key(d)
                if best is None or (value, key) < (best[0], best[1]):
                    best = (value, key, d)
        if best is not None:
            break
    if best is None:
        raise ValueError("allocation grid produces no feasible deployment")
    return best[2], PerfValue(value=best[0])


def _grid_deployments(placement, cluster, floors, levels, prune_dominated):
    members_by_server = {}
    for inst, server in placement.items():
        members_by_server.setdefault(server, []).append(inst)
    for members in members_by_server.values():
        members.sort()

    axes = []  # (server, kind, members, choices)
    for server in sorted(members_by_server):
        capacity = cluster.server(server).capacity
        for kind in KIND_ORDER:
            choices = _per_server_kind_choices(
                len(members_by_server[server]), capacity[kind], floors[kind], levels, prune_dominated
            )
            if not choices:
                return
            axes.append((server, kind, members_by_server[server], choices))

    for picks in itertools.product(*(choices for (_, _, _, choices) in axes)):
        allocation = {}
        for (server, kind, members, _), combo in zip(axes, picks):
            for inst, amount in zip(members, combo):
                allocation[MRKey(inst, kind)] = amount
        yield Deployment(placement=dict(placement), allocation=allocation)


def _deployment_sort_key(d: Deployment):
    return (
        tuple(sorted(d.placement.items())),
        tuple((mr.sort_key(), d.allocation[mr]) for mr in sorted_mrs(d.allocation)),
    )
