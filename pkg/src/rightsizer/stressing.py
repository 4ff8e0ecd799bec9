"""Stress magnitudes and reduction semantics.

Probing always works by *reducing* allocations, never by increasing them:
a reduction can always be applied in place, while an increase might not
fit on a full server and would force a placement change mid-probe.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional

from .audit import AuditLog
from .domain import (
    AMOUNT_TOL,
    ClusterSpec,
    Deployment,
    MRKey,
    ResourceKind,
    allocation_floors,
    sorted_mrs,
)


@dataclass(frozen=True)
class StressSchedule:
    """Decaying step-size schedule shared by probing and transfers.

    The stress fraction starts at 30% of server capacity and shrinks by a
    factor of 1.2 every iteration, giving progressively finer probes.
    """

    initial_fraction: float = 0.30
    decay: float = 1.2
    iteration: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.initial_fraction < 1):
            raise ValueError("initial_fraction must be in (0, 1)")
        if self.decay <= 1:
            raise ValueError("decay must be > 1")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    def fraction(self) -> float:
        return self.initial_fraction / self.decay**self.iteration

    def advanced(self) -> "StressSchedule":
        return replace(self, iteration=self.iteration + 1)


def stress_fraction(s: StressSchedule) -> float:
    return s.fraction()


def apply_stress(
    d: Deployment,
    targets: Iterable[MRKey],
    fraction: float,
    cluster: ClusterSpec,
    floors: Optional[Mapping[ResourceKind, float]] = None,
    audit: Optional[AuditLog] = None,
) -> Deployment:
    """Reduce each target's allocation by fraction x hosting-server capacity.

    Reductions are clamped at the per-kind floor; a clamped MR counts as
    fully tightened. Placement and non-target allocations are untouched.
    The step is sized against the *hosting* server's capacity, so
    heterogeneous clusters get per-server deltas.
    """
    targets = list(targets)
    if not targets:
        return d
    if not (0 < fraction < 1):
        raise ValueError(f"stress fraction must be in (0, 1), got {fraction}")
    if floors is None:
        floors = allocation_floors(cluster)

    updates: dict[MRKey, float] = {}
    for mr in sorted_mrs(targets):
        if mr not in d.allocation:
            raise KeyError(f"stress target {mr} not in deployment")
        old = d.allocation[mr]
        capacity = cluster.capacity(d.placement[mr.instance], mr.kind)
        new = max(floors[mr.kind], old - fraction * capacity)
        if abs(new - old) > AMOUNT_TOL:
            updates[mr] = new
        if audit is not None:
            audit.emit(
                "stress",
                instance=mr.instance,
                kind=mr.kind.value,
                old=old,
                new=new,
                fraction=fraction,
                clamped=new > old - fraction * capacity + AMOUNT_TOL,
            )
    if not updates:
        return d
    return d.with_allocations(updates)


def stress_cpu_by_core_removal(quota: float, c: int) -> float:
    """Quota after removing one of c cores: (quota / c) * (c - 1)."""
    if c < 1:
        raise ValueError("core count must be >= 1")
    if quota <= 0:
        raise ValueError("quota must be > 0")
    return (quota / c) * (c - 1)


def stress_net_limit(max_bw: float, k_percent: float) -> float:
    """Bandwidth cap at k% stress: max_bw * (100 - k) / 100."""
    if not (0 <= k_percent <= 100):
        raise ValueError("k_percent must be within [0, 100]")
    return max_bw * (100.0 - k_percent) / 100.0
