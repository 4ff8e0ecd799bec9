"""Core vocabulary: resources, instances, servers, deployments, workloads.

Everything here is an immutable value. "Mutation" of a deployment always
means building a new one (see :meth:`Deployment.with_allocations`), which
keeps concurrent use and backtracking trivially safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

AMOUNT_TOL = 1e-9

# Fraction of the smallest server's per-kind capacity that every allocation
# must stay above. The latency model divides by allocations, so a strictly
# positive floor keeps it away from singularities.
FLOOR_FRACTION = 0.02


class ResourceKind(str, Enum):
    """The four tunable resource kinds of a microservice allocation."""

    CPU = "cpu"
    MEMORY = "memory"
    DISK_BW = "disk_bw"
    NET_BW = "net_bw"

    @property
    def unit(self) -> str:
        return _UNITS[self]


_UNITS = {
    ResourceKind.CPU: "cores",
    ResourceKind.MEMORY: "MiB",
    ResourceKind.DISK_BW: "MiB/s",
    ResourceKind.NET_BW: "Mbit/s",
}

# Fixed order used for every kind-level tie-break in the package.
KIND_ORDER: tuple[ResourceKind, ...] = (
    ResourceKind.CPU,
    ResourceKind.MEMORY,
    ResourceKind.DISK_BW,
    ResourceKind.NET_BW,
)

_KIND_INDEX = {k: i for i, k in enumerate(KIND_ORDER)}


@dataclass(frozen=True)
class MicroserviceInstance:
    """One deployable copy of a microservice."""

    id: str
    service_name: str


@dataclass(frozen=True, order=False)
class MRKey:
    """Identifies one (instance, resource kind) allocation cell."""

    instance: str
    kind: ResourceKind

    def sort_key(self) -> tuple[str, int]:
        return (self.instance, _KIND_INDEX[self.kind])


def sorted_mrs(mrs: Iterable[MRKey]) -> list[MRKey]:
    """Stable MR ordering: instance id, then fixed kind order.

    Set iteration order depends on the process hash seed, so anything that
    feeds MRs to an RNG or a report must go through here first.
    """
    return sorted(mrs, key=MRKey.sort_key)


@dataclass(frozen=True)
class ServerSpec:
    """A server (or VM) with a per-kind capacity."""

    id: str
    capacity: Mapping[ResourceKind, float]

    def __post_init__(self) -> None:
        for kind in KIND_ORDER:
            cap = self.capacity.get(kind)
            if cap is None or cap <= 0:
                raise ValueError(
                    f"server {self.id!r}: capacity for {kind.value} must be strictly positive"
                )


@dataclass(frozen=True)
class ClusterSpec:
    """Ordered server inventory the optimizer may place onto."""

    servers: Sequence[ServerSpec]

    def __post_init__(self) -> None:
        ids = [s.id for s in self.servers]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate server ids in cluster")

    def server(self, server_id: str) -> ServerSpec:
        for s in self.servers:
            if s.id == server_id:
                return s
        raise KeyError(server_id)

    def capacity(self, server_id: str, kind: ResourceKind) -> float:
        return self.server(server_id).capacity[kind]


def allocation_floors(cluster: ClusterSpec) -> dict[ResourceKind, float]:
    """Per-kind minimum allocation: 2% of the smallest server capacity."""
    return {
        kind: FLOOR_FRACTION * min(s.capacity[kind] for s in cluster.servers)
        for kind in KIND_ORDER
    }


@dataclass(frozen=True)
class PlacementConstraint:
    """Operator placement rule over a set of instances."""

    kind: str  # "must_colocate" | "must_separate"
    instances: frozenset[str]

    def __post_init__(self) -> None:
        if self.kind not in ("must_colocate", "must_separate"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if len(self.instances) < 2:
            raise ValueError("constraint needs at least two instances")
        object.__setattr__(self, "instances", frozenset(self.instances))


@dataclass(frozen=True)
class Deployment:
    """Search state of the optimizer: where instances run and what they get.

    placement maps instance id -> server id; allocation maps every
    (instance, kind) cell of a placed instance to an amount in the kind's
    unit.
    """

    placement: Mapping[str, str]
    allocation: Mapping[MRKey, float]

    def instances_on(self, server_id: str) -> list[str]:
        return sorted(i for i, s in self.placement.items() if s == server_id)

    def server_of(self, instance: str) -> str:
        return self.placement[instance]

    def used(self, server_id: str, kind: ResourceKind) -> float:
        return sum(
            self.allocation.get(MRKey(i, kind), 0.0)
            for i, s in self.placement.items()
            if s == server_id
        )

    def with_allocations(self, updates: Mapping[MRKey, float]) -> "Deployment":
        alloc = dict(self.allocation)
        alloc.update(updates)
        return Deployment(placement=dict(self.placement), allocation=alloc)

    def with_placement(self, placement: Mapping[str, str]) -> "Deployment":
        return Deployment(placement=dict(placement), allocation=dict(self.allocation))

    def mr_keys(self) -> list[MRKey]:
        return sorted_mrs(self.allocation.keys())


@dataclass(frozen=True)
class PerfValue:
    """One end-to-end performance measurement."""

    value: float
    metric: str = "p99_latency_ms"
    lower_is_better: bool = True

    def __post_init__(self) -> None:
        if not (self.value >= 0 and self.value == self.value and self.value != float("inf")):
            raise ValueError(f"performance value must be finite and >= 0, got {self.value}")


@dataclass(frozen=True)
class WorkloadSpec:
    """Representative workload driving the evaluator."""

    request_rate: float
    request_mix: Mapping[str, float] = field(default_factory=lambda: {"all": 1.0})
    duration: float = 10.0

    def __post_init__(self) -> None:
        if self.request_rate <= 0:
            raise ValueError("request_rate must be > 0")
        if any(wt < 0 for wt in self.request_mix.values()):
            raise ValueError("request_mix weights must be non-negative")
        total = sum(self.request_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"request_mix weights must sum to 1, got {total}")
        if self.duration <= 0:
            raise ValueError("duration must be > 0")


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


def validate_deployment(
    d: Deployment,
    cluster: ClusterSpec,
    constraints: Sequence[PlacementConstraint] = (),
) -> ValidationReport:
    """Check a deployment against capacity, floor, and placement rules.

    Violations are data, not errors: the report enumerates every broken
    invariant with the offending server/instance/kind so callers can show
    them all at once.
    """
    violations: list[str] = []
    known_servers = {s.id for s in cluster.servers}
    floors = allocation_floors(cluster)

    for instance, server_id in sorted(d.placement.items()):
        if server_id not in known_servers:
            violations.append(f"instance {instance!r} placed on unknown server {server_id!r}")
            continue
        for kind in KIND_ORDER:
            mr = MRKey(instance, kind)
            if mr not in d.allocation:
                violations.append(f"instance {instance!r} missing allocation for {kind.value}")

    for mr in d.mr_keys():
        if mr.instance not in d.placement:
            violations.append(f"allocation for unplaced instance {mr.instance!r}")
            continue
        amount = d.allocation[mr]
        if amount < floors[mr.kind] - AMOUNT_TOL:
            violations.append(
                f"allocation below floor: {mr.instance!r}/{mr.kind.value} "
                f"{amount:.6g} < {floors[mr.kind]:.6g}"
            )

    for server in cluster.servers:
        for kind in KIND_ORDER:
            used = d.used(server.id, kind)
            if used > server.capacity[kind] + AMOUNT_TOL:
                violations.append(
                    f"{kind.value} oversubscribed on server {server.id!r}: "
                    f"{used:.6g} > {server.capacity[kind]:.6g}"
                )

    for c in constraints:
        placed = [i for i in sorted(c.instances) if i in d.placement]
        if len(placed) != len(c.instances):
            missing = sorted(c.instances - set(placed))
            violations.append(f"constraint {c.kind} references unplaced instances {missing}")
            continue
        servers_used = [d.placement[i] for i in placed]
        if c.kind == "must_colocate" and len(set(servers_used)) > 1:
            violations.append(f"constraint must_colocate broken for {placed}")
        if c.kind == "must_separate" and len(set(servers_used)) < len(placed):
            violations.append(f"constraint must_separate broken for {placed}")

    return ValidationReport(ok=not violations, violations=tuple(violations))


def server_count(d: Deployment) -> int:
    """Number of distinct servers the deployment occupies."""
    return len(set(d.placement.values()))


# --- JSON interchange -------------------------------------------------------
#
# The wire format mirrors the type fields. Allocation is a two-level map
# (instance -> kind -> amount) because JSON keys must be strings.


def deployment_to_dict(d: Deployment) -> dict:
    alloc: dict[str, dict[str, float]] = {}
    for mr in d.mr_keys():
        alloc.setdefault(mr.instance, {})[mr.kind.value] = d.allocation[mr]
    return {
        "placement": {i: d.placement[i] for i in sorted(d.placement)},
        "allocation": alloc,
    }


def deployment_from_dict(data: Mapping) -> Deployment:
    placement = {str(i): str(s) for i, s in data["placement"].items()}
    allocation: dict[MRKey, float] = {}
    for instance, kinds in data["allocation"].items():
        for kind_name, amount in kinds.items():
            allocation[MRKey(str(instance), ResourceKind(kind_name))] = float(amount)
    return Deployment(placement=placement, allocation=allocation)


def cluster_to_dict(cluster: ClusterSpec) -> dict:
    return {
        "servers": [
            {"id": s.id, "capacity": {k.value: s.capacity[k] for k in KIND_ORDER}}
            for s in cluster.servers
        ]
    }


def cluster_from_dict(data: Mapping) -> ClusterSpec:
    servers = [
        ServerSpec(
            id=str(entry["id"]),
            capacity={ResourceKind(k): float(v) for k, v in entry["capacity"].items()},
        )
        for entry in data["servers"]
    ]
    return ClusterSpec(servers=tuple(servers))


def constraints_to_list(constraints: Sequence[PlacementConstraint]) -> list[dict]:
    return [
        {"kind": c.kind, "instances": sorted(c.instances)}
        for c in constraints
    ]


def constraints_from_list(data: Optional[Iterable[Mapping]]) -> tuple[PlacementConstraint, ...]:
    if not data:
        return ()
    return tuple(
        PlacementConstraint(kind=str(e["kind"]), instances=frozenset(map(str, e["instances"])))
        for e in data
    )


def workload_to_dict(w: WorkloadSpec) -> dict:
    return {
        "request_rate": w.request_rate,
        "request_mix": dict(sorted(w.request_mix.items())),
        "duration": w.duration,
    }


def workload_from_dict(data: Mapping) -> WorkloadSpec:
    return WorkloadSpec(
        request_rate=float(data["request_rate"]),
        request_mix={str(k): float(v) for k, v in data.get("request_mix", {"all": 1.0}).items()},
        duration=float(data.get("duration", 10.0)),
    )
