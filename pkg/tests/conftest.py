from __future__ import annotations

import pytest

from rightsizer.domain import (
    ClusterSpec,
    Deployment,
    MRKey,
    ResourceKind,
    ServerSpec,
)
from rightsizer.simulator import AppModel
from rightsizer.domain import MicroserviceInstance

CPU = ResourceKind.CPU
MEM = ResourceKind.MEMORY
DISK = ResourceKind.DISK_BW
NET = ResourceKind.NET_BW


def make_server(server_id="s1", cpu=4.0, mem=4096.0, disk=200.0, net=1000.0) -> ServerSpec:
    return ServerSpec(
        id=server_id,
        capacity={CPU: cpu, MEM: mem, DISK: disk, NET: net},
    )


def make_cluster(n=1, **caps) -> ClusterSpec:
    return ClusterSpec(servers=tuple(make_server(f"s{i + 1}", **caps) for i in range(n)))


def make_deployment(placement: dict, allocation: dict) -> Deployment:
    """allocation: {instance: {kind: amount}}; omitted kinds get the floor-ish 1.0."""
    alloc = {}
    for inst in placement:
        per = allocation.get(inst, {})
        for kind in (CPU, MEM, DISK, NET):
            alloc[MRKey(inst, kind)] = per.get(kind, _default_alloc(kind))
    return Deployment(placement=dict(placement), allocation=alloc)


def _default_alloc(kind) -> float:
    return {CPU: 1.0, MEM: 512.0, DISK: 25.0, NET: 100.0}[kind]


def make_model(
    ids,
    edges=(),
    demand=None,
    base=None,
    gamma=0.0,
    noise_cv=0.0,
    seed=0,
) -> AppModel:
    demand = demand or {}
    flat = {}
    for inst, per in demand.items():
        for kind, val in per.items():
            flat[MRKey(inst, kind)] = val
    return AppModel(
        instances=tuple(MicroserviceInstance(id=i, service_name=i) for i in ids),
        edges=tuple(edges),
        demand=flat,
        base_latency=dict(base or {}),
        interference_gamma=gamma,
        noise_cv=noise_cv,
        seed=seed,
    )


@pytest.fixture
def basic_cluster() -> ClusterSpec:
    return make_cluster(3)
