"""Synthetic microservice application and its measurement harness.

The application is a DAG of instances with per-request resource demands.
Each instance's service time combines a fixed base latency with
demand/allocation terms inflated by an M/M/1-style queueing factor;
end-to-end latency is the heaviest entry-to-leaf path. This is the
blackbox the optimizer probes: it knows nothing about the formula, only
the measured numbers.

Units: demands are unit-seconds per request (core-seconds, MiB, ...),
allocations are in the kind's unit, base latencies and results are
milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import (
    KIND_ORDER,
    Deployment,
    MicroserviceInstance,
    MRKey,
    PerfValue,
    ResourceKind,
    WorkloadSpec,
)
from .seeding import derive_seed

DEFAULT_METRIC = "p99_latency_ms"
DEFAULT_TRIALS = 25

# ρ is capped so overload yields large-but-finite latencies instead of a
# divergence the search could never measure past.
UTILIZATION_CAP = 0.99

# Bounds on per-trial request samples in noise mode; keeps the empirical
# p99 meaningful at low rates and the harness fast at high ones.
MIN_SAMPLES = 100
MAX_SAMPLES = 5000


class SingularAllocationError(RuntimeError):
    """An allocation at or below zero reached the latency formula."""


@dataclass(frozen=True)
class AppModel:
    """Parametric microservice DAG evaluated as a blackbox.

    instances/edges describe the call graph (single entry). demand maps
    each (instance, kind) to unit-seconds consumed per request.
    interference_gamma inflates colocated instances that share the same
    dominant-demand kind. noise_cv adds multiplicative log-normal noise.
    """

    instances: tuple[MicroserviceInstance, ...]
    edges: tuple[tuple[str, str], ...] = ()
    demand: Mapping[MRKey, float] = field(default_factory=dict)
    base_latency: Mapping[str, float] = field(default_factory=dict)
    interference_gamma: float = 0.0
    noise_cv: float = 0.0
    seed: int = 0

    _entry: str = field(init=False, repr=False, compare=False, default="")
    _children: Mapping[str, tuple[str, ...]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )
    _topo: tuple[str, ...] = field(init=False, repr=False, compare=False, default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "edges", tuple((str(a), str(b)) for a, b in self.edges))
        ids = [i.id for i in self.instances]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate instance ids")
        if not ids:
            raise ValueError("model needs at least one instance")
        known = set(ids)
        for a, b in self.edges:
            if a not in known or b not in known:
                raise ValueError(f"edge ({a!r}, {b!r}) references unknown instance")
        for mr, val in self.demand.items():
            if mr.instance not in known:
                raise ValueError(f"demand for unknown instance {mr.instance!r}")
            if not (val >= 0):
                raise ValueError(f"demand for {mr} must be >= 0")
        for inst, ms in self.base_latency.items():
            if inst not in known:
                raise ValueError(f"base latency for unknown instance {inst!r}")
            if not (ms >= 0):
                raise ValueError("base latency must be >= 0")
        if self.interference_gamma < 0 or self.noise_cv < 0:
            raise ValueError("interference_gamma and noise_cv must be >= 0")

        entry, children, topo = _analyze_dag(ids, self.edges)
        object.__setattr__(self, "_entry", entry)
        object.__setattr__(self, "_children", children)
        object.__setattr__(self, "_topo", topo)

    @property
    def entry(self) -> str:
        return self._entry

    def instance_ids(self) -> list[str]:
        return [i.id for i in self.instances]

    def mr_keys(self) -> list[MRKey]:
        return [MRKey(i.id, k) for i in self.instances for k in KIND_ORDER]

    def dominant_kind(self, instance: str) -> Optional[ResourceKind]:
        """Kind with the largest per-request demand; None when idle."""
        best: Optional[ResourceKind] = None
        best_val = 0.0
        for kind in KIND_ORDER:
            val = self.demand.get(MRKey(instance, kind), 0.0)
            if val > best_val:
                best_val = val
                best = kind
        return best


def _analyze_dag(
    ids: Sequence[str], edges: Sequence[tuple[str, str]]
) -> tuple[str, dict[str, tuple[str, ...]], tuple[str, ...]]:
    children: dict[str, list[str]] = {i: [] for i in ids}
    indegree = {i: 0 for i in ids}
    for a, b in edges:
        children[a].append(b)
        indegree[b] += 1

    roots = [i for i in ids if indegree[i] == 0]
    if len(roots) != 1:
        raise ValueError(f"model must have exactly one entry instance, found {sorted(roots)}")
    entry = roots[0]

    # Kahn topological order; also detects cycles.
    order: list[str] = []
    ready = [i for i in ids if indegree[i] == 0]
    degree = dict(indegree)
    while ready:
        node = ready.pop(0)
        order.append(node)
        for child in children[node]:
            degree[child] -= 1
            if degree[child] == 0:
                ready.append(child)
    if len(order) != len(ids):
        raise ValueError("edges contain a cycle")

    reachable = {entry}
    for node in order:
        if node in reachable:
            reachable.update(children[node])
    unreachable = sorted(set(ids) - reachable)
    if unreachable:
        raise ValueError(f"instances unreachable from entry: {unreachable}")

    return entry, {k: tuple(v) for k, v in children.items()}, tuple(order)


@dataclass(frozen=True)
class ImpactTable:
    """Relative degradation per MR observed at a recorded stress fraction."""

    entries: Mapping[MRKey, float] = field(default_factory=dict)
    fraction: float = 0.0

    def __post_init__(self) -> None:
        for mr, val in self.entries.items():
            if val != val or val in (float("inf"), float("-inf")):
                raise ValueError(f"impact entry for {mr} must be finite")

    def degradation(self, mr: MRKey) -> float:
        return self.entries.get(mr, 0.0)

    def most_impacted_kind(self, instance: str) -> ResourceKind:
        """Argmax-degradation kind for one instance, kind-order tie-break."""
        return max(KIND_ORDER, key=lambda k: (self.degradation(MRKey(instance, k)), -KIND_ORDER.index(k)))

    def merged(self, other: "ImpactTable") -> "ImpactTable":
        entries = dict(self.entries)
        entries.update(other.entries)
        return ImpactTable(entries=entries, fraction=other.fraction or self.fraction)


def _service_times_ms(model: AppModel, d: Deployment, w: WorkloadSpec) -> dict[str, float]:
    times: dict[str, float] = {}
    for inst in model.instance_ids():
        ratio_sum = 0.0
        ratio_max = 0.0
        for kind in KIND_ORDER:
            dem = model.demand.get(MRKey(inst, kind), 0.0)
            if dem == 0.0:
                continue
            alloc = d.allocation.get(MRKey(inst, kind), 0.0)
            if alloc <= 0.0:
                raise SingularAllocationError(
                    f"allocation for ({inst}, {kind.value}) is {alloc}; floors should prevent this"
                )
            ratio = dem / alloc
            ratio_sum += ratio
            if ratio > ratio_max:
                ratio_max = ratio
        rho = min(UTILIZATION_CAP, w.request_rate * ratio_max)
        queue_factor = 1.0 / (1.0 - rho)
        times[inst] = model.base_latency.get(inst, 0.0) + 1000.0 * ratio_sum * queue_factor

    if model.interference_gamma > 0.0:
        dominant = {inst: model.dominant_kind(inst) for inst in model.instance_ids()}
        for inst in model.instance_ids():
            kind = dominant[inst]
            if kind is None:
                continue
            server = d.placement[inst]
            clash = any(
                other != inst and d.placement.get(other) == server and dominant[other] == kind
                for other in model.instance_ids()
            )
            if clash:
                times[inst] *= 1.0 + model.interference_gamma
    return times


def _critical_path_ms(model: AppModel, times: Mapping[str, float]) -> float:
    # Longest entry-to-leaf path; every node cost is >= 0.
    longest: dict[str, float] = {}
    for node in reversed(model._topo):
        kids = model._children[node]
        tail = max((longest[c] for c in kids), default=0.0)
        longest[node] = times[node] + tail
    return longest[model.entry]


def evaluate(
    model: AppModel,
    d: Deployment,
    w: WorkloadSpec,
    deterministic: bool = True,
    seed: Optional[int] = None,
) -> PerfValue:
    """One trial of the blackbox performance function.

    Deterministic mode returns the exact critical-path latency. Noise mode
    draws per-request multiplicative log-normal factors (coefficient of
    variation = model.noise_cv) and reports the empirical 99th percentile
    of the trial's request samples.
    """
    missing = [i for i in model.instance_ids() if i not in d.placement]
    if missing:
        raise ValueError(f"model instances not placed: {missing}")

    times = _service_times_ms(model, d, w)
    value = _critical_path_ms(model, times)

    if deterministic or model.noise_cv == 0.0:
        return PerfValue(value=value, metric=DEFAULT_METRIC)

    n = int(round(w.request_rate * w.duration))
    n = max(MIN_SAMPLES, min(MAX_SAMPLES, n))
    rng = np.random.default_rng(model.seed if seed is None else seed)
    sigma2 = np.log1p(model.noise_cv**2)
    factors = rng.lognormal(mean=-sigma2 / 2.0, sigma=np.sqrt(sigma2), size=n)
    p99 = float(np.percentile(value * factors, 99.0))
    return PerfValue(value=p99, metric=DEFAULT_METRIC)


def measure(
    model: AppModel,
    d: Deployment,
    w: WorkloadSpec,
    trials: int = DEFAULT_TRIALS,
    deterministic: bool = True,
    seed: Optional[int] = None,
) -> PerfValue:
    """Repeated-trial measurement: median of per-trial p99 values.

    Trials use trial-indexed seeds derived from `seed` (default:
    model.seed), so identical inputs are bit-identical across runs.
    Deterministic mode collapses to a single evaluation.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if deterministic or model.noise_cv == 0.0:
        return evaluate(model, d, w, deterministic=True)
    base = model.seed if seed is None else seed
    values = [
        evaluate(model, d, w, deterministic=False, seed=derive_seed(base, "trial", t)).value
        for t in range(trials)
    ]
    return PerfValue(value=float(np.median(values)), metric=DEFAULT_METRIC)


def is_degraded(candidate: PerfValue, baseline: PerfValue, tau: float) -> bool:
    """True when candidate is worse than baseline by more than tau."""
    if candidate.metric != baseline.metric:
        raise ValueError(f"metric mismatch: {candidate.metric} vs {baseline.metric}")
    if baseline.value <= 0:
        raise ValueError("baseline value must be > 0")
    if candidate.lower_is_better:
        return candidate.value > baseline.value * (1.0 + tau)
    return candidate.value < baseline.value * (1.0 - tau)


def rel_degradation(candidate: PerfValue, baseline: PerfValue) -> float:
    """(worse - baseline)/baseline, positive when candidate is worse."""
    if candidate.lower_is_better:
        return (candidate.value - baseline.value) / baseline.value
    return (baseline.value - candidate.value) / baseline.value


@dataclass
class MeasureStats:
    """Counts measurement calls; the probes' cost model is asserted on it."""

    calls: int = 0


def run_measurement(
    model: AppModel,
    d: Deployment,
    w: WorkloadSpec,
    *,
    trials: int = DEFAULT_TRIALS,
    deterministic: bool = True,
    stats: Optional[MeasureStats] = None,
    seed_root: Optional[int] = None,
) -> PerfValue:
    """measure() plus call counting and per-call seed rolling.

    Each counted call gets a distinct derived seed so that noise-mode
    measurements of different candidates are independent draws, while a
    rerun of the same run replays the identical sequence.
    """
    index = stats.calls if stats is not None else 0
    if stats is not None:
        stats.calls += 1
    seed = None if seed_root is None else derive_seed(seed_root, "measure", index)
    return measure(model, d, w, trials=trials, deterministic=deterministic, seed=seed)


# --- serialization ----------------------------------------------------------


def app_model_to_dict(model: AppModel) -> dict:
    demand: dict[str, dict[str, float]] = {}
    for mr in sorted(model.demand.keys(), key=MRKey.sort_key):
        demand.setdefault(mr.instance, {})[mr.kind.value] = model.demand[mr]
    return {
        "instances": [{"id": i.id, "service_name": i.service_name} for i in model.instances],
        "edges": [[a, b] for a, b in model.edges],
        "demand": demand,
        "base_latency": {k: model.base_latency[k] for k in sorted(model.base_latency)},
        "interference_gamma": model.interference_gamma,
        "noise_cv": model.noise_cv,
        "seed": model.seed,
    }


def app_model_from_dict(data: Mapping) -> AppModel:
    demand: dict[MRKey, float] = {}
    for inst, kinds in data.get("demand", {}).items():
        for kind_name, val in kinds.items():
            demand[MRKey(str(inst), ResourceKind(kind_name))] = float(val)
    return AppModel(
        instances=tuple(
            MicroserviceInstance(id=str(e["id"]), service_name=str(e["service_name"]))
            for e in data["instances"]
        ),
        edges=tuple((str(a), str(b)) for a, b in data.get("edges", [])),
        demand=demand,
        base_latency={str(k): float(v) for k, v in data.get("base_latency", {}).items()},
        interference_gamma=float(data.get("interference_gamma", 0.0)),
        noise_cv=float(data.get("noise_cv", 0.0)),
        seed=int(data.get("seed", 0)),
    )
