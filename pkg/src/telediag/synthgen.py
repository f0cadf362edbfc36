"""Deterministic synthetic microservice testbed: topology, telemetry, faults.

All randomness flows from a single seed, so identical configs produce
byte-identical record streams. Fault signatures deliberately span all three
modalities, so any single surviving modality still carries (noisier) evidence
of the incident.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    FailureCase,
    ObservationMask,
    ServiceGraph,
    TelediagError,
    write_labels,
    write_topology,
)
from .ingest import (
    Dataset,
    LogRecord,
    MetricRecord,
    RawTelemetry,
    TraceRecord,
    build_dataset,
    write_log_file,
    write_metric_file,
    write_trace_file,
)

FAULT_TYPES = ("cpu_stress", "memory_leak", "network_delay", "io_stress", "crash_restart")

# Metric channel order matches the sorted-name layout produced by ingest.
METRIC_CHANNELS = ("cpu_util", "io_wait", "mem_util", "net_rx", "net_tx", "queue_len")
CPU, IO, MEM, NRX, NTX, QUE = 0, 1, 2, 3, 4, 5
METRIC_SIGMAS = (0.03, 0.025, 0.015, 0.030, 0.025, 0.30)
CRASH_LEVELS = (0.02, 0.01, 0.05, 0.01, 0.01, 0.05)

BACKGROUND_TEMPLATES = {"heartbeat": 8.0, "worker_tick": 6.0, "config_reload": 4.0}
FAULT_TEMPLATES = {
    "cpu_stress": "high_cpu",
    "memory_leak": "gc_pause",
    "network_delay": "net_timeout",
    "io_stress": "disk_slow",
    "crash_restart": "service_restart",
}
FAULT_TEMPLATE_BACKGROUND = 2.0  # idle rate keeps trailing stds off the floor

HOP_ATTENUATION = 0.5  # latency inflation decay per caller hop
NET_DELAY_MS = 150.0
BASE_ERROR_PROB = 0.10

# Workload dynamics: a system-wide load factor plus a per-instance factor, both
# slow AR(1) processes, drive every modality so next-step values are largely
# predictable and cross-modal inference is possible.
AR_PHI = 0.97
LOAD_COUPLING = 0.95  # log-rate multiplier swing per unit of system load
INSTANCE_COUPLING = 0.55
METRIC_MIX = (0.68, 0.68, 0.28)  # (system load, instance factor, white noise)
TRAFFIC_COUPLING = (0.7, 0.4)
LATENCY_COUPLING = (0.25, 0.15)
SPAN_NOISE_SIGMA = 0.08

PRESETS = {"small": (18, 0.15), "large": (46, 0.08)}


class BenchConfigError(TelediagError):
    """Invalid synthetic bench configuration."""


@dataclass(frozen=True)
class BenchConfig:
    """Fully seeded description of one synthetic run."""

    n_instances: int
    edge_prob: float
    duration: int  # minutes
    faults: tuple[FailureCase, ...] = ()
    noise_level: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.duration < 1:
            raise BenchConfigError("duration must be positive")
        for c in self.faults:
            if c.end_time - c.start_time + 1 >= self.duration:
                raise BenchConfigError(f"fault {c} is as long as the whole run")
            if c.end_time >= self.duration:
                raise BenchConfigError(f"fault {c} extends past duration {self.duration}")
            if not 0 <= c.root_instance < self.n_instances:
                raise BenchConfigError(f"fault root {c.root_instance} not in graph")
            if c.failure_type not in FAULT_TYPES:
                raise BenchConfigError(f"unknown failure type '{c.failure_type}'")
        by_inst: dict[int, list[FailureCase]] = {}
        for c in self.faults:
            for other in by_inst.get(c.root_instance, []):
                if c.overlaps(other.start_time, other.end_time):
                    raise BenchConfigError(
                        f"overlapping faults on instance {c.root_instance}: {other} / {c}"
                    )
            by_inst.setdefault(c.root_instance, []).append(c)


def gen_topology(n: int, edge_prob: float, seed: int) -> ServiceGraph:
    """Random directed call graph, reproducible from the seed.

    Cycles are allowed. If the edge draw leaves the graph weakly
    disconnected, bridging edges are added between components.
    """
    if n < 1:
        raise BenchConfigError("need at least one instance")
    if not 0.0 <= edge_prob <= 1.0:
        raise BenchConfigError("edge probability must be in [0, 1]")
    rng = np.random.default_rng(seed)
    if n == 1:
        return ServiceGraph(n_instances=1, edges=())
    adj = rng.random((n, n)) < edge_prob
    np.fill_diagonal(adj, False)
    edges = [(int(s), int(d)) for s, d in np.argwhere(adj)]

    # Bridge weakly connected components until one remains.
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        parent[find(a)] = find(b)

    for s, d in edges:
        union(s, d)
    roots = sorted({find(i) for i in range(n)})
    while len(roots) > 1:
        a, b = roots[0], roots[1]
        if rng.random() < 0.5:
            edges.append((a, b))
        else:
            edges.append((b, a))
        union(a, b)
        roots = sorted({find(i) for i in range(n)})
    return ServiceGraph(n_instances=n, edges=tuple(edges))


def make_missing_scenarios() -> list[ObservationMask]:
    """The seven evaluation masks: complete, three single absences, three dual."""
    bits = [
        (1, 1, 1),
        (0, 1, 1),
        (1, 0, 1),
        (1, 1, 0),
        (0, 0, 1),
        (0, 1, 0),
        (1, 0, 0),
    ]
    return [ObservationMask.from_bits(b) for b in bits]


def caller_hops(graph: ServiceGraph, root: int, max_hops: int = 6) -> dict[int, int]:
    """BFS hop distance from ``root`` to its transitive callers.

    An edge (c, r) means c calls r; when r degrades, c degrades one hop later.
    The root itself is hop 0.
    """
    hops = {root: 0}
    frontier = [root]
    for h in range(1, max_hops + 1):
        nxt = []
        for node in frontier:
            for caller in graph.predecessors(node):
                if caller not in hops:
                    hops[caller] = h
                    nxt.append(caller)
        frontier = nxt
    return hops


def schedule_faults(
    n_faults: int,
    graph: ServiceGraph,
    duration: int,
    seed: int,
    warmup: int = 200,
    min_len: int = 8,
    max_len: int = 14,
    min_gap: int = 18,
    max_gap: int = 30,
) -> tuple[FailureCase, ...]:
    """Sequential fault schedule cycling through the five failure types."""
    rng = np.random.default_rng(seed)
    with_traffic = sorted({d for _, d in graph.edges})
    cases = []
    t = warmup
    for i in range(n_faults):
        ftype = FAULT_TYPES[i % len(FAULT_TYPES)]
        length = int(rng.integers(min_len, max_len + 1))
        # Latency-centric faults need incoming traffic to be observable in traces.
        pool = with_traffic if (ftype == "network_delay" and with_traffic) else list(range(graph.n_instances))
        root = int(pool[rng.integers(0, len(pool))])
        end = t + length - 1
        if end >= duration:
            raise BenchConfigError(
                f"duration {duration} too short for {n_faults} faults (need ~{end + 1})"
            )
        cases.append(FailureCase(t, end, ftype, root))
        t = end + 1 + int(rng.integers(min_gap, max_gap + 1))
    return tuple(cases)


@dataclass
class _Overlays:
    """Per-minute effect arrays assembled from the fault schedule."""

    metric_add: np.ndarray  # (N, 3, L)
    crash: np.ndarray  # (N, L) bool
    log_rate: np.ndarray  # (N, n_templates, L)
    delay_add: np.ndarray  # (N, L) added serving latency, ms
    err_prob: np.ndarray  # (N, L)
    traffic_mult: np.ndarray  # (N, L)
    templates: tuple[str, ...]


def _build_overlays(config: BenchConfig, graph: ServiceGraph, rng: np.random.Generator) -> _Overlays:
    n, dur = config.n_instances, config.duration
    templates = tuple(BACKGROUND_TEMPLATES) + tuple(FAULT_TEMPLATES[f] for f in FAULT_TYPES)
    t_idx = {name: i for i, name in enumerate(templates)}

    metric_add = np.zeros((n, len(METRIC_CHANNELS), dur))
    crash = np.zeros((n, dur), dtype=bool)
    log_rate = np.zeros((n, len(templates), dur))
    for name, rate in BACKGROUND_TEMPLATES.items():
        log_rate[:, t_idx[name], :] = rate
    for f in FAULT_TYPES:
        log_rate[:, t_idx[FAULT_TEMPLATES[f]], :] = FAULT_TEMPLATE_BACKGROUND
    delay_add = np.zeros((n, dur))
    err_prob = np.full((n, dur), BASE_ERROR_PROB)
    traffic_mult = np.ones((n, dur))

    # Benign log bursts: unlabeled operational noise (config pushes etc.).
    n_bursts = max(1, dur // 60)
    for _ in range(n_bursts):
        inst = int(rng.integers(0, n))
        start = int(rng.integers(0, max(1, dur - 4)))
        length = int(rng.integers(2, 5))
        log_rate[inst, t_idx["config_reload"], start : start + length] += 4.0

    for case in config.faults:
        r = case.root_instance
        sl = slice(case.start_time, case.end_time + 1)
        steps = case.end_time - case.start_time + 1
        ramp = np.arange(1, steps + 1) / steps
        tmpl = t_idx[FAULT_TEMPLATES[case.failure_type]]
        if case.failure_type == "cpu_stress":
            metric_add[r, CPU, sl] += 0.45
            metric_add[r, IO, sl] += 0.05
            metric_add[r, QUE, sl] += 1.5
            log_rate[r, tmpl, sl] += 8.0
            delay_add[r, sl] += 40.0
            err_prob[r, sl] += 0.03
        elif case.failure_type == "memory_leak":
            metric_add[r, MEM, sl] += 0.35 * ramp
            metric_add[r, CPU, sl] += 0.05 * ramp
            metric_add[r, QUE, sl] += 1.0 * ramp
            log_rate[r, tmpl, sl] += 10.0 * ramp
            delay_add[r, sl] += 50.0 * ramp
            err_prob[r, sl] += 0.03 * ramp
        elif case.failure_type == "network_delay":
            metric_add[r, NRX, sl] += -0.15
            metric_add[r, NTX, sl] += -0.12
            metric_add[r, IO, sl] += 0.12
            metric_add[r, QUE, sl] += 1.2
            for node, hop in caller_hops(graph, r).items():
                att = HOP_ATTENUATION**hop
                delay_add[node, sl] += NET_DELAY_MS * att
                log_rate[node, tmpl, sl] += 8.0 * att
                err_prob[node, sl] += 0.12 * att
        elif case.failure_type == "io_stress":
            metric_add[r, IO, sl] += 0.40
            metric_add[r, CPU, sl] += 0.08
            metric_add[r, QUE, sl] += 1.5
            log_rate[r, tmpl, sl] += 8.0
            delay_add[r, sl] += 50.0
            err_prob[r, sl] += 0.03
        elif case.failure_type == "crash_restart":
            crash[r, sl] = True
            log_rate[r, tmpl, sl] += 6.0
            log_rate[r, : len(BACKGROUND_TEMPLATES), sl] *= 0.2
            delay_add[r, sl] += 30.0
            err_prob[r, sl] += 0.55
            traffic_mult[r, sl] = 0.1
    np.clip(err_prob, 0.0, 0.95, out=err_prob)
    return _Overlays(metric_add, crash, log_rate, delay_add, err_prob, traffic_mult, templates)


def _ar1(rng: np.random.Generator, shape: tuple[int, ...], phi: float) -> np.ndarray:
    """Stationary unit-variance AR(1) path(s); time is the last axis."""
    out = np.empty(shape)
    out[..., 0] = rng.normal(0.0, 1.0, shape[:-1])
    innovations = rng.normal(0.0, np.sqrt(1.0 - phi * phi), shape[:-1] + (shape[-1] - 1,))
    for t in range(1, shape[-1]):
        out[..., t] = phi * out[..., t - 1] + innovations[..., t - 1]
    return out


def simulate(config: BenchConfig, graph: ServiceGraph) -> tuple[RawTelemetry, tuple[FailureCase, ...]]:
    """Generate raw telemetry records plus the injected labels.

    Record emission order is fixed (minute-major), so one (config, graph)
    always yields the same byte stream.
    """
    if graph.n_instances != config.n_instances:
        raise BenchConfigError("config and graph disagree on instance count")
    n, dur = config.n_instances, config.duration
    rng = np.random.default_rng(config.seed + 2)

    n_m = len(METRIC_CHANNELS)
    bases = np.stack(
        [
            rng.uniform(0.25, 0.45, n),  # cpu_util
            rng.uniform(0.15, 0.30, n),  # io_wait
            rng.uniform(0.40, 0.60, n),  # mem_util
            rng.uniform(0.20, 0.50, n),  # net_rx
            rng.uniform(0.15, 0.40, n),  # net_tx
            rng.uniform(1.0, 4.0, n),  # queue_len
        ],
        axis=1,
    )  # (N, n_m)
    lat_base = rng.uniform(20.0, 80.0, n)
    edges = list(graph.edges)
    edge_rate = rng.uniform(6.0, 10.0, len(edges))

    ov = _build_overlays(config, graph, rng)

    load = _ar1(rng, (dur,), AR_PHI)  # system-wide workload factor
    inst_factor = _ar1(rng, (n, dur), AR_PHI)
    white = rng.normal(0.0, 1.0, size=(n, n_m, dur))

    a, b, c = METRIC_MIX
    dynamics = a * load[None, None, :] + b * inst_factor[:, None, :] + c * white
    sigmas = np.asarray(METRIC_SIGMAS) * config.noise_level
    metric_vals = bases[:, :, None] + dynamics * sigmas[None, :, None] + ov.metric_add
    crash_vals = np.asarray(CRASH_LEVELS)[None, :, None] + rng.normal(
        0.0, 0.005, size=(n, n_m, dur)
    )
    metric_vals = np.where(ov.crash[:, None, :], crash_vals, metric_vals)
    metric_vals = np.clip(metric_vals, 0.0, None)

    log_mult = np.clip(
        1.0 + LOAD_COUPLING * load[None, :] + INSTANCE_COUPLING * inst_factor, 0.30, 3.0
    )
    log_counts = rng.poisson(ov.log_rate * log_mult[:, None, :])  # (N, n_templates, L)

    traffic_factor = np.clip(
        1.0 + TRAFFIC_COUPLING[0] * load[None, :] + TRAFFIC_COUPLING[1] * inst_factor, 0.70, 3.0
    )
    call_rate = edge_rate[:, None] * np.array(
        [ov.traffic_mult[d] * traffic_factor[d] for _, d in edges]
    ).reshape(len(edges), dur)
    call_counts = rng.poisson(call_rate) if edges else np.zeros((0, dur), dtype=np.int64)
    lat_factor = np.maximum(
        1.0 + LATENCY_COUPLING[0] * load[None, :] + LATENCY_COUPLING[1] * inst_factor, 0.3
    )
    err_factor = np.clip(1.0 + 0.8 * load[None, :] + 0.4 * inst_factor, 0.7, 2.5)
    err_prob = np.clip(ov.err_prob * err_factor, 0.0, 0.95)

    metrics: list[MetricRecord] = []
    logs: list[LogRecord] = []
    traces: list[TraceRecord] = []
    for t in range(dur):
        for inst in range(n):
            for ci, chan in enumerate(METRIC_CHANNELS):
                metrics.append(MetricRecord(inst, chan, t, float(metric_vals[inst, ci, t])))
        for inst in range(n):
            for ti, tmpl in enumerate(ov.templates):
                for _ in range(int(log_counts[inst, ti, t])):
                    logs.append(LogRecord(inst, t, tmpl))
        for ei, (src, dst) in enumerate(edges):
            k = int(call_counts[ei, t])
            if k == 0:
                continue
            mults = rng.lognormal(mean=0.0, sigma=SPAN_NOISE_SIGMA, size=k)
            fails = rng.random(k) < err_prob[dst, t]
            dur_ms = (lat_base[dst] + ov.delay_add[dst, t]) * lat_factor[dst, t] * mults
            for j in range(k):
                traces.append(
                    TraceRecord(src, dst, t, float(dur_ms[j]), "error" if fails[j] else "ok")
                )
    raw = RawTelemetry(metrics=tuple(metrics), logs=tuple(logs), traces=tuple(traces))
    return raw, config.faults


def generate_dataset(config: BenchConfig, graph: ServiceGraph | None = None) -> tuple[Dataset, RawTelemetry]:
    """Simulate and serialize in one step.

    The returned Dataset is built through the same aggregation code the ingest
    CLI uses, so a file round-trip reproduces it exactly.
    """
    if graph is None:
        graph = gen_topology(config.n_instances, config.edge_prob, config.seed)
    raw, labels = simulate(config, graph)
    return build_dataset(raw, graph, cases=labels), raw


def preset_config(
    name: str,
    duration: int = 3900,
    n_faults: int = 100,
    seed: int = 7,
    noise_level: float = 1.0,
) -> tuple[BenchConfig, ServiceGraph]:
    """Bench config for a named preset ('small': 18 instances, 'large': 46)."""
    if name not in PRESETS:
        raise BenchConfigError(f"unknown preset '{name}', choose from {sorted(PRESETS)}")
    n, p = PRESETS[name]
    graph = gen_topology(n, p, seed)
    faults = schedule_faults(n_faults, graph, duration, seed + 1)
    cfg = BenchConfig(
        n_instances=n,
        edge_prob=p,
        duration=duration,
        faults=faults,
        noise_level=noise_level,
        seed=seed,
    )
    return cfg, graph


def write_bench(config: BenchConfig, graph: ServiceGraph, out_dir: str | Path) -> RawTelemetry:
    """Write raw record files, topology and labels for a config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw, labels = simulate(config, graph)
    write_metric_file(raw.metrics, out / "metrics.csv")
    write_log_file(raw.logs, out / "logs.csv")
    write_trace_file(raw.traces, out / "traces.csv")
    write_topology(graph, out / "topology.txt")
    write_labels(labels, out / "labels.csv")
    return raw
