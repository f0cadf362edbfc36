"""Serialization of raw telemetry into aligned, normalized multivariate windows.

Raw input is three line-delimited UTF-8 text files (one record per line,
comma-separated, fixed field order, no header):

* metrics: ``instance,channel,minute,value``
* logs:    ``instance,minute,template``
* traces:  ``caller,callee,minute,duration_ms,status``  (status ``ok`` or ``error``)

Minutes may be fractional; records are bucketed by ``floor(minute)``. Trace
statistics attach to the callee (the serving instance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import (
    AlignedWindow,
    ChannelLayout,
    FailureCase,
    ServiceGraph,
    TelediagError,
    read_labels,
    read_topology,
    write_labels,
    write_topology,
)

OTHER_TEMPLATE = "<other>"
TRACE_CHANNELS = ("avg_latency", "request_count", "error_rate")
STD_FLOOR = 1e-8


class IngestError(TelediagError):
    """Raw telemetry cannot be serialized into an aligned dataset."""


@dataclass(frozen=True, slots=True)
class MetricRecord:
    instance: int
    channel: str
    minute: float
    value: float


@dataclass(frozen=True, slots=True)
class LogRecord:
    instance: int
    minute: float
    template: str


@dataclass(frozen=True, slots=True)
class TraceRecord:
    caller: int
    callee: int
    minute: float
    duration_ms: float
    status: str


@dataclass(frozen=True)
class RawTelemetry:
    """Unaligned record streams as read from the three input files."""

    metrics: tuple[MetricRecord, ...]
    logs: tuple[LogRecord, ...]
    traces: tuple[TraceRecord, ...]

    def __post_init__(self):
        for r in self.metrics:
            if r.minute < 0:
                raise IngestError(f"negative timestamp in metric record: {r}")
        for r in self.logs:
            if r.minute < 0:
                raise IngestError(f"negative timestamp in log record: {r}")
        for r in self.traces:
            if r.minute < 0:
                raise IngestError(f"negative timestamp in trace record: {r}")
            if r.duration_ms < 0:
                raise IngestError(f"negative duration in trace record: {r}")


class TemplateRegistry:
    """Maps log template ids to channel indices.

    Unknown templates allocate a new channel in first-appearance order until
    ``cap`` is reached; anything beyond that maps to a shared overflow channel
    which is always the last log channel.
    """

    def __init__(self, cap: int = 32, templates: Sequence[str] = ()):
        if cap < 1:
            raise ValueError("template cap must be >= 1")
        self.cap = cap
        self._index: dict[str, int] = {}
        for t in templates:
            self.channel_of(t)

    def channel_of(self, template: str) -> int:
        idx = self._index.get(template)
        if idx is not None:
            return idx
        if len(self._index) < self.cap:
            idx = len(self._index)
            self._index[template] = idx
            return idx
        return self.cap  # overflow channel

    @property
    def channels(self) -> tuple[str, ...]:
        """Channel names: allocated templates plus the overflow channel."""
        return tuple(self._index) + (OTHER_TEMPLATE,)

    @property
    def n_channels(self) -> int:
        return len(self._index) + 1


def read_metric_file(path: str | Path) -> tuple[MetricRecord, ...]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        inst, chan, minute, value = line.split(",")
        records.append(MetricRecord(int(inst), chan, float(minute), float(value)))
    return tuple(records)


def read_log_file(path: str | Path) -> tuple[LogRecord, ...]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        inst, minute, template = line.split(",")
        records.append(LogRecord(int(inst), float(minute), template))
    return tuple(records)


def read_trace_file(path: str | Path) -> tuple[TraceRecord, ...]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        caller, callee, minute, duration, status = line.split(",")
        records.append(TraceRecord(int(caller), int(callee), float(minute), float(duration), status))
    return tuple(records)


def write_metric_file(records: Sequence[MetricRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.instance},{r.channel},{_fmt(r.minute)},{r.value!r}\n")


def write_log_file(records: Sequence[LogRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.instance},{_fmt(r.minute)},{r.template}\n")


def write_trace_file(records: Sequence[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.caller},{r.callee},{_fmt(r.minute)},{r.duration_ms!r},{r.status}\n")


def _fmt(minute: float) -> str:
    return str(int(minute)) if float(minute).is_integer() else repr(minute)


def logs_to_series(
    records: Sequence[LogRecord],
    registry: TemplateRegistry,
    n_instances: int,
    start_minute: int,
    length: int,
) -> np.ndarray:
    """Per-instance event-frequency series, one channel per template.

    Returns an array of shape (N, registry.n_channels, length); minutes with
    no events are 0. Counting is total, so this never fails on valid records.
    """
    for r in records:
        registry.channel_of(r.template)  # allocate in first-appearance order
    out = np.zeros((n_instances, registry.n_channels, length), dtype=np.float64)
    for r in records:
        t = int(r.minute) - start_minute
        if 0 <= t < length and 0 <= r.instance < n_instances:
            out[r.instance, registry.channel_of(r.template), t] += 1.0
    return out


def traces_to_series(
    records: Sequence[TraceRecord],
    n_instances: int,
    start_minute: int,
    length: int,
) -> np.ndarray:
    """Minute-level trace statistics per callee instance.

    Channels are (avg_latency, request_count, error_rate); empty minutes yield
    (0, 0, 0). Sums accumulate in record order, so identical inputs produce
    bit-identical output.
    """
    total = np.zeros((n_instances, length), dtype=np.float64)
    count = np.zeros((n_instances, length), dtype=np.float64)
    failed = np.zeros((n_instances, length), dtype=np.float64)
    for r in records:
        t = int(r.minute) - start_minute
        if 0 <= t < length and 0 <= r.callee < n_instances:
            total[r.callee, t] += r.duration_ms
            count[r.callee, t] += 1.0
            if r.status != "ok":
                failed[r.callee, t] += 1.0
    nonzero = count > 0
    avg = np.zeros_like(total)
    err = np.zeros_like(total)
    avg[nonzero] = total[nonzero] / count[nonzero]
    err[nonzero] = failed[nonzero] / count[nonzero]
    return np.stack([avg, count, err], axis=1)


def nearest_fill(sample_minutes: np.ndarray, sample_values: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Nearest-neighbor interpolation onto a dense minute axis.

    Equidistant neighbors resolve to the earlier sample.
    """
    order = np.argsort(sample_minutes, kind="stable")
    mins = np.asarray(sample_minutes, dtype=np.float64)[order]
    vals = np.asarray(sample_values, dtype=np.float64)[order]
    if mins.size == 0:
        raise IngestError("cannot interpolate an empty series")
    idx = np.searchsorted(mins, axis, side="left")
    idx = np.clip(idx, 0, mins.size - 1)
    left = np.clip(idx - 1, 0, mins.size - 1)
    d_right = np.abs(mins[idx] - axis)
    d_left = np.abs(axis - mins[left])
    has_left = idx > 0
    use_left = has_left & (d_left <= d_right)
    chosen = np.where(use_left, left, idx)
    return vals[chosen]


def metrics_to_series(
    records: Sequence[MetricRecord],
    n_instances: int,
    start_minute: int,
    length: int,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Aligned metric series: (N, n_channels, length) plus sorted channel names.

    Every (instance, channel) pair must have at least one sample; a fully
    empty declared series is an ingestion error naming the channel.
    """
    names = tuple(sorted({r.channel for r in records}))
    if not names:
        raise IngestError("no metric channels present in input")
    name_idx = {n: i for i, n in enumerate(names)}
    buckets: dict[tuple[int, int], list[tuple[float, float]]] = {}
    for r in records:
        if not 0 <= r.instance < n_instances:
            raise IngestError(f"metric record instance {r.instance} out of range [0, {n_instances})")
        buckets.setdefault((r.instance, name_idx[r.channel]), []).append((r.minute, r.value))
    axis = np.arange(start_minute, start_minute + length, dtype=np.float64)
    out = np.empty((n_instances, len(names), length), dtype=np.float64)
    for inst in range(n_instances):
        for ci, name in enumerate(names):
            samples = buckets.get((inst, ci))
            if not samples:
                raise IngestError(f"metric channel '{name}' has no samples for instance {inst}")
            m = np.array([s[0] for s in samples])
            v = np.array([s[1] for s in samples])
            out[inst, ci] = nearest_fill(m, v, axis)
    return out, names


@dataclass
class Dataset:
    """Aligned dense series for one deployment, plus topology and labels."""

    values: np.ndarray  # (N, K, L), raw (unnormalized) aligned series
    layout: ChannelLayout
    channel_names: tuple[str, ...]
    start_minute: int
    graph: ServiceGraph
    cases: tuple[FailureCase, ...] = ()

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / "series.npz", values=self.values)
        meta = {
            "start_minute": self.start_minute,
            "n_metric": self.layout.n_metric,
            "n_log": self.layout.n_log,
            "n_trace": self.layout.n_trace,
            "channel_names": list(self.channel_names),
            "n_instances": self.n_instances,
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
        write_topology(self.graph, out / "topology.txt")
        if self.cases:
            write_labels(self.cases, out / "labels.csv")

    @classmethod
    def load(cls, in_dir: str | Path) -> "Dataset":
        src = Path(in_dir)
        values = np.load(src / "series.npz")["values"]
        meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
        layout = ChannelLayout(meta["n_metric"], meta["n_log"], meta["n_trace"])
        graph = read_topology(src / "topology.txt", n_instances=meta["n_instances"])
        labels_path = src / "labels.csv"
        cases = tuple(read_labels(labels_path)) if labels_path.exists() else ()
        return cls(
            values=values,
            layout=layout,
            channel_names=tuple(meta["channel_names"]),
            start_minute=meta["start_minute"],
            graph=graph,
            cases=cases,
        )


def build_dataset(
    raw: RawTelemetry,
    graph: ServiceGraph,
    template_cap: int = 32,
    cases: Sequence[FailureCase] = (),
) -> Dataset:
    """Serialize raw record streams into one aligned multivariate dataset.

    The common one-minute axis spans the full range of timestamps observed in
    any modality. Channel blocks are ordered metric, log, trace.
    """
    minutes = (
        [int(r.minute) for r in raw.metrics]
        + [int(r.minute) for r in raw.logs]
        + [int(r.minute) for r in raw.traces]
    )
    if not minutes:
        raise IngestError("no telemetry records in input")
    start = min(minutes)
    length = max(minutes) - start + 1
    n = graph.n_instances

    metric_vals, metric_names = metrics_to_series(raw.metrics, n, start, length)
    registry = TemplateRegistry(cap=template_cap)
    log_vals = logs_to_series(raw.logs, registry, n, start, length)
    trace_vals = traces_to_series(raw.traces, n, start, length)

    values = np.concatenate([metric_vals, log_vals, trace_vals], axis=1)
    layout = ChannelLayout(len(metric_names), registry.n_channels, len(TRACE_CHANNELS))
    names = metric_names + registry.channels + TRACE_CHANNELS
    return Dataset(
        values=values,
        layout=layout,
        channel_names=names,
        start_minute=start,
        graph=graph,
        cases=tuple(cases),
    )


def ingest_files(
    metrics_path: str | Path,
    logs_path: str | Path,
    traces_path: str | Path,
    topology_path: str | Path,
    labels_path: str | Path | None = None,
    template_cap: int = 32,
) -> Dataset:
    raw = RawTelemetry(
        metrics=read_metric_file(metrics_path),
        logs=read_log_file(logs_path),
        traces=read_trace_file(traces_path),
    )
    graph = read_topology(topology_path)
    cases = tuple(read_labels(labels_path)) if labels_path else ()
    return build_dataset(raw, graph, template_cap=template_cap, cases=cases)


def trailing_stats(values: np.ndarray, end: int, norm_window: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-series mean and population std over minutes [end-norm_window+1, end].

    Std is floored at STD_FLOOR so constant channels standardize to zero.
    """
    if norm_window < 2:
        raise ValueError("normalization window must be >= 2")
    lo = end - norm_window + 1
    if lo < 0 or end >= values.shape[2]:
        raise ValueError(f"stats window [{lo}, {end}] out of range")
    chunk = values[:, :, lo : end + 1]
    mean = chunk.mean(axis=2)
    std = chunk.std(axis=2)  # population
    return mean, np.maximum(std, STD_FLOOR)


def normalize_windows(
    values: np.ndarray,
    layout: ChannelLayout,
    window: int,
    norm_window: int,
    start_minute: int = 0,
) -> Iterator[AlignedWindow]:
    """Stride-1 stream of z-scored windows of length ``window``.

    A window starting at minute s is standardized per (instance, channel) with
    mean/population-std over the norm_window minutes ending at the window's
    last minute. The first norm_window minutes are warm-up history, so a
    series shorter than norm_window + window yields no windows.
    """
    if window < 1:
        raise ValueError("window length must be >= 1")
    n, k, length = values.shape
    for s in range(norm_window, length - window + 1):
        mean, std = trailing_stats(values, s + window - 1, norm_window)
        chunk = (values[:, :, s : s + window] - mean[:, :, None]) / std[:, :, None]
        yield AlignedWindow(values=chunk, start_time=start_minute + s, layout=layout)


def windows_with_targets(
    values: np.ndarray,
    layout: ChannelLayout,
    window: int,
    norm_window: int,
    start_minute: int = 0,
) -> Iterator[tuple[AlignedWindow, np.ndarray]]:
    """Like normalize_windows, pairing each window with its next-step target.

    The target is the (N, K) snapshot one minute past the window end,
    standardized with the same statistics as the window itself.
    """
    n, k, length = values.shape
    for s in range(norm_window, length - window):
        mean, std = trailing_stats(values, s + window - 1, norm_window)
        chunk = (values[:, :, s : s + window] - mean[:, :, None]) / std[:, :, None]
        target = (values[:, :, s + window] - mean) / std
        yield AlignedWindow(values=chunk, start_time=start_minute + s, layout=layout), target
