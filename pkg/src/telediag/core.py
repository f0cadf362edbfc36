"""Shared data model: aligned windows, observation masks, topology and results."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MODALITIES = ("metric", "log", "trace")


class TelediagError(Exception):
    """Base class for errors raised by this package."""


class MaskError(TelediagError):
    """Invalid observation mask (e.g. all modalities missing)."""


class GraphError(TelediagError):
    """Service topology fails validation."""


@dataclass(frozen=True)
class ChannelLayout:
    """Partition of the K channels into metric, log and trace blocks."""

    n_metric: int
    n_log: int
    n_trace: int

    def __post_init__(self):
        for name in ("n_metric", "n_log", "n_trace"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def total(self) -> int:
        return self.n_metric + self.n_log + self.n_trace

    @property
    def metric_slice(self) -> slice:
        return slice(0, self.n_metric)

    @property
    def log_slice(self) -> slice:
        return slice(self.n_metric, self.n_metric + self.n_log)

    @property
    def trace_slice(self) -> slice:
        return slice(self.n_metric + self.n_log, self.total)

    def modality_slice(self, modality: str) -> slice:
        return {
            "metric": self.metric_slice,
            "log": self.log_slice,
            "trace": self.trace_slice,
        }[modality]

    def channel_modalities(self) -> np.ndarray:
        """Modality index (0=metric, 1=log, 2=trace) for each of the K channels."""
        out = np.empty(self.total, dtype=np.int64)
        out[self.metric_slice] = 0
        out[self.log_slice] = 1
        out[self.trace_slice] = 2
        return out


@dataclass(frozen=True)
class ObservationMask:
    """Which modalities were actually collected for a window (1 = observed)."""

    o_metric: int
    o_log: int
    o_trace: int

    def __post_init__(self):
        bits = self.as_tuple()
        if any(b not in (0, 1) for b in bits):
            raise MaskError(f"mask bits must be 0 or 1, got {bits}")
        if sum(bits) == 0:
            raise MaskError("all-missing mask [0,0,0] is rejected upstream")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.o_metric, self.o_log, self.o_trace)

    def channel_mask(self, layout: ChannelLayout) -> np.ndarray:
        """Per-channel 0/1 vector: each channel inherits its modality's bit."""
        bits = np.asarray(self.as_tuple(), dtype=np.float64)
        return bits[layout.channel_modalities()]

    @property
    def complete(self) -> bool:
        return self.as_tuple() == (1, 1, 1)

    @staticmethod
    def from_bits(bits: Sequence[int]) -> "ObservationMask":
        m, l, t = bits
        return ObservationMask(int(m), int(l), int(t))

    def __str__(self) -> str:
        return ",".join(str(b) for b in self.as_tuple())


COMPLETE_MASK = ObservationMask(1, 1, 1)


@dataclass(frozen=True)
class AlignedWindow:
    """Normalized multivariate slice: values of shape (N instances, K channels, T steps)."""

    values: np.ndarray
    start_time: int
    layout: ChannelLayout

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"window values must be 3-D (N,K,T), got shape {v.shape}")
        n, k, t = v.shape
        if n < 1 or t < 1:
            raise ValueError(f"window needs N > 0 and T > 0, got shape {v.shape}")
        if k != self.layout.total:
            raise ValueError(f"channel count {k} does not match layout total {self.layout.total}")
        if not np.all(np.isfinite(v)):
            raise ValueError("window contains non-finite values")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ServiceGraph:
    """Directed instance-level call topology. Self-loops are added at
    propagation time, never stored."""

    n_instances: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        validate_graph(self, self.n_instances)

    def predecessors(self, node: int) -> list[int]:
        return [s for s, d in self.edges if d == node]

    def successors(self, node: int) -> list[int]:
        return [d for s, d in self.edges if s == node]


@dataclass(frozen=True)
class FailureCase:
    """Ground-truth incident annotation. Intervals are minute-based and
    inclusive of both endpoints."""

    start_time: int
    end_time: int
    failure_type: str
    root_instance: int

    def __post_init__(self):
        if not self.start_time < self.end_time:
            raise ValueError(
                f"failure interval must satisfy start < end, got [{self.start_time}, {self.end_time}]"
            )

    def overlaps(self, start: int, end: int) -> bool:
        """True when [start, end] (inclusive) intersects this case's interval."""
        return self.start_time <= end and start <= self.end_time


@dataclass(frozen=True)
class UnifiedRepresentation:
    """Per-instance concatenation of next-step reconstruction error and latent embedding."""

    errors: np.ndarray  # (N, K) prediction minus observation
    latents: np.ndarray  # (N, d_z)
    minute: int

    @property
    def vectors(self) -> np.ndarray:
        return np.concatenate([self.errors, self.latents], axis=1)


@dataclass(frozen=True)
class DiagnosisResult:
    """Joint outcome: anomaly flag, failure type and root-cause ranking."""

    anomalous: bool
    failure_type: str | None
    scores: np.ndarray  # cosine score per instance, in [-1, 1]
    ranking: tuple[int, ...] = field(default=())

    @property
    def top(self) -> int:
        return self.ranking[0]


def apply_mask(window: AlignedWindow, mask: ObservationMask) -> AlignedWindow:
    """Zero out every channel of the missing modalities, leaving observed
    channels untouched.

    The zero placeholder is applied to the *normalized* values, matching the
    structure-compatible substitution performed when a telemetry stream is
    absent at collection time. Idempotent by construction.
    """
    if mask.complete:
        return window
    chan = mask.channel_mask(window.layout)  # (K,)
    values = window.values * chan[None, :, None]
    return AlignedWindow(values=values, start_time=window.start_time, layout=window.layout)


def validate_graph(graph: ServiceGraph, n: int) -> None:
    """Check that every edge endpoint indexes a valid instance in [0, n)."""
    if n <= 0:
        raise GraphError(f"instance count must be positive, got {n}")
    for src, dst in graph.edges:
        if not (0 <= src < n) or not (0 <= dst < n):
            raise GraphError(f"edge ({src}, {dst}) out of range for {n} instances")


def read_topology(path: str | Path, n_instances: int | None = None) -> ServiceGraph:
    """Read a topology file: one directed edge per line as "src,dst".

    When ``n_instances`` is omitted it is inferred as max index + 1.
    """
    edges = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        src_s, dst_s = line.split(",")
        edges.append((int(src_s), int(dst_s)))
    if n_instances is None:
        n_instances = max((max(s, d) for s, d in edges), default=0) + 1
    return ServiceGraph(n_instances=n_instances, edges=tuple(edges))


def write_topology(graph: ServiceGraph, path: str | Path) -> None:
    lines = [f"{s},{d}" for s, d in graph.edges]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_labels(path: str | Path) -> list[FailureCase]:
    """Read a labels file: one case per line as "start_minute,end_minute,type_label,root_instance"."""
    cases = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        start_s, end_s, label, root_s = line.split(",")
        cases.append(FailureCase(int(start_s), int(end_s), label, int(root_s)))
    return cases


def write_labels(cases: Sequence[FailureCase], path: str | Path) -> None:
    lines = [f"{c.start_time},{c.end_time},{c.failure_type},{c.root_instance}" for c in cases]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
