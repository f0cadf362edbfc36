"""Online diagnostic tasks on unified representations: thresholded anomaly
detection, statistically pooled failure triage, and cosine root-cause ranking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from sklearn.ensemble import GradientBoostingClassifier

from .checkpoint import Calibration, Checkpoint
from .core import (
    ChannelLayout,
    DiagnosisResult,
    ObservationMask,
    ServiceGraph,
    TelediagError,
)
from .ingest import STD_FLOOR, windows_with_targets
from .network import DiagnosisNetwork, ModelConfig, build_network
from .spot import SpotState, spot_fit, spot_update

ZERO_NORM = 1e-12


class DiagnosisError(TelediagError):
    """Online diagnosis cannot proceed (missing calibration, bad shapes...)."""


@dataclass(frozen=True)
class DiagnosisConfig:
    risk: float = 1e-3
    init_quantile: float = 0.98
    delay_window: int = 3
    failure_window: int = 10
    latent_weight: float = 1.0
    zero_masked_error: bool = False
    global_reference: bool = True

    def __post_init__(self):
        if self.delay_window < 1:
            raise ValueError("delay window must be >= 1")
        if self.failure_window < 1:
            raise ValueError("failure window must be >= 1")


@dataclass(frozen=True)
class DeviationScore:
    """Scalar system deviation plus its two components."""

    value: float
    error_energy: float
    latent_drift: float


def deviation_score(
    errors: np.ndarray,
    latents: np.ndarray,
    calibration: Calibration,
    latent_weight: float = 1.0,
) -> DeviationScore:
    """Calibrated two-term deviation of one time step.

    errors: (N, K) reconstruction errors; latents: (N, d_z). The error term is
    the instance-mean L2 norm of per-channel standardized errors; the latent
    term is the instance-mean drift from the calibration operating point.
    """
    if calibration is None:
        raise DiagnosisError("missing calibration statistics")
    std = errors / calibration.error_sigma[None, :]
    e_term = float(np.linalg.norm(std, axis=1).mean())
    l_term = float(np.linalg.norm(latents - calibration.latent_mean, axis=1).mean())
    return DeviationScore(e_term + latent_weight * l_term, e_term, l_term)


@dataclass(frozen=True)
class Alert:
    """One detection event over stream indices (inclusive interval)."""

    start: int  # first breaching step
    end: int  # last breaching step
    emitted: int  # step where the delay-window rule fired


def detect(
    scores: Sequence[float], state: SpotState, delay_window: int
) -> tuple[list[Alert], np.ndarray]:
    """Run the streaming detector over a score sequence.

    An alert is emitted at the delay_window-th consecutive breach of the
    current alert level; later consecutive breaches extend it. Breaching
    scores are never absorbed into the tail model; everything else updates it.
    Returns the alerts and a 0/1 flag per step (1 inside alert intervals,
    including the pre-emission ramp).
    """
    if delay_window < 1:
        raise ValueError("delay window must be >= 1")
    alerts: list[Alert] = []
    flags = np.zeros(len(scores), dtype=np.int64)
    run = 0
    for i, s in enumerate(scores):
        s = float(s)
        if s > state.threshold:
            run += 1
            if run == delay_window:
                alerts.append(Alert(start=i - delay_window + 1, end=i, emitted=i))
            elif run > delay_window:
                last = alerts[-1]
                alerts[-1] = Alert(start=last.start, end=i, emitted=last.emitted)
        else:
            run = 0
        spot_update(state, s)
    for a in alerts:
        flags[a.start : a.end + 1] = 1
    return alerts, flags


def pool_failure_repr(errors: np.ndarray) -> np.ndarray:
    """Statistical pooling of error slices over an alert interval.

    errors: (S, N, K) stack over the interval. Columns are flattened to N*K and
    pooled as concat(mean, max, population std), yielding a 3*N*K vector.
    """
    if errors.ndim != 3 or errors.shape[0] < 1:
        raise ValueError(f"need a non-empty (S, N, K) stack, got shape {errors.shape}")
    flat = errors.reshape(errors.shape[0], -1)
    return np.concatenate([flat.mean(axis=0), flat.max(axis=0), flat.std(axis=0)])


@dataclass
class TriageModel:
    """Boosted-tree failure-type classifier over pooled representations."""

    classifier: GradientBoostingClassifier
    classes: tuple[str, ...]
    n_features: int


def fit_triage(
    features: np.ndarray,
    labels: Sequence[str],
    seed: int = 0,
    n_rounds: int = 200,
    learning_rate: float = 0.1,
    max_depth: int = 3,
) -> TriageModel:
    """Fit the triage ensemble with inverse-class-frequency sample weights.

    Requires at least two classes with at least one example each; the upstream
    encoder is untouched (features are precomputed pooled representations).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if features.ndim != 2 or features.shape[0] != len(labels):
        raise ValueError("features must be (n_examples, n_features) matching labels")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise DiagnosisError(f"triage needs >= 2 classes, got {classes.size}")
    weight_of = {c: len(labels) / (classes.size * k) for c, k in zip(classes, counts)}
    sample_weight = np.array([weight_of[y] for y in labels])
    clf = GradientBoostingClassifier(
        n_estimators=n_rounds,
        learning_rate=learning_rate,
        max_depth=max_depth,
        random_state=seed,
        init="zero",
    )
    clf.fit(features, labels, sample_weight=sample_weight)
    return TriageModel(classifier=clf, classes=tuple(clf.classes_), n_features=features.shape[1])


def triage(model: TriageModel, r_sys: np.ndarray) -> str:
    """Predict the failure type of one pooled representation."""
    r_sys = np.asarray(r_sys, dtype=np.float64)
    if r_sys.shape != (model.n_features,):
        raise ValueError(f"expected {model.n_features} features, got shape {r_sys.shape}")
    return str(model.classifier.predict(r_sys[None, :])[0])


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(a @ b / (na * nb))


def localize(
    vectors: np.ndarray,
    failure_window: int,
    global_reference: bool = True,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Root-cause ranking over the failure window.

    vectors: (S, N, D) unified representations starting at alert onset; the
    first failure_window steps are used (fewer when the stream ends early).
    Each instance is scored by its mean cosine similarity to the reference
    failure vector: the mean over instances and steps when global_reference,
    otherwise the instance's own time mean. Ranking is descending with ties
    broken toward the lower index.
    """
    if vectors.ndim != 3 or vectors.shape[0] < 1:
        raise ValueError(f"need a non-empty (S, N, D) stack, got shape {vectors.shape}")
    win = vectors[:failure_window]
    steps, n, _ = win.shape
    scores = np.zeros(n)
    for i in range(n):
        ref = win.mean(axis=(0, 1)) if global_reference else win[:, i].mean(axis=0)
        scores[i] = sum(_cosine(win[t, i], ref) for t in range(steps)) / steps
    ranking = tuple(int(i) for i in np.argsort(-scores, kind="stable"))
    return scores, ranking


@dataclass
class RepresentationStream:
    """Unified representations and deviation scores for a contiguous minute range."""

    minutes: np.ndarray  # (S,) observed minute of each step
    errors: np.ndarray  # (S, N, K)
    latents: np.ndarray  # (S, N, d_z)
    scores: np.ndarray  # (S,)
    mask: ObservationMask

    def step_of(self, minute: int) -> int:
        first = int(self.minutes[0])
        idx = minute - first
        if not 0 <= idx < len(self.minutes):
            raise ValueError(f"minute {minute} outside scored range [{first}, {self.minutes[-1]}]")
        return idx

    @property
    def vectors(self) -> np.ndarray:
        return np.concatenate([self.errors, self.latents], axis=2)


@dataclass
class CaseReport:
    """One diagnosed alert: interval in minutes plus the joint task outputs."""

    start_minute: int
    end_minute: int
    emitted_minute: int
    result: DiagnosisResult
    deviation_trace: np.ndarray


@dataclass
class DiagnosisReport:
    mask: ObservationMask
    threshold: float
    alerts: list[CaseReport] = field(default_factory=list)


class DiagnosisPipeline:
    """Inference-side orchestration: windows -> representations -> three tasks.

    Read-only over the trained network; safe for concurrent evaluation of
    separate streams.
    """

    def __init__(
        self,
        network: DiagnosisNetwork,
        graph: ServiceGraph,
        calibration: Calibration,
        config: DiagnosisConfig,
        norm_window: int,
        batch_size: int = 512,
    ):
        self.network = network.eval()
        self.graph = graph
        self.calibration = calibration
        self.config = config
        self.norm_window = norm_window
        self.batch_size = batch_size

    @property
    def layout(self) -> ChannelLayout:
        return self.network.config.layout

    @property
    def window(self) -> int:
        return self.network.config.window

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, graph: ServiceGraph, config: DiagnosisConfig | None = None
    ) -> "DiagnosisPipeline":
        import ast

        model_cfg = ModelConfig.from_dict(
            {k: ast.literal_eval(v) for k, v in ckpt.section("model").items()}
        )
        net = build_network(model_cfg, graph)
        net.load_state_dict(
            {k: torch.as_tensor(v) for k, v in ckpt.parameter_tensors().items()}
        )
        if config is None:
            diag_items = {k: ast.literal_eval(v) for k, v in ckpt.section("diagnosis").items()}
            config = DiagnosisConfig(**diag_items) if diag_items else DiagnosisConfig()
        norm_window = int(ckpt.config.get("train.norm_window", "60"))
        return cls(net, graph, ckpt.calibration, config, norm_window)

    def representations(
        self, values: np.ndarray, mask: ObservationMask, start_minute: int = 0
    ) -> RepresentationStream:
        """Score every minute of an aligned raw series under one observation mask.

        Steps cover minutes [norm_window + window, L - 1]: each needs a full
        normalization history, a complete window, and an observed next step.
        """
        layout = self.layout
        wins, targets, minutes = [], [], []
        for win, target in windows_with_targets(
            values, layout, self.window, self.norm_window, start_minute
        ):
            wins.append(win.values)
            targets.append(target)
            minutes.append(win.start_time + self.window)
        if not wins:
            raise DiagnosisError(
                f"series too short to score: need > {self.norm_window + self.window} minutes"
            )
        x = np.stack(wins)
        y = np.stack(targets)
        chan = mask.channel_mask(layout)  # (K,)
        y = y * chan[None, None, :]  # observation is masked online
        errors = np.empty_like(y)
        latents = np.empty((x.shape[0], x.shape[1], self.network.config.latent_dim))
        bits = torch.as_tensor(np.asarray(mask.as_tuple(), dtype=np.float64))
        with torch.no_grad():
            for lo in range(0, x.shape[0], self.batch_size):
                hi = min(lo + self.batch_size, x.shape[0])
                xb = torch.as_tensor(x[lo:hi])
                mb = bits[None, :].expand(hi - lo, 3)
                x_hat, z, _ = self.network(xb, mb)
                errors[lo:hi] = x_hat.numpy() - y[lo:hi]
                latents[lo:hi] = z.numpy()
        if self.config.zero_masked_error:
            errors = errors * chan[None, None, :]
        scores = self._score_stack(errors, latents)
        return RepresentationStream(
            minutes=np.asarray(minutes), errors=errors, latents=latents, scores=scores, mask=mask
        )

    def _score_stack(self, errors: np.ndarray, latents: np.ndarray) -> np.ndarray:
        sigma = self.calibration.error_sigma[None, None, :]
        e_term = np.linalg.norm(errors / sigma, axis=2).mean(axis=1)
        drift = latents - self.calibration.latent_mean[None, :, :]
        l_term = np.linalg.norm(drift, axis=2).mean(axis=1)
        return e_term + self.config.latent_weight * l_term

    def fresh_spot(self) -> SpotState:
        return spot_fit(
            self.calibration.scores, risk=self.config.risk, init_quantile=self.config.init_quantile
        )

    def detect_stream(self, stream: RepresentationStream) -> tuple[list[Alert], np.ndarray, SpotState]:
        state = self.fresh_spot()
        alerts, flags = detect(stream.scores, state, self.config.delay_window)
        return alerts, flags, state

    def case_result(
        self,
        stream: RepresentationStream,
        start_step: int,
        end_step: int,
        triage_model: TriageModel | None = None,
    ) -> DiagnosisResult:
        """Triage and localize one (inclusive) step interval of the stream."""
        pooled = pool_failure_repr(stream.errors[start_step : end_step + 1])
        label = triage(triage_model, pooled) if triage_model is not None else None
        scores, ranking = localize(
            stream.vectors[start_step:],
            self.config.failure_window,
            self.config.global_reference,
        )
        return DiagnosisResult(anomalous=True, failure_type=label, scores=scores, ranking=ranking)

    def diagnose(
        self,
        values: np.ndarray,
        mask: ObservationMask,
        triage_model: TriageModel | None = None,
        start_minute: int = 0,
    ) -> DiagnosisReport:
        """Full online pass: detect alerts, then triage and localize each."""
        stream = self.representations(values, mask, start_minute)
        alerts, _, state = self.detect_stream(stream)
        report = DiagnosisReport(mask=mask, threshold=state.threshold)
        for a in alerts:
            result = self.case_result(stream, a.start, a.end, triage_model)
            report.alerts.append(
                CaseReport(
                    start_minute=int(stream.minutes[a.start]),
                    end_minute=int(stream.minutes[a.end]),
                    emitted_minute=int(stream.minutes[a.emitted]),
                    result=result,
                    deviation_trace=stream.scores[a.start : a.end + 1].copy(),
                )
            )
        return report


def format_report(report: DiagnosisReport) -> str:
    """Human-readable structured text: alerts, deviation traces, triage, ranking."""
    lines = [
        f"mask = {report.mask}",
        f"alert_threshold = {report.threshold:.6g}",
        f"alerts = {len(report.alerts)}",
    ]
    for idx, case in enumerate(report.alerts, start=1):
        r = case.result
        lines.append(f"alert {idx}")
        lines.append(f"  interval_minutes = {case.start_minute}..{case.end_minute}")
        lines.append(f"  emitted_minute = {case.emitted_minute}")
        lines.append(f"  failure_type = {r.failure_type if r.failure_type else 'n/a'}")
        trace = " ".join(f"{s:.4f}" for s in case.deviation_trace)
        lines.append(f"  deviation_trace = {trace}")
        ranked = " ".join(f"{i}:{r.scores[i]:.4f}" for i in r.ranking)
        lines.append(f"  ranking = {ranked}")
    return "\n".join(lines) + "\n"
