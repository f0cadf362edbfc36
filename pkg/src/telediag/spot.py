"""Streaming peaks-over-threshold thresholding with a generalized Pareto tail fit."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)

MIN_EXCESSES = 10


@dataclass
class SpotState:
    """Streaming tail model: initial threshold, GPD fit over excesses, alert level."""

    initial_threshold: float  # t0
    shape: float  # gamma
    scale: float  # sigma
    peaks: list[float] = field(default_factory=list)
    n: int = 0  # observations absorbed so far
    risk: float = 1e-3  # q
    threshold: float = 0.0  # z_q, current alert level
    empirical_fallback: bool = False


def _gpd_log_likelihood(y: np.ndarray, gamma: float, sigma: float) -> float:
    if sigma <= 0:
        return -math.inf
    n = y.size
    if abs(gamma) < 1e-12:
        return -n * math.log(sigma) - float(y.sum()) / sigma
    x = gamma * y / sigma
    if np.any(1.0 + x <= 0):
        return -math.inf
    return -n * math.log(sigma) - (1.0 + 1.0 / gamma) * float(np.log1p(x).sum())


def _grimshaw(peaks: np.ndarray) -> tuple[float, float]:
    """Maximum-likelihood GPD fit via Grimshaw's reduction to a scalar root search.

    Candidate roots x of u(x)*v(x) = 1 give (gamma, sigma) = (v(x)-1, gamma/x);
    the exponential limit (0, mean) is always a candidate. Falls back to the
    method of moments when no usable root is found.
    """
    y = np.asarray(peaks, dtype=np.float64)
    y_min, y_max, y_mean = float(y.min()), float(y.max()), float(y.mean())

    def v(x: float) -> float:
        return 1.0 + float(np.log1p(x * y).mean())

    def w(x: float) -> float:
        s = 1.0 + x * y
        return float((1.0 / s).mean()) * v(x) - 1.0

    eps = 1e-8
    lo = -1.0 / y_max + eps
    hi = max(2.0 * (y_mean - y_min) / (y_min * y_min + eps), 1.0)
    candidates: list[tuple[float, float]] = [(0.0, y_mean)]
    for a, b in ((lo, -eps), (eps, hi)):
        if a >= b:
            continue
        grid = np.linspace(a, b, 60)
        vals = np.array([w(g) for g in grid])
        for i in range(len(grid) - 1):
            if np.isfinite(vals[i]) and np.isfinite(vals[i + 1]) and vals[i] * vals[i + 1] < 0:
                try:
                    root = optimize.brentq(w, grid[i], grid[i + 1], xtol=1e-12)
                except ValueError:
                    continue
                gamma = v(root) - 1.0
                if abs(root) > 1e-300:
                    candidates.append((gamma, gamma / root))
    best = max(candidates, key=lambda gs: _gpd_log_likelihood(y, gs[0], gs[1]))
    if not math.isfinite(_gpd_log_likelihood(y, best[0], best[1])):
        return _moment_fit(y)
    return best


def _moment_fit(y: np.ndarray) -> tuple[float, float]:
    m = float(y.mean())
    var = float(y.var())
    if var <= 0 or m <= 0:
        return 0.0, max(m, 1e-12)
    ratio = m * m / var
    return 0.5 * (1.0 - ratio), 0.5 * m * (1.0 + ratio)


def _alert_level(
    t0: float, gamma: float, sigma: float, risk: float, n: int, n_peaks: int
) -> float:
    r = risk * n / n_peaks
    if abs(gamma) < 1e-12:
        return t0 - sigma * math.log(r)
    return t0 + (sigma / gamma) * (r ** (-gamma) - 1.0)


def spot_fit(
    scores: np.ndarray,
    risk: float = 1e-3,
    init_quantile: float = 0.98,
    min_excesses: int = MIN_EXCESSES,
) -> SpotState:
    """Calibrate the tail model on normal-operation scores.

    The initial threshold t0 is the linearly interpolated empirical quantile;
    a generalized Pareto distribution is fitted to the excesses above it. With
    fewer than ``min_excesses`` excesses the alert level falls back to the
    plain empirical (1 - risk) quantile.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 100:
        raise ValueError(f"need >= 100 calibration scores, got {scores.size}")
    if not 0.0 < risk < 1.0 - init_quantile:
        raise ValueError(f"risk must lie in (0, {1.0 - init_quantile}), got {risk}")
    t0 = float(np.quantile(scores, init_quantile))
    peaks = [float(s - t0) for s in scores[scores > t0]]
    state = SpotState(
        initial_threshold=t0,
        shape=0.0,
        scale=1.0,
        peaks=peaks,
        n=int(scores.size),
        risk=risk,
    )
    if len(peaks) < min_excesses:
        logger.warning(
            "only %d excesses above t0=%.6g; falling back to the empirical %.6g quantile",
            len(peaks),
            t0,
            1.0 - risk,
        )
        state.empirical_fallback = True
        state.scale = float(np.mean(peaks)) if peaks else 1.0
        state.threshold = float(np.quantile(scores, 1.0 - risk))
    else:
        _refit_tail(state)
    return state


def _refit_tail(state: SpotState) -> None:
    peaks = np.asarray(state.peaks, dtype=np.float64)
    state.empirical_fallback = False
    state.shape, state.scale = _grimshaw(peaks)
    state.threshold = _alert_level(
        state.initial_threshold, state.shape, state.scale, state.risk, state.n, peaks.size
    )


def spot_update(state: SpotState, score: float) -> SpotState:
    """Absorb one in-distribution score.

    Scores above the alert level are anomaly candidates and are not absorbed;
    scores between t0 and the alert level extend the peak set and refit the
    tail; everything else only increments the observation count. A state that
    started on the empirical fallback switches to the tail fit once enough
    peaks have accumulated.
    """
    if score > state.threshold:
        return state
    state.n += 1
    if score > state.initial_threshold:
        state.peaks.append(float(score - state.initial_threshold))
        if not state.empirical_fallback or len(state.peaks) >= MIN_EXCESSES:
            _refit_tail(state)
    return state
