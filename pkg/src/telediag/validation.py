"""Input validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.exceptions import NotFittedError

from .core import ChannelLayout, GraphError, ObservationMask, ServiceGraph, validate_graph


def check_is_fitted(estimator, attributes: Sequence[str]) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet (missing {', '.join(missing)}); "
            "call fit before using this method"
        )


def check_series(values, n_instances: int | None = None) -> np.ndarray:
    """Validate an aligned raw series of shape (N, K, L) and return it as float64."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"aligned series must be 3-D (N, K, L), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("aligned series contains non-finite values")
    if n_instances is not None and arr.shape[0] != n_instances:
        raise ValueError(f"series has {arr.shape[0]} instances, expected {n_instances}")
    return arr


def check_layout(layout: ChannelLayout, n_channels: int) -> ChannelLayout:
    if layout.total != n_channels:
        raise ValueError(f"layout covers {layout.total} channels, series has {n_channels}")
    return layout


def check_mask(mask) -> ObservationMask:
    if isinstance(mask, ObservationMask):
        return mask
    return ObservationMask.from_bits(tuple(mask))


def check_graph(graph: ServiceGraph | None, n_instances: int) -> ServiceGraph:
    """Default to an edgeless topology when none is given."""
    if graph is None:
        return ServiceGraph(n_instances=n_instances, edges=())
    try:
        validate_graph(graph, n_instances)
    except GraphError as exc:
        raise ValueError(str(exc)) from exc
    return graph
