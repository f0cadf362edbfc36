"""Modality-specific status encoders with asymmetric capacity.

Each modality block hierarchically disentangles dependencies: a depthwise
convolution along time, a pointwise convolution mixing channels within an
instance, and a pointwise convolution mixing instances. Metrics get deeper,
wider blocks than the sparse event modalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float64


@dataclass(frozen=True)
class ModalityEncoderConfig:
    modality: str  # "metric" | "log" | "trace"
    n_channels: int
    kernel: int
    depth: int
    out_dim: int

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel length must be odd and >= 1, got {self.kernel}")
        if self.depth < 1:
            raise ValueError("block depth must be >= 1")
        if self.n_channels < 1 or self.out_dim < 1:
            raise ValueError("channel count and output dim must be >= 1")


def validate_asymmetry(
    metric: ModalityEncoderConfig, log: ModalityEncoderConfig, trace: ModalityEncoderConfig
) -> None:
    """Fail fast unless metrics get strictly more capacity than the event modalities."""
    if metric.depth < log.depth or metric.depth < trace.depth:
        raise ValueError(
            f"metric depth {metric.depth} must be >= log/trace depths "
            f"({log.depth}, {trace.depth})"
        )
    if metric.out_dim <= log.out_dim or metric.out_dim <= trace.out_dim:
        raise ValueError(
            f"metric dim {metric.out_dim} must exceed log/trace dims "
            f"({log.out_dim}, {trace.out_dim})"
        )


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError("encoder input contains non-finite values")


def temporal_conv(
    x: torch.Tensor, kernel: torch.Tensor, residual: bool = True
) -> torch.Tensor:
    """Depthwise 1-D convolution along time with same-length zero padding.

    x: (B, N, K, T); kernel: (K, k) one filter per channel. With the residual
    path the output is x + conv(x).
    """
    _check_finite(x)
    b, n, k, t = x.shape
    weight = kernel[:, None, :]  # (K, 1, k)
    flat = x.reshape(b * n, k, t)
    out = F.conv1d(flat, weight, padding=kernel.shape[1] // 2, groups=k).reshape(b, n, k, t)
    return x + out if residual else out


def channel_conv(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    activation: str | None = "gelu",
    residual: bool = True,
) -> torch.Tensor:
    """Pointwise mixing of channels within each instance, per time step.

    weight: (K, K) so out_channel j = sum_k weight[j, k] * in_channel k.
    """
    _check_finite(x)
    out = torch.einsum("bnkt,jk->bnjt", x, weight) + bias[None, None, :, None]
    if activation == "gelu":
        out = F.gelu(out)
    elif activation is not None:
        raise ValueError(f"unknown activation '{activation}'")
    return x + out if residual else out


def instance_conv(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, residual: bool = True
) -> torch.Tensor:
    """Pointwise mixing of instances per (channel, time step).

    weight: (N, N) so out_instance m = sum_n weight[m, n] * in_instance n.
    """
    _check_finite(x)
    out = torch.einsum("bnkt,mn->bmkt", x, weight) + bias[None, :, None, None]
    return x + out if residual else out


class EncoderBlock(nn.Module):
    """One (temporal -> channel -> instance) disentanglement stage."""

    def __init__(self, n_channels: int, n_instances: int, kernel: int, residual: bool, instance_mixing: bool):
        super().__init__()
        self.residual = residual
        self.instance_mixing = instance_mixing
        self.dw_kernel = nn.Parameter(torch.randn(n_channels, kernel, dtype=DTYPE) * 0.1)
        self.ch_weight = nn.Parameter(torch.randn(n_channels, n_channels, dtype=DTYPE) * 0.02)
        self.ch_bias = nn.Parameter(torch.zeros(n_channels, dtype=DTYPE))
        if instance_mixing:
            self.in_weight = nn.Parameter(torch.randn(n_instances, n_instances, dtype=DTYPE) * 0.02)
            self.in_bias = nn.Parameter(torch.zeros(n_instances, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = temporal_conv(x, self.dw_kernel, residual=self.residual)
        h = channel_conv(h, self.ch_weight, self.ch_bias, residual=self.residual)
        if self.instance_mixing:
            h = instance_conv(h, self.in_weight, self.in_bias, residual=self.residual)
        return h


class ModalityEncoder(nn.Module):
    """Stacked blocks followed by a per-instance flatten + affine projection."""

    def __init__(
        self,
        config: ModalityEncoderConfig,
        n_instances: int,
        window: int,
        residual: bool = True,
        instance_mixing: bool = True,
    ):
        super().__init__()
        self.config = config
        self.window = window
        self.blocks = nn.ModuleList(
            EncoderBlock(config.n_channels, n_instances, config.kernel, residual, instance_mixing)
            for _ in range(config.depth)
        )
        self.proj = nn.Linear(config.n_channels * window, config.out_dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N, K_k, T) -> (B, N, d_k)."""
        b, n, k, t = x.shape
        if k != self.config.n_channels or t != self.window:
            raise ValueError(
                f"expected (*, *, {self.config.n_channels}, {self.window}) input, got {tuple(x.shape)}"
            )
        h = x
        for block in self.blocks:
            h = block(h)
        return self.proj(h.reshape(b, n, k * t))
