"""End-to-end network: masked window in, next-step prediction and latent state out."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .core import ChannelLayout, ServiceGraph
from .encoder import DTYPE, ModalityEncoder, ModalityEncoderConfig, validate_asymmetry
from .fusion import (
    CrossModalAttention,
    GatedFusion,
    GraphPropagator,
    TokenProjector,
    build_adjacency,
    mask_adjust,
    mean_fuse,
)

PLACEHOLDERS = ("learned", "zero")
FUSIONS = ("gated", "mean")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the desk-scale setup."""

    n_instances: int
    n_metric: int
    n_log: int
    n_trace: int
    window: int = 6
    metric_depth: int = 3
    event_depth: int = 1
    metric_kernel: int = 5
    event_kernel: int = 3
    metric_dim: int = 64
    event_dim: int = 32
    token_dim: int = 32
    mha_heads: int = 4
    gat_heads: int = 2
    gat_layers: int = 2
    latent_dim: int = 32
    head_hidden: int = 32
    dropout: float = 0.1
    residual: bool = True
    instance_mixing: bool = True
    placeholder: str = "learned"
    fusion: str = "gated"

    def __post_init__(self):
        if self.placeholder not in PLACEHOLDERS:
            raise ValueError(f"placeholder must be one of {PLACEHOLDERS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        validate_asymmetry(*self.encoder_configs())
        if self.token_dim % self.mha_heads != 0:
            raise ValueError("token_dim must be divisible by mha_heads")

    @property
    def layout(self) -> ChannelLayout:
        return ChannelLayout(self.n_metric, self.n_log, self.n_trace)

    @property
    def n_channels(self) -> int:
        return self.n_metric + self.n_log + self.n_trace

    def encoder_configs(self) -> tuple[ModalityEncoderConfig, ModalityEncoderConfig, ModalityEncoderConfig]:
        return (
            ModalityEncoderConfig("metric", self.n_metric, self.metric_kernel, self.metric_depth, self.metric_dim),
            ModalityEncoderConfig("log", self.n_log, self.event_kernel, self.event_depth, self.event_dim),
            ModalityEncoderConfig("trace", self.n_trace, self.event_kernel, self.event_depth, self.event_dim),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PredictionHead(nn.Module):
    """Two affine maps with a smooth nonlinearity: latent state -> next-step channels."""

    def __init__(self, latent_dim: int, hidden: int, n_channels: int):
        super().__init__()
        self.fc1 = nn.Linear(latent_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, n_channels, dtype=DTYPE)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(z)))


class DiagnosisNetwork(nn.Module):
    """Asymmetric encoders, missing-aware fusion, graph propagation and the
    next-step prediction head, assembled over one service topology."""

    def __init__(self, config: ModelConfig, graph: ServiceGraph):
        super().__init__()
        if graph.n_instances != config.n_instances:
            raise ValueError(
                f"graph has {graph.n_instances} instances, config expects {config.n_instances}"
            )
        self.config = config
        m_cfg, l_cfg, t_cfg = config.encoder_configs()
        self.enc_metric = ModalityEncoder(m_cfg, config.n_instances, config.window, config.residual, config.instance_mixing)
        self.enc_log = ModalityEncoder(l_cfg, config.n_instances, config.window, config.residual, config.instance_mixing)
        self.enc_trace = ModalityEncoder(t_cfg, config.n_instances, config.window, config.residual, config.instance_mixing)
        self.projector = TokenProjector((config.metric_dim, config.event_dim, config.event_dim), config.token_dim)
        self.e_miss = nn.Parameter(torch.randn(config.token_dim, dtype=DTYPE) * 0.02)
        self.e_mod = nn.Parameter(torch.randn(3, config.token_dim, dtype=DTYPE) * 0.02)
        self.attention = CrossModalAttention(config.token_dim, config.mha_heads, config.dropout)
        self.gate = GatedFusion(config.token_dim)
        self.propagator = GraphPropagator(
            config.token_dim, config.latent_dim, config.gat_heads, config.gat_layers, config.dropout
        )
        self.head = PredictionHead(config.latent_dim, config.head_hidden, config.n_channels)
        self.register_buffer("adj", build_adjacency(graph), persistent=False)
        self.register_buffer(
            "channel_modality",
            torch.as_tensor(config.layout.channel_modalities()),
            persistent=False,
        )

    def channel_bits(self, mask_bits: torch.Tensor) -> torch.Tensor:
        """Broadcast per-modality bits (B, 3) to per-channel bits (B, K)."""
        return mask_bits[:, self.channel_modality]

    def forward(
        self, x: torch.Tensor, mask_bits: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """x: (B, N, K, T) normalized windows; mask_bits: (B, 3) in {0, 1}.

        Returns (x_hat (B, N, K), z (B, N, latent_dim), alpha (B, 3, N)).
        Channels of missing modalities are zeroed here, so the output is
        invariant to whatever values they carried upstream.
        """
        layout = self.config.layout
        x = x * self.channel_bits(mask_bits)[:, None, :, None]
        h_m = self.enc_metric(x[:, :, layout.metric_slice, :])
        h_l = self.enc_log(x[:, :, layout.log_slice, :])
        h_t = self.enc_trace(x[:, :, layout.trace_slice, :])
        tokens = self.projector(h_m, h_l, h_t)
        e_miss = self.e_miss if self.config.placeholder == "learned" else None
        tokens = mask_adjust(tokens, mask_bits, e_miss, self.e_mod)
        enriched = self.attention(tokens)
        if self.config.fusion == "gated":
            fused, alpha = self.gate(enriched, mask_bits)
        else:
            fused, alpha = mean_fuse(enriched)
        z = self.propagator(fused, self.adj)
        return self.head(z), z, alpha


def build_network(config: ModelConfig, graph: ServiceGraph, seed: int | None = None) -> DiagnosisNetwork:
    """Construct a network with seeded parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return DiagnosisNetwork(config, graph)
