"""Missing-aware global fusion: placeholder tokens, cross-modal attention,
negatively-biased gating, and topology-aware graph attention."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .core import ServiceGraph
from .encoder import DTYPE

LEAKY_SLOPE = 0.2
LAYERNORM_EPS = 1e-5


class TokenProjector(nn.Module):
    """Affine maps taking the three unimodal embeddings to one shared width d."""

    def __init__(self, dims: tuple[int, int, int], token_dim: int):
        super().__init__()
        self.proj = nn.ModuleList(nn.Linear(d_k, token_dim, dtype=DTYPE) for d_k in dims)

    def forward(self, h_metric: torch.Tensor, h_log: torch.Tensor, h_trace: torch.Tensor) -> torch.Tensor:
        """Each input (B, N, d_k) -> token sequence (B, 3, N, d), order (M, L, T)."""
        return torch.stack(
            [self.proj[0](h_metric), self.proj[1](h_log), self.proj[2](h_trace)], dim=1
        )


def mask_adjust(
    tokens: torch.Tensor,
    mask_bits: torch.Tensor,
    e_miss: torch.Tensor | None,
    e_mod: torch.Tensor,
) -> torch.Tensor:
    """Substitute a placeholder for absent modality tokens and add modality identity.

    v'_k = o_k * v_k + (1 - o_k) * e_miss + e_mod_k, broadcast over instances.
    Passing ``e_miss=None`` selects the static zero placeholder instead of the
    learned one (the degraded variant used as an ablation baseline).

    tokens: (B, 3, N, d); mask_bits: (B, 3); e_miss: (d,); e_mod: (3, d).
    """
    o = mask_bits[:, :, None, None]  # (B, 3, 1, 1)
    out = o * tokens
    if e_miss is not None:
        out = out + (1.0 - o) * e_miss[None, None, None, :]
    return out + e_mod[None, :, None, :]


class CrossModalAttention(nn.Module):
    """Multi-head self-attention over the three modality tokens of each instance,
    followed by a residual add and layer normalization."""

    def __init__(self, token_dim: int, heads: int, dropout: float):
        super().__init__()
        if token_dim % heads != 0:
            raise ValueError(f"token dim {token_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = token_dim // heads
        self.wq = nn.Linear(token_dim, token_dim, dtype=DTYPE)
        self.wk = nn.Linear(token_dim, token_dim, dtype=DTYPE)
        self.wv = nn.Linear(token_dim, token_dim, dtype=DTYPE)
        self.wo = nn.Linear(token_dim, token_dim, dtype=DTYPE)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(token_dim, eps=LAYERNORM_EPS, dtype=DTYPE)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, 3, N, d) -> (B, 3, N, d), attending across the 3-token axis."""
        b, s, n, d = tokens.shape
        x = tokens.permute(0, 2, 1, 3).reshape(b * n, s, d)  # (B*N, 3, d)
        q = self._split(self.wq(x))
        k = self._split(self.wk(x))
        v = self._split(self.wv(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b * n, s, d)
        out = x + self.dropout(self.wo(mixed))
        out = self.norm(out)
        return out.reshape(b, n, s, d).permute(0, 2, 1, 3)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        bn, s, d = x.shape
        return x.reshape(bn, s, self.heads, self.head_dim).transpose(1, 2)


class GatedFusion(nn.Module):
    """Per-instance softmax gate over the enriched modality tokens.

    Missing modalities receive a strictly negative routing bias
    b_k = -softplus(theta_k), so their gate weight shrinks as theta grows.
    """

    def __init__(self, token_dim: int):
        super().__init__()
        self.w_s = nn.Linear(token_dim, 1, bias=False, dtype=DTYPE)
        self.theta = nn.Parameter(torch.zeros(3, dtype=DTYPE))

    @property
    def missing_bias(self) -> torch.Tensor:
        return -F.softplus(self.theta)

    def forward(self, tokens: torch.Tensor, mask_bits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """tokens (B, 3, N, d), mask_bits (B, 3) -> fused (B, N, d), weights (B, 3, N)."""
        logits = self.w_s(tokens).squeeze(-1)  # (B, 3, N)
        bias = self.missing_bias  # (3,)
        logits = logits + ((1.0 - mask_bits) * bias[None, :])[:, :, None]
        alpha = torch.softmax(logits, dim=1)
        fused = (alpha[:, :, :, None] * tokens).sum(dim=1)
        return fused, alpha


def mean_fuse(tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Unweighted token mean, the gate-free ablation baseline."""
    b, s, n, _ = tokens.shape
    alpha = torch.full((b, s, n), 1.0 / s, dtype=tokens.dtype)
    return tokens.mean(dim=1), alpha


def build_adjacency(graph: ServiceGraph) -> torch.Tensor:
    """Dense neighborhood mask: adj[i, j] is True when j feeds messages to i.

    Messages flow along stored edge direction (an edge (j, i) makes j a
    neighbor of i); self-loops are added here, never stored in the graph.
    """
    n = graph.n_instances
    adj = torch.eye(n, dtype=torch.bool)
    for src, dst in graph.edges:
        adj[dst, src] = True
    return adj


class GraphAttentionLayer(nn.Module):
    """Multi-head additive graph attention over a fixed dense neighborhood mask.

    Per head c: e_ij = LeakyReLU(a_dst_c . (W_c z_i) + a_src_c . (W_c z_j)),
    softmax-normalized over j in N(i) + {i}; aggregated values are averaged
    over heads and passed through an ELU.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        scale = 1.0 / math.sqrt(in_dim)
        self.weight = nn.Parameter(torch.randn(heads, out_dim, in_dim, dtype=DTYPE) * scale)
        self.a_src = nn.Parameter(torch.randn(heads, out_dim, dtype=DTYPE) * scale)
        self.a_dst = nn.Parameter(torch.randn(heads, out_dim, dtype=DTYPE) * scale)
        self.feat_drop = nn.Dropout(dropout)
        self.attn_drop = nn.Dropout(dropout)

    def forward(self, z: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        """z: (B, N, in_dim), adj: (N, N) bool -> (B, N, out_dim)."""
        z = self.feat_drop(z)
        projected = torch.einsum("bni,hoi->bhno", z, self.weight)  # (B, H, N, out)
        src_score = (projected * self.a_src[None, :, None, :]).sum(-1)  # (B, H, N)
        dst_score = (projected * self.a_dst[None, :, None, :]).sum(-1)
        scores = dst_score[:, :, :, None] + src_score[:, :, None, :]  # (B, H, i, j)
        scores = F.leaky_relu(scores, negative_slope=LEAKY_SLOPE)
        scores = scores.masked_fill(~adj[None, None, :, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.attn_drop(attn)
        out = torch.einsum("bhij,bhjo->bhio", attn, projected)
        return F.elu(out.mean(dim=1))


class GraphPropagator(nn.Module):
    """Stack of graph attention layers propagating fused features over the topology."""

    def __init__(self, in_dim: int, out_dim: int, heads: int, layers: int, dropout: float):
        super().__init__()
        if layers < 1:
            raise ValueError("need at least one propagation layer")
        dims = [in_dim] + [out_dim] * layers
        self.layers = nn.ModuleList(
            GraphAttentionLayer(dims[i], dims[i + 1], heads, dropout) for i in range(layers)
        )

    def forward(self, z: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            z = layer(z, adj)
        return z
