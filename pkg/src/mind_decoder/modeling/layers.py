"""Transformer building blocks shared by the fMRI encoder, the frozen decoder and the bridge."""

from typing import Optional

import torch
import torch.nn as nn
from einops import rearrange


class MLP(nn.Module):
    def __init__(self, dim: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.dropout(self.gelu(self.fc1(x)))
        return self.dropout(self.fc2(x))


class MultiHeadAttention(nn.Module):
    """Multi-head attention with an explicit per-head dimension.

    Keys and values come from ``context`` (cross-attention) or from the input itself.
    """

    def __init__(
        self,
        dim: int,
        n_heads: int,
        head_dim: int,
        context_dim: Optional[int] = None,
        dropout: float = 0.0,
    ):
        super().__init__()
        inner_dim = n_heads * head_dim
        context_dim = context_dim or dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.scale = head_dim ** -0.5

        self.to_q = nn.Linear(dim, inner_dim)
        self.to_k = nn.Linear(context_dim, inner_dim)
        self.to_v = nn.Linear(context_dim, inner_dim)
        self.to_out = nn.Linear(inner_dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        causal: bool = False,
    ) -> torch.Tensor:
        context = x if context is None else context
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.n_heads)
        k = rearrange(self.to_k(context), "b m (h d) -> b h m d", h=self.n_heads)
        v = rearrange(self.to_v(context), "b m (h d) -> b h m d", h=self.n_heads)

        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if causal:
            n, m = dots.shape[-2:]
            future = torch.ones(n, m, dtype=torch.bool, device=dots.device).triu(1)
            dots = dots.masked_fill(future, float("-inf"))

        attn = self.dropout(dots.softmax(dim=-1))
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class TransformerBlock(nn.Module):
    """Pre-norm block; ``attend`` and ``feed_forward`` are exposed so a bridge can sit between them."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads=n_heads, head_dim=dim // n_heads, dropout=dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dropout=dropout)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.attn(self.norm1(x), causal=self.causal)

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.mlp(self.norm2(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.feed_forward(self.attend(x))


def block_param_count(dim: int, mlp_ratio: float) -> int:
    """Closed-form parameter count of one ``TransformerBlock``."""
    hidden = int(dim * mlp_ratio)
    norms = 2 * (2 * dim)
    attention = 4 * (dim * dim + dim)
    mlp = dim * hidden + hidden + hidden * dim + dim
    return norms + attention + mlp


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
