"""Trainable transformer encoder mapping ROI sequences to latent representations.

Row 0 of the output is the class embedding used for visual-proxy alignment; rows 1..T
are the ROI tokens in input order.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import repeat

from mind_decoder.dataset import ROISequence
from mind_decoder.errors import InvalidArgumentError, NonFiniteValueError, ShapeMismatchError
from mind_decoder.modeling.layers import TransformerBlock, block_param_count, init_weights

logger = logging.getLogger(__name__)

# (layers, heads) per variant tag at full scale (embed 768) and desk scale.
ENCODER_VARIANTS: Dict[str, Tuple[int, int]] = {"S": (4, 4), "B": (8, 8), "L": (16, 16)}
DESK_ENCODER_VARIANTS: Dict[str, Tuple[int, int]] = {"S": (1, 2), "B": (2, 4), "L": (3, 8)}


@dataclass(kw_only=True)
class EncoderConfig:
    """Shape of the fMRI encoder."""

    embed_dim: int = field(default=64, metadata={"description": "Token embedding size."})
    n_layers: int = field(default=2, metadata={"description": "Number of transformer blocks."})
    n_heads: int = field(default=4, metadata={"description": "Self-attention heads per block."})
    mlp_ratio: float = field(default=4.0, metadata={"description": "MLP hidden size relative to embed_dim."})
    dropout: float = field(default=0.0, metadata={"description": "Dropout probability in [0, 1)."})
    final_norm: bool = field(default=True, metadata={"description": "Apply a LayerNorm before reading [.]0."})
    variant: Optional[str] = field(default=None, metadata={"description": "Variant tag S, B or L, if any."})

    def __post_init__(self):
        if self.n_layers < 1:
            raise InvalidArgumentError(f"encoder needs at least one layer, got {self.n_layers}")
        if self.n_heads < 1 or self.embed_dim % self.n_heads != 0:
            raise InvalidArgumentError(
                f"embed_dim {self.embed_dim} must be divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mlp_ratio <= 0:
            raise InvalidArgumentError("mlp_ratio must be positive")
        if self.variant is not None and self.variant not in ENCODER_VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {tuple(ENCODER_VARIANTS)}")

    @classmethod
    def from_variant(cls, variant: str, desk_scale: bool = True, **overrides) -> "EncoderConfig":
        """S/B/L encoder; full scale uses embed_dim 768."""
        table = DESK_ENCODER_VARIANTS if desk_scale else ENCODER_VARIANTS
        if variant not in table:
            raise InvalidArgumentError(f"variant must be one of {tuple(table)}, got {variant!r}")
        n_layers, n_heads = table[variant]
        params = {"embed_dim": 64 if desk_scale else 768, "n_layers": n_layers, "n_heads": n_heads, "variant": variant}
        params.update(overrides)
        return cls(**params)


class FmriEncoder(nn.Module):
    """Linear ROI projection, learned class token and positions, pre-norm transformer blocks."""

    def __init__(self, config: EncoderConfig, pad_width: int, n_tokens: int):
        super().__init__()
        self.config = config
        self.pad_width = pad_width
        self.n_tokens = n_tokens
        dim = config.embed_dim

        self.token_projection = nn.Linear(pad_width, dim, bias=False)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embedding = nn.Parameter(torch.zeros(1, n_tokens + 1, dim))
        self.dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList([
            TransformerBlock(dim, config.n_heads, config.mlp_ratio, config.dropout)
            for _ in range(config.n_layers)
        ])
        self.norm = nn.LayerNorm(dim) if config.final_norm else nn.Identity()

        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, mean=0.0, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=0.02)

    def project_rois(self, values: torch.Tensor) -> torch.Tensor:
        """Project each ROI row (B x T x H) to the embedding size."""
        if values.shape[-1] != self.pad_width:
            raise ShapeMismatchError(f"ROI width mismatch: expected H={self.pad_width}, got {values.shape[-1]}")
        if values.shape[-2] != self.n_tokens:
            raise ShapeMismatchError(f"ROI token mismatch: expected T={self.n_tokens}, got {values.shape[-2]}")
        return self.token_projection(values)

    def embed_rois(self, values: torch.Tensor) -> torch.Tensor:
        """Prepend the class token and add positions: (B x T x H) -> (B x T+1 x D)."""
        tokens = self.project_rois(values)
        cls_tokens = repeat(self.cls_token, "1 1 d -> b 1 d", b=tokens.shape[0])
        return torch.cat((cls_tokens, tokens), dim=1) + self.pos_embedding

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        x = self.dropout(self.embed_rois(values))
        for index, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NonFiniteValueError(f"non-finite activation after encoder layer {index}")
        return self.norm(x)


def class_embedding(hidden: torch.Tensor) -> torch.Tensor:
    """Return row 0 ([.]0) of a latent representation, batched or not."""
    return hidden[..., 0, :]


def rois_to_tensor(rois: ROISequence, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(rois.values, dtype=np.float32)).to(dtype)


def encode(z: ROISequence, encoder: FmriEncoder) -> torch.Tensor:
    """Encode one ROI sequence into its (T+1) x D latent representation."""
    dtype = next(encoder.parameters()).dtype
    return encoder(rois_to_tensor(z, dtype).unsqueeze(0))[0]


def count_encoder_params(config: EncoderConfig, pad_width: int, n_tokens: int) -> int:
    """Closed-form parameter count of ``FmriEncoder``."""
    dim = config.embed_dim
    total = pad_width * dim + dim + (n_tokens + 1) * dim
    total += config.n_layers * block_param_count(dim, config.mlp_ratio)
    if config.final_norm:
        total += 2 * dim
    return total
