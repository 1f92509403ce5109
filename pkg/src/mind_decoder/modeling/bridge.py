"""Frozen autoregressive decoder bridged to encoder outputs by trainable cross-attention.

Each decoder layer runs causal self-attention, then the bridge's cross-attention over the
latent representation (residual, zero-initialized output projection), then its MLP.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from mind_decoder.dataset import BOS_ID, EOS_ID, SPECIAL_TOKENS
from mind_decoder.errors import InvalidArgumentError, ShapeMismatchError, UnknownTokenError
from mind_decoder.modeling.encoder import EncoderConfig, count_encoder_params
from mind_decoder.modeling.layers import MultiHeadAttention, TransformerBlock, init_weights

logger = logging.getLogger(__name__)

GENERATION_STRATEGIES = ("greedy", "beam")


@dataclass(kw_only=True)
class DecoderConfig:
    """Shape of the frozen decoder-only language model."""

    vocab_size: int = field(default=64, metadata={"description": "Vocabulary size including reserved ids."})
    embed_dim: int = field(default=64, metadata={"description": "Decoder hidden size."})
    n_layers: int = field(default=4, metadata={"description": "Decoder depth; one bridge layer per decoder layer."})
    n_heads: int = field(default=4, metadata={"description": "Self-attention heads."})
    max_seq_len: int = field(default=32, metadata={"description": "Longest BOS + prompt + caption sequence."})
    mlp_ratio: float = field(default=4.0, metadata={"description": "MLP hidden size relative to embed_dim."})
    dropout: float = field(default=0.0, metadata={"description": "Dropout used during LM pre-training."})

    def __post_init__(self):
        if self.vocab_size < len(SPECIAL_TOKENS) + 1:
            raise InvalidArgumentError(f"vocab_size must be >= {len(SPECIAL_TOKENS) + 1}, got {self.vocab_size}")
        if self.n_layers < 1 or self.n_heads < 1 or self.embed_dim % self.n_heads != 0:
            raise InvalidArgumentError("decoder needs >= 1 layer and embed_dim divisible by n_heads")
        if self.max_seq_len < 2:
            raise InvalidArgumentError("max_seq_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")


@dataclass(kw_only=True)
class BridgeConfig:
    """Cross-attention bridge; the per-head projection size is base_head_dim / scaling_factor."""

    scaling_factor: int = field(default=8, metadata={"description": "Scaling factor N (4, 8 or 16 in the grid)."})
    n_heads: int = field(default=4, metadata={"description": "Cross-attention heads per decoder layer."})
    base_head_dim: int = field(default=64, metadata={"description": "Default per-head projection size."})

    def __post_init__(self):
        if self.scaling_factor < 1 or self.base_head_dim % self.scaling_factor != 0:
            raise InvalidArgumentError(
                f"scaling factor N={self.scaling_factor} must divide the base head size {self.base_head_dim}"
            )
        if self.n_heads < 1:
            raise InvalidArgumentError("bridge needs at least one head")

    @property
    def head_dim(self) -> int:
        return self.base_head_dim // self.scaling_factor


@dataclass(kw_only=True)
class GenerationConfig:
    """Decoding strategy and prompt."""

    strategy: str = field(default="greedy", metadata={"description": "'greedy' or 'beam'."})
    beam_width: int = field(default=3, metadata={"description": "Beam width when strategy is 'beam'."})
    max_new_tokens: int = field(default=20, metadata={"description": "Generation budget excluding EOS."})
    prompt: str = field(default="", metadata={"description": "Prompt text placed after BOS; empty means BOS only."})

    def __post_init__(self):
        if self.strategy not in GENERATION_STRATEGIES:
            raise InvalidArgumentError(f"strategy must be one of {GENERATION_STRATEGIES}")
        if self.beam_width < 1:
            raise InvalidArgumentError("beam width must be >= 1")
        if self.max_new_tokens < 0:
            raise InvalidArgumentError("max_new_tokens must be >= 0")


class CrossAttentionLayer(nn.Module):
    def __init__(self, dim: int, context_dim: int, config: BridgeConfig):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads=config.n_heads, head_dim=config.head_dim, context_dim=context_dim)

    def forward(self, x: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        return self.attn(self.norm(x), context=latent)


class CrossAttentionBridge(nn.Module):
    """One cross-attention layer per decoder layer, attending to all T+1 latent rows."""

    def __init__(self, config: BridgeConfig, decoder_config: DecoderConfig, context_dim: int):
        super().__init__()
        self.config = config
        self.context_dim = context_dim
        self.layers = nn.ModuleList([
            CrossAttentionLayer(decoder_config.embed_dim, context_dim, config)
            for _ in range(decoder_config.n_layers)
        ])
        self.apply(init_weights)
        self.zero_output_projections()

    def zero_output_projections(self) -> None:
        """Make every layer contribute exactly zero, recovering the unbridged decoder."""
        with torch.no_grad():
            for layer in self.layers:
                layer.attn.to_out.weight.zero_()
                layer.attn.to_out.bias.zero_()


class FrozenDecoder(nn.Module):
    """Tiny GPT-style decoder; frozen after pre-training."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.frozen = False
        self.token_embedding = nn.Embedding(config.vocab_size, config.embed_dim)
        self.pos_embedding = nn.Parameter(torch.zeros(1, config.max_seq_len, config.embed_dim))
        self.dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList([
            TransformerBlock(config.embed_dim, config.n_heads, config.mlp_ratio, config.dropout, causal=True)
            for _ in range(config.n_layers)
        ])
        self.norm = nn.LayerNorm(config.embed_dim)
        self.lm_head = nn.Linear(config.embed_dim, config.vocab_size, bias=False)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=0.02)

    def freeze(self) -> "FrozenDecoder":
        self.requires_grad_(False)
        self.frozen = True
        return self.train(False)

    def train(self, mode: bool = True):
        return super().train(mode and not self.frozen)

    def forward(
        self,
        ids: torch.Tensor,
        latent: Optional[torch.Tensor] = None,
        bridge: Optional[CrossAttentionBridge] = None,
    ) -> torch.Tensor:
        """Next-token logits (B x L x V); the bridge is applied when both it and a latent are given."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            bad = sorted({int(t) for t in ids.flatten() if t < 0 or t >= self.config.vocab_size})
            raise UnknownTokenError(f"token ids {bad} outside vocabulary of size {self.config.vocab_size}")
        if ids.shape[1] > self.config.max_seq_len:
            raise InvalidArgumentError(f"prefix length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        use_bridge = bridge is not None and latent is not None
        if use_bridge:
            if latent.dim() == 2:
                latent = latent.unsqueeze(0)
            if latent.shape[-1] != bridge.context_dim:
                raise ShapeMismatchError(f"latent dim {latent.shape[-1]} != bridge context dim {bridge.context_dim}")
            if latent.shape[0] != ids.shape[0]:
                latent = latent.expand(ids.shape[0], -1, -1)

        x = self.dropout(self.token_embedding(ids) + self.pos_embedding[:, : ids.shape[1]])
        for index, block in enumerate(self.blocks):
            x = block.attend(x)
            if use_bridge:
                x = x + bridge.layers[index](x, latent)
            x = block.feed_forward(x)
        return self.lm_head(self.norm(x))


def decoder_forward(
    prefix: torch.Tensor,
    latent: Optional[torch.Tensor],
    decoder: FrozenDecoder,
    bridge: Optional[CrossAttentionBridge],
) -> torch.Tensor:
    """Per-position next-token log-probabilities conditioned on the latent representation."""
    return F.log_softmax(decoder(prefix, latent, bridge), dim=-1)


#######################################
# Generation
#######################################

class GenerationResult(NamedTuple):
    tokens: Tuple[int, ...]
    log_prob: float
    ended: bool


def _next_log_probs(sequence: List[int], latent, decoder, bridge) -> torch.Tensor:
    ids = torch.tensor([sequence], dtype=torch.long)
    return decoder_forward(ids, latent, decoder, bridge)[0, -1]


def _budget(prefix: Sequence[int], config: GenerationConfig, decoder: FrozenDecoder) -> int:
    # the sequence fed to the decoder never exceeds max_seq_len
    return max(0, min(config.max_new_tokens, decoder.config.max_seq_len - len(prefix)))


def _greedy(prefix: List[int], budget: int, latent, decoder, bridge) -> GenerationResult:
    tokens: List[int] = []
    score = 0.0
    for _ in range(budget):
        log_probs = _next_log_probs(prefix + tokens, latent, decoder, bridge)
        token = int(torch.argmax(log_probs))
        score += float(log_probs[token])
        if token == EOS_ID:
            return GenerationResult(tuple(tokens), score, True)
        tokens.append(token)
    return GenerationResult(tuple(tokens), score, False)


def _beam(prefix: List[int], budget: int, width: int, latent, decoder, bridge) -> GenerationResult:
    alive: List[Tuple[float, List[int]]] = [(0.0, [])]
    finished: List[GenerationResult] = []
    for _ in range(budget):
        scores = []
        for score, tokens in alive:
            log_probs = _next_log_probs(prefix + tokens, latent, decoder, bridge).double()
            scores.append(score + log_probs)
        flat = torch.stack(scores).flatten()
        # stable descending sort keeps the lowest (beam, token) index first among ties, like argmax
        order = torch.sort(flat, descending=True, stable=True).indices[:width]
        vocab = scores[0].shape[0]
        next_alive = []
        for index in order.tolist():
            beam, token = divmod(index, vocab)
            tokens = alive[beam][1]
            total = float(flat[index])
            if token == EOS_ID:
                finished.append(GenerationResult(tuple(tokens), total, True))
            else:
                next_alive.append((total, tokens + [token]))
        alive = next_alive
        if not alive or len(finished) >= width:
            break
    # hypotheses that used the whole budget without emitting EOS
    finished.extend(GenerationResult(tuple(tokens), score, False) for score, tokens in alive
                    if len(tokens) == budget)
    if not finished:
        return GenerationResult((), 0.0, False)
    best = finished[0]
    for candidate in finished[1:]:
        if candidate.log_prob > best.log_prob:
            best = candidate
    return best


@torch.no_grad()
def generate_with_score(
    latent: torch.Tensor,
    config: GenerationConfig,
    decoder: FrozenDecoder,
    bridge: Optional[CrossAttentionBridge],
    prompt_ids: Sequence[int] = (),
) -> GenerationResult:
    """Decode one latent; the result excludes BOS, the prompt and EOS."""
    prefix = [BOS_ID] + [int(t) for t in prompt_ids]
    budget = _budget(prefix, config, decoder)
    if budget == 0:
        return GenerationResult((), 0.0, False)
    if config.strategy == "greedy":
        return _greedy(prefix, budget, latent, decoder, bridge)
    return _beam(prefix, budget, config.beam_width, latent, decoder, bridge)


def generate(
    latent: torch.Tensor,
    config: GenerationConfig,
    decoder: FrozenDecoder,
    bridge: Optional[CrossAttentionBridge],
    prompt_ids: Sequence[int] = (),
) -> Tuple[int, ...]:
    return generate_with_score(latent, config, decoder, bridge, prompt_ids).tokens


@torch.no_grad()
def score_sequence(
    latent: Optional[torch.Tensor],
    tokens: Sequence[int],
    decoder: FrozenDecoder,
    bridge: Optional[CrossAttentionBridge],
    prompt_ids: Sequence[int] = (),
    include_eos: bool = True,
) -> float:
    """Log-probability of a continuation after BOS + prompt, optionally terminated by EOS."""
    prefix = [BOS_ID] + [int(t) for t in prompt_ids]
    targets = [int(t) for t in tokens] + ([EOS_ID] if include_eos else [])
    if not targets:
        return 0.0
    ids = torch.tensor([prefix + targets[:-1]], dtype=torch.long)
    log_probs = decoder_forward(ids, latent, decoder, bridge)[0]
    positions = range(len(prefix) - 1, len(prefix) - 1 + len(targets))
    return float(sum(float(log_probs[p, t]) for p, t in zip(positions, targets)))


#######################################
# Parameter accounting
#######################################

def count_bridge_params(config: BridgeConfig, decoder_config: DecoderConfig, context_dim: int) -> int:
    """Closed-form parameter count of ``CrossAttentionBridge``."""
    dim = decoder_config.embed_dim
    inner = config.n_heads * config.head_dim
    per_layer = 2 * dim                      # layer norm
    per_layer += dim * inner + inner         # query
    per_layer += 2 * (context_dim * inner + inner)  # key, value
    per_layer += inner * dim + dim           # output
    return decoder_config.n_layers * per_layer


def count_trainable_params(
    encoder_config: EncoderConfig,
    bridge_config: BridgeConfig,
    decoder_config: DecoderConfig,
    pad_width: int,
    n_tokens: int = 7,
) -> int:
    """Encoder plus bridge parameters; the frozen decoder and visual proxy are excluded."""
    return (
        count_encoder_params(encoder_config, pad_width, n_tokens)
        + count_bridge_params(bridge_config, decoder_config, encoder_config.embed_dim)
    )
