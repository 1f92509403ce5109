"""Composite decoding model: trainable encoder and bridge, frozen decoder and visual proxy."""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Tuple

import numpy as np
import torch
import torch.nn as nn

from mind_decoder.dataset import Dataset, FmriSample
from mind_decoder.errors import InvalidArgumentError, ShapeMismatchError
from mind_decoder.modeling.bridge import (
    BridgeConfig,
    CrossAttentionBridge,
    FrozenDecoder,
    GenerationConfig,
    decoder_forward,
    generate,
)
from mind_decoder.modeling.encoder import EncoderConfig, FmriEncoder, class_embedding, encode
from mind_decoder.utils import derive_seed

logger = logging.getLogger(__name__)

PROXY_MODES = ("from_dataset", "frozen_random_map")


@dataclass(kw_only=True)
class ProxyConfig:
    mode: str = field(
        default="from_dataset",
        metadata={"description": "'from_dataset' uses stored proxy embeddings; 'frozen_random_map' maps pooled patches."},
    )

    def __post_init__(self):
        if self.mode not in PROXY_MODES:
            raise InvalidArgumentError(f"proxy mode must be one of {PROXY_MODES}, got {self.mode!r}")


def _orthonormal(rows: int, cols: int, generator: torch.Generator) -> torch.Tensor:
    """rows x cols matrix with orthonormal rows (rows <= cols) or orthonormal columns (rows > cols)."""
    tall = torch.randn(max(rows, cols), min(rows, cols), generator=generator, dtype=torch.float64)
    q, r = torch.linalg.qr(tall)
    q = q * torch.sign(torch.diagonal(r))
    return (q.T if rows <= cols else q).to(torch.float32).contiguous()


class VisualProxy(nn.Module):
    """Frozen image-side target for the class embedding.

    All state lives in buffers, so no optimizer ever sees it. When the proxy dimension differs from
    the encoder size a fixed seeded orthonormal map carries proxies into the encoder space.
    """

    def __init__(self, mode: str, d_proxy: int, embed_dim: int, seed: int):
        super().__init__()
        if mode not in PROXY_MODES:
            raise InvalidArgumentError(f"proxy mode must be one of {PROXY_MODES}, got {mode!r}")
        self.mode = mode
        self.d_proxy = d_proxy
        self.embed_dim = embed_dim
        generator = torch.Generator().manual_seed(derive_seed(seed, "proxy"))
        if d_proxy == embed_dim:
            projection = torch.eye(d_proxy)
        else:
            projection = _orthonormal(d_proxy, embed_dim, generator)
        self.register_buffer("projection", projection)
        image_map = _orthonormal(d_proxy, d_proxy, generator) if mode == "frozen_random_map" else torch.eye(d_proxy)
        self.register_buffer("image_map", image_map)

    def raw_input(self, sample: FmriSample) -> np.ndarray:
        """The per-sample vector the proxy consumes."""
        if self.mode == "from_dataset":
            if sample.proxy_embedding is None:
                raise InvalidArgumentError(f"sample {sample.sample_id} has no proxy embedding")
            return sample.proxy_embedding
        if sample.patch_embeddings is None:
            raise InvalidArgumentError(f"sample {sample.sample_id} has no patch embeddings for the random-map proxy")
        return sample.patch_embeddings.reshape(-1, self.d_proxy).mean(axis=0)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        """Proxy target in encoder space (B x d_proxy -> B x embed_dim)."""
        if raw.shape[-1] != self.d_proxy:
            raise ShapeMismatchError(f"proxy dim {raw.shape[-1]} != declared d_proxy {self.d_proxy}")
        return raw @ self.image_map @ self.projection

    def to_proxy_space(self, embedding: torch.Tensor) -> torch.Tensor:
        """Carry an encoder-space vector back to patch/proxy space (adjoint of ``forward``)."""
        return embedding @ self.projection.T @ self.image_map.T


class ModelOutput(NamedTuple):
    log_probs: torch.Tensor
    hidden: torch.Tensor
    class_embedding: torch.Tensor


class MindDecoderModel(nn.Module):
    """Encoder -> latent -> bridged frozen decoder."""

    def __init__(self, encoder: FmriEncoder, decoder: FrozenDecoder, bridge: CrossAttentionBridge, proxy: VisualProxy):
        super().__init__()
        if bridge.context_dim != encoder.config.embed_dim:
            raise ShapeMismatchError("bridge context dim must equal the encoder embed_dim")
        self.encoder = encoder
        self.decoder = decoder.freeze()
        self.bridge = bridge
        self.proxy = proxy

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.encoder.parameters()
        yield from self.bridge.parameters()

    def forward(self, rois: torch.Tensor, input_ids: torch.Tensor) -> ModelOutput:
        hidden = self.encoder(rois)
        log_probs = decoder_forward(input_ids, hidden, self.decoder, self.bridge)
        return ModelOutput(log_probs, hidden, class_embedding(hidden))


def build_model(
    encoder_config: EncoderConfig,
    bridge_config: BridgeConfig,
    decoder: FrozenDecoder,
    pad_width: int,
    n_tokens: int,
    d_proxy: int,
    proxy_mode: str,
    seed: int,
) -> MindDecoderModel:
    """Randomly initialize encoder and bridge from the ``init`` stream of ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "init"))
        encoder = FmriEncoder(encoder_config, pad_width=pad_width, n_tokens=n_tokens)
        bridge = CrossAttentionBridge(bridge_config, decoder.config, context_dim=encoder_config.embed_dim)
    proxy = VisualProxy(proxy_mode, d_proxy, encoder_config.embed_dim, seed)
    return MindDecoderModel(encoder, decoder, bridge, proxy)


@torch.no_grad()
def decode_dataset(model: MindDecoderModel, dataset: Dataset, config: GenerationConfig) -> List[Tuple[str, str]]:
    """(sample_id, caption text) for every sample, in dataset order."""
    prompt_ids = dataset.vocabulary.encode(config.prompt) if config.prompt else ()
    model.eval()
    rows = []
    for sample in dataset.samples:
        latent = encode(sample.rois, model.encoder)
        tokens = generate(latent, config, model.decoder, model.bridge, prompt_ids)
        rows.append((sample.sample_id, dataset.vocabulary.decode(tokens)))
    logger.info(f"Decoded {len(rows)} {dataset.split} samples with {config.strategy} search")
    return rows
