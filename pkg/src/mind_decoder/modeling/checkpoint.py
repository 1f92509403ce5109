"""Checkpoint format: ``header.json`` describing named tensors stored in ``tensors.bin``.

Tensors are little-endian float32, concatenated in header order; the header also carries the
model configs and the fingerprint of the data the weights were fitted on.
"""

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Mapping, NamedTuple, Optional, Union

import numpy as np
import torch

from mind_decoder.errors import MissingArtifactError, ShapeMismatchError, VocabularyMismatchError
from mind_decoder.modeling.bridge import BridgeConfig, CrossAttentionBridge, DecoderConfig, FrozenDecoder
from mind_decoder.modeling.encoder import EncoderConfig, FmriEncoder
from mind_decoder.modeling.model import MindDecoderModel, VisualProxy
from mind_decoder.utils import write_json

logger = logging.getLogger(__name__)

HEADER_NAME = "header.json"
TENSORS_NAME = "tensors.bin"
TENSOR_DTYPE = np.dtype("<f4")


class Checkpoint(NamedTuple):
    header: Dict[str, Any]
    tensors: Dict[str, torch.Tensor]


def save_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, torch.Tensor],
    *,
    kind: str,
    config: Mapping[str, Any],
    fingerprint: str = "",
    frozen: bool = False,
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / TENSORS_NAME, "wb") as f:
        for name, tensor in tensors.items():
            array = tensor.detach().cpu().numpy().astype(TENSOR_DTYPE)
            payload = np.ascontiguousarray(array).tobytes()
            f.write(payload)
            entries.append({"name": name, "shape": list(array.shape), "offset": offset, "length": int(array.size)})
            offset += len(payload)
    write_json(path / HEADER_NAME, {
        "kind": kind,
        "config": dict(config),
        "fingerprint": fingerprint,
        "frozen": frozen,
        "tensors": entries,
        **(dict(extra) if extra else {}),
    })
    logger.info(f"Saved {kind} checkpoint with {len(entries)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not (path / HEADER_NAME).is_file() or not (path / TENSORS_NAME).is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    header = json.loads((path / HEADER_NAME).read_text(encoding="utf-8"))
    blob = (path / TENSORS_NAME).read_bytes()
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["length"] * TENSOR_DTYPE.itemsize
        if end > len(blob):
            raise ShapeMismatchError(f"checkpoint {path}: tensor {entry['name']} runs past the end of {TENSORS_NAME}")
        array = np.frombuffer(blob, dtype=TENSOR_DTYPE, count=entry["length"], offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(np.float32).reshape(entry["shape"]))
    return Checkpoint(header, tensors)


#######################################
# Decoder and model checkpoints
#######################################

def save_decoder(path: Union[str, Path], decoder: FrozenDecoder, vocabulary_fingerprint: str) -> Path:
    return save_checkpoint(
        path,
        decoder.state_dict(),
        kind="decoder",
        config=asdict(decoder.config),
        fingerprint=vocabulary_fingerprint,
        frozen=True,
    )


def load_decoder(path: Union[str, Path], vocabulary_fingerprint: Optional[str] = None) -> FrozenDecoder:
    """Load a frozen decoder, checking it was pre-trained on the expected vocabulary."""
    checkpoint = load_checkpoint(path)
    if checkpoint.header.get("kind") != "decoder":
        raise MissingArtifactError(f"{path} is not a decoder checkpoint")
    if vocabulary_fingerprint is not None and checkpoint.header["fingerprint"] != vocabulary_fingerprint:
        raise VocabularyMismatchError(
            f"decoder at {path} was pre-trained on a different vocabulary than the dataset"
        )
    decoder = FrozenDecoder(DecoderConfig(**checkpoint.header["config"]))
    decoder.load_state_dict(checkpoint.tensors)
    return decoder.freeze()


def save_model(
    path: Union[str, Path],
    model: MindDecoderModel,
    *,
    dataset_fingerprint: str,
    decoder_path: Union[str, Path],
    seed: int,
) -> Path:
    tensors = {}
    for prefix, module in (("encoder", model.encoder), ("bridge", model.bridge), ("proxy", model.proxy)):
        tensors.update({f"{prefix}.{name}": value for name, value in module.state_dict().items()})
    encoder = model.encoder
    return save_checkpoint(
        path,
        tensors,
        kind="model",
        config={
            "encoder": asdict(encoder.config),
            "bridge": asdict(model.bridge.config),
            "pad_width": encoder.pad_width,
            "n_tokens": encoder.n_tokens,
            "d_proxy": model.proxy.d_proxy,
            "proxy_mode": model.proxy.mode,
            "seed": seed,
        },
        fingerprint=dataset_fingerprint,
        extra={"decoder_path": str(decoder_path)},
    )


def load_model(path: Union[str, Path], decoder: Optional[FrozenDecoder] = None) -> MindDecoderModel:
    """Rebuild a trained model; the decoder is loaded from the recorded path unless given."""
    checkpoint = load_checkpoint(path)
    if checkpoint.header.get("kind") != "model":
        raise MissingArtifactError(f"{path} is not a trained model checkpoint")
    config = checkpoint.header["config"]
    if decoder is None:
        decoder = load_decoder(checkpoint.header["decoder_path"])
    encoder_config = EncoderConfig(**config["encoder"])
    encoder = FmriEncoder(encoder_config, pad_width=config["pad_width"], n_tokens=config["n_tokens"])
    bridge = CrossAttentionBridge(BridgeConfig(**config["bridge"]), decoder.config, context_dim=encoder_config.embed_dim)
    proxy = VisualProxy(config["proxy_mode"], config["d_proxy"], encoder_config.embed_dim, config["seed"])

    def _section(prefix: str) -> Dict[str, torch.Tensor]:
        return {k[len(prefix) + 1:]: v for k, v in checkpoint.tensors.items() if k.startswith(prefix + ".")}

    encoder.load_state_dict(_section("encoder"))
    bridge.load_state_dict(_section("bridge"))
    proxy.load_state_dict(_section("proxy"))
    model = MindDecoderModel(encoder, decoder, bridge, proxy)
    model.eval()
    return model
