"""fMRI encoder, frozen decoder, cross-attention bridge and checkpoint I/O."""

from mind_decoder.modeling.bridge import (
    BridgeConfig,
    CrossAttentionBridge,
    DecoderConfig,
    FrozenDecoder,
    GenerationConfig,
    GenerationResult,
    count_bridge_params,
    count_trainable_params,
    decoder_forward,
    generate,
    generate_with_score,
    score_sequence,
)
from mind_decoder.modeling.checkpoint import (
    load_checkpoint,
    load_decoder,
    load_model,
    save_checkpoint,
    save_decoder,
    save_model,
)
from mind_decoder.modeling.encoder import (
    EncoderConfig,
    FmriEncoder,
    class_embedding,
    count_encoder_params,
    encode,
    rois_to_tensor,
)
from mind_decoder.modeling.model import MindDecoderModel, ProxyConfig, VisualProxy, build_model, decode_dataset

__all__ = [
    "BridgeConfig",
    "CrossAttentionBridge",
    "DecoderConfig",
    "EncoderConfig",
    "FmriEncoder",
    "FrozenDecoder",
    "GenerationConfig",
    "GenerationResult",
    "MindDecoderModel",
    "ProxyConfig",
    "VisualProxy",
    "build_model",
    "class_embedding",
    "count_bridge_params",
    "count_encoder_params",
    "count_trainable_params",
    "decode_dataset",
    "decoder_forward",
    "encode",
    "generate",
    "generate_with_score",
    "load_checkpoint",
    "load_decoder",
    "load_model",
    "rois_to_tensor",
    "save_checkpoint",
    "save_decoder",
    "save_model",
    "score_sequence",
]
