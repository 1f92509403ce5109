"""Joint caption + alignment objective, the training loop over encoder and bridge, and LM pre-training."""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from mind_decoder.augmentation import AugmentationConfig, build_epoch_stream
from mind_decoder.dataset import BOS_ID, EOS_ID, PAD_ID, CaptionTokens, Dataset, FmriSample
from mind_decoder.errors import (
    InvalidArgumentError,
    MissingArtifactError,
    ShapeMismatchError,
    TrainingDivergedError,
    VocabularyMismatchError,
)
from mind_decoder.modeling.bridge import BridgeConfig, CrossAttentionBridge, DecoderConfig, FrozenDecoder, decoder_forward
from mind_decoder.modeling.checkpoint import load_decoder
from mind_decoder.modeling.encoder import EncoderConfig
from mind_decoder.modeling.model import MindDecoderModel, VisualProxy, build_model
from mind_decoder.utils import derive_seed, stream_rng

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_gpt", "l_clip", "l_mind", "wall_ms")


@dataclass(kw_only=True)
class LossConfig:
    lambda_clip: float = field(default=10.0, metadata={"description": "Weight of the alignment term."})
    label_smoothing: float = field(default=0.0, metadata={"description": "Label smoothing of the caption term."})

    def __post_init__(self):
        if self.lambda_clip < 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {self.lambda_clip}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidArgumentError("label smoothing must lie in [0, 1)")


@dataclass(kw_only=True)
class OptimizerConfig:
    """Adam with decoupled weight decay."""

    learning_rate: float = field(default=1e-4, metadata={"description": "Adam learning rate."})
    beta1: float = field(default=0.9, metadata={"description": "First-moment decay."})
    beta2: float = field(default=0.999, metadata={"description": "Second-moment decay."})
    weight_decay: float = field(default=1e-4, metadata={"description": "Decoupled weight decay."})
    steps: int = field(default=300, metadata={"description": "Number of optimizer steps."})
    batch_size: int = field(default=32, metadata={"description": "Samples per step."})
    seed: int = field(default=0, metadata={"description": "Run seed; every random stream derives from it."})
    log_every: int = field(default=50, metadata={"description": "Log an INFO line every N steps."})

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidArgumentError("learning rate must be positive and weight decay non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidArgumentError("Adam betas must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise InvalidArgumentError("steps must be >= 0, batch size and log_every >= 1")

    def make_optimizer(self, parameters) -> torch.optim.Optimizer:
        return torch.optim.AdamW(
            parameters,
            lr=self.learning_rate,
            betas=(self.beta1, self.beta2),
            weight_decay=self.weight_decay,
        )


#######################################
# Batching
#######################################

class Batch(NamedTuple):
    rois: torch.Tensor                 # B x T x H
    input_ids: torch.Tensor            # B x L, BOS + prompt + caption, PAD filled
    target_ids: torch.Tensor           # B x L, next tokens ending in EOS, PAD where ignored
    proxy_raw: Optional[torch.Tensor]  # B x d_proxy
    sample_ids: Sequence[str]


def caption_io(caption: CaptionTokens, prompt_ids: Sequence[int] = ()) -> tuple:
    """Decoder input and target rows for one caption; prompt positions carry no target."""
    inputs = [BOS_ID, *prompt_ids, *caption]
    targets = [PAD_ID] * len(prompt_ids) + [*caption, EOS_ID]
    return inputs, targets


def collate(
    samples: Sequence[FmriSample],
    proxy: Optional[VisualProxy] = None,
    max_seq_len: Optional[int] = None,
    prompt_ids: Sequence[int] = (),
) -> Batch:
    if not samples:
        raise InvalidArgumentError("cannot collate an empty batch")
    rows = [caption_io(s.caption, prompt_ids) for s in samples]
    length = max(len(inputs) for inputs, _ in rows)
    if max_seq_len is not None and length > max_seq_len:
        raise InvalidArgumentError(f"caption sequence of length {length} exceeds decoder max_seq_len {max_seq_len}")
    input_ids = torch.full((len(samples), length), PAD_ID, dtype=torch.long)
    target_ids = torch.full((len(samples), length), PAD_ID, dtype=torch.long)
    for i, (inputs, targets) in enumerate(rows):
        input_ids[i, : len(inputs)] = torch.tensor(inputs)
        target_ids[i, : len(targets)] = torch.tensor(targets)

    rois = torch.from_numpy(np.stack([s.rois.values for s in samples]).astype(np.float32))

    proxy_raw = None
    if proxy is not None:
        available = [s.proxy_embedding is not None if proxy.mode == "from_dataset" else s.patch_embeddings is not None
                     for s in samples]
        if all(available):
            proxy_raw = torch.from_numpy(np.stack([proxy.raw_input(s) for s in samples]).astype(np.float32))
        elif any(available):
            raise InvalidArgumentError("batch mixes samples with and without visual-proxy inputs")
    return Batch(rois, input_ids, target_ids, proxy_raw, [s.sample_id for s in samples])


#######################################
# Losses
#######################################

class LossBreakdown(NamedTuple):
    l_gpt: torch.Tensor
    l_clip: torch.Tensor
    l_mind: torch.Tensor


def loss_gpt(log_probs: torch.Tensor, targets: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    """Summed caption negative log-likelihood, averaged over the batch.

    ``log_probs`` is (B x) L x V, ``targets`` (B x) L; PAD targets contribute nothing.
    """
    if log_probs.dim() == 2:
        log_probs, targets = log_probs.unsqueeze(0), targets.unsqueeze(0)
    if log_probs.shape[1] < targets.shape[1]:
        raise ShapeMismatchError(f"{log_probs.shape[1]} positions cannot score {targets.shape[1]} targets")
    log_probs = log_probs[:, : targets.shape[1]]
    mask = targets != PAD_ID
    picked = log_probs.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    nll = -picked
    if label_smoothing > 0:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * log_probs.mean(dim=-1)
    per_sample = (nll * mask).sum(dim=1)
    return per_sample.mean()


def loss_clip(e_img: torch.Tensor, e_fmri: torch.Tensor, lambda_clip: float) -> torch.Tensor:
    """lambda * squared L2 distance between proxy and class embedding, averaged over the batch."""
    if e_img.shape != e_fmri.shape:
        raise ShapeMismatchError(f"proxy shape {tuple(e_img.shape)} != class embedding shape {tuple(e_fmri.shape)}")
    distance = ((e_img - e_fmri) ** 2).sum(dim=-1)
    return lambda_clip * distance.mean()


def loss_mind(model: MindDecoderModel, batch: Batch, config: LossConfig) -> LossBreakdown:
    output = model(batch.rois, batch.input_ids)
    l_gpt = loss_gpt(output.log_probs, batch.target_ids, config.label_smoothing)
    if batch.proxy_raw is None:
        l_clip = torch.zeros((), dtype=l_gpt.dtype)
    else:
        target = model.proxy(batch.proxy_raw.to(output.class_embedding.dtype))
        l_clip = loss_clip(target, output.class_embedding, config.lambda_clip)
    return LossBreakdown(l_gpt, l_clip, l_gpt + l_clip)


#######################################
# Training
#######################################

@dataclass(frozen=True)
class TrainingLogRow:
    step: int
    l_gpt: float
    l_clip: float
    l_mind: float
    wall_ms: float


class TrainingResult(NamedTuple):
    model: MindDecoderModel
    log: List[TrainingLogRow]


def write_training_log(rows: Sequence[TrainingLogRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row.step, f"{row.l_gpt:.6f}", f"{row.l_clip:.6f}", f"{row.l_mind:.6f}", f"{row.wall_ms:.1f}"])
    return path


def read_training_log(path: Union[str, Path]) -> List[TrainingLogRow]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter="\t")
        return [
            TrainingLogRow(int(r["step"]), float(r["l_gpt"]), float(r["l_clip"]), float(r["l_mind"]), float(r["wall_ms"]))
            for r in reader
        ]


def _resolve_decoder(decoder: Union[FrozenDecoder, str, Path, None], dataset: Dataset) -> FrozenDecoder:
    if decoder is None:
        raise MissingArtifactError("training needs a pre-trained frozen decoder checkpoint")
    if not isinstance(decoder, FrozenDecoder):
        decoder = load_decoder(decoder, dataset.vocabulary.fingerprint)
    if decoder.config.vocab_size != len(dataset.vocabulary):
        raise VocabularyMismatchError(
            f"decoder vocabulary size {decoder.config.vocab_size} != dataset vocabulary size {len(dataset.vocabulary)}"
        )
    return decoder.freeze()


def _batches(dataset: Dataset, augmentation: AugmentationConfig, batch_size: int, seed: int):
    """Endless stream of sample batches, one shuffled (augmented) epoch at a time."""
    data_rng = stream_rng(seed, "data")
    augment_rng = stream_rng(seed + augmentation.seed, "augment")
    while True:
        stream = build_epoch_stream(dataset, augmentation, augment_rng)
        order = data_rng.permutation(len(stream))
        for start in range(0, len(order), batch_size):
            yield [stream[int(i)] for i in order[start:start + batch_size]]


def train(
    dataset: Dataset,
    decoder: Union[FrozenDecoder, str, Path, None],
    encoder_config: EncoderConfig,
    bridge_config: BridgeConfig,
    loss_config: LossConfig,
    optimizer_config: OptimizerConfig,
    augmentation_config: Optional[AugmentationConfig] = None,
    proxy_mode: str = "from_dataset",
    prompt_ids: Sequence[int] = (),
) -> TrainingResult:
    """Fit the encoder and bridge against the frozen decoder and visual proxy.

    Deterministic given ``optimizer_config.seed``: initialization, data order, augmentation and
    dropout each draw from their own named stream.
    """
    if not dataset.samples:
        raise InvalidArgumentError("training set is empty")
    decoder = _resolve_decoder(decoder, dataset)
    augmentation_config = augmentation_config or AugmentationConfig()
    seed = optimizer_config.seed
    model = build_model(
        encoder_config, bridge_config, decoder,
        pad_width=dataset.pad_width,
        n_tokens=dataset.n_tokens,
        d_proxy=dataset.d_proxy,
        proxy_mode=proxy_mode,
        seed=seed,
    )
    optimizer = optimizer_config.make_optimizer(list(model.trainable_parameters()))
    logger.info(
        f"Training on {len(dataset.samples)} samples for {optimizer_config.steps} steps "
        f"(lambda={loss_config.lambda_clip}, lr={optimizer_config.learning_rate})"
    )

    log: List[TrainingLogRow] = []
    batches = _batches(dataset, augmentation_config, optimizer_config.batch_size, seed)
    start = time.perf_counter()
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "dropout"))
        model.train()
        for step in range(optimizer_config.steps):
            batch = collate(next(batches), model.proxy, decoder.config.max_seq_len, prompt_ids)
            optimizer.zero_grad()
            losses = loss_mind(model, batch, loss_config)
            if not torch.isfinite(losses.l_mind):
                raise TrainingDivergedError(f"non-finite loss at step {step}", {"step": step})
            losses.l_mind.backward()
            optimizer.step()

            row = TrainingLogRow(
                step=step,
                l_gpt=float(losses.l_gpt),
                l_clip=float(losses.l_clip),
                l_mind=float(losses.l_mind),
                wall_ms=(time.perf_counter() - start) * 1000.0,
            )
            log.append(row)
            logger.debug(f"step {step}: l_gpt={row.l_gpt:.4f} l_clip={row.l_clip:.4f} l_mind={row.l_mind:.4f}")
            if (step + 1) % optimizer_config.log_every == 0 or step == optimizer_config.steps - 1:
                logger.info(f"step {step + 1}/{optimizer_config.steps}: l_mind={row.l_mind:.4f}")
    model.eval()
    return TrainingResult(model, log)


#######################################
# Language model pre-training
#######################################

class PretrainResult(NamedTuple):
    decoder: FrozenDecoder
    losses: List[float]


def _lm_batch(captions: Sequence[CaptionTokens]) -> tuple:
    rows = [caption_io(c) for c in captions]
    length = max(len(inputs) for inputs, _ in rows)
    input_ids = torch.full((len(rows), length), PAD_ID, dtype=torch.long)
    target_ids = torch.full((len(rows), length), PAD_ID, dtype=torch.long)
    for i, (inputs, targets) in enumerate(rows):
        input_ids[i, : len(inputs)] = torch.tensor(inputs)
        target_ids[i, : len(targets)] = torch.tensor(targets)
    return input_ids, target_ids


def pretrain_lm(
    captions: Sequence[CaptionTokens],
    decoder_config: DecoderConfig,
    optimizer_config: OptimizerConfig,
    vocabulary_size: Optional[int] = None,
) -> PretrainResult:
    """Train a decoder-only LM with next-token cross-entropy on captions, then freeze it."""
    captions = [tuple(int(t) for t in c) for c in captions]
    if not captions:
        raise InvalidArgumentError("pre-training corpus is empty")
    if vocabulary_size is not None and vocabulary_size != decoder_config.vocab_size:
        raise VocabularyMismatchError(
            f"decoder vocab_size {decoder_config.vocab_size} != dataset vocabulary size {vocabulary_size}"
        )
    largest = max(max(c) for c in captions if c) if any(captions) else 0
    if largest >= decoder_config.vocab_size:
        raise VocabularyMismatchError(f"caption token id {largest} outside decoder vocabulary {decoder_config.vocab_size}")
    longest = max(len(c) for c in captions) + 1
    if longest > decoder_config.max_seq_len:
        raise InvalidArgumentError(f"caption sequence of length {longest} exceeds max_seq_len {decoder_config.max_seq_len}")

    seed = optimizer_config.seed
    rng = stream_rng(seed, "data")
    losses: List[float] = []
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "init"))
        decoder = FrozenDecoder(decoder_config)
        optimizer = optimizer_config.make_optimizer(decoder.parameters())
        torch.manual_seed(derive_seed(seed, "dropout"))
        decoder.train()
        for step in range(optimizer_config.steps):
            picks = rng.integers(len(captions), size=min(optimizer_config.batch_size, len(captions)))
            input_ids, target_ids = _lm_batch([captions[int(i)] for i in picks])
            optimizer.zero_grad()
            logits = decoder(input_ids)
            loss = F.cross_entropy(logits.flatten(0, 1), target_ids.flatten(), ignore_index=PAD_ID)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite LM loss at step {step}", {"step": step})
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
            if (step + 1) % optimizer_config.log_every == 0:
                logger.info(f"LM step {step + 1}/{optimizer_config.steps}: loss={losses[-1]:.4f}")
    return PretrainResult(decoder.freeze(), losses)


@torch.no_grad()
def perplexity(
    decoder: FrozenDecoder,
    captions: Sequence[CaptionTokens],
    latents: Optional[torch.Tensor] = None,
    bridge: Optional[CrossAttentionBridge] = None,
) -> float:
    """Per-token perplexity of captions (EOS included), optionally conditioned on latents."""
    if not captions:
        raise InvalidArgumentError("cannot compute perplexity of an empty corpus")
    input_ids, target_ids = _lm_batch(captions)
    log_probs = decoder_forward(input_ids, latents, decoder, bridge if latents is not None else None)
    total = float(loss_gpt(log_probs, target_ids)) * len(captions)
    n_tokens = int((target_ids != PAD_ID).sum())
    return math.exp(total / n_tokens)
