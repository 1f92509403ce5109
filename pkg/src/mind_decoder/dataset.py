"""Dataset module - on-disk data model for fMRI-caption pairs.

Handles manifest ingestion, ROI flatten/pad, ROI subset selection, repetition
averaging and synthetic datasets with planted structure.

Layout of a split directory::

    manifest.json   split, roi_specs, d_proxy, patch_grid, vocabulary, samples, ...
    vocab.txt       one token per line, line number = id, lines 0-3 reserved
    arrays/*.f32    raw little-endian float32 arrays, one per sample per array
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from mind_decoder.errors import (
    ArrayLengthError,
    InvalidArgumentError,
    ManifestError,
    MissingArtifactError,
    NonFiniteValueError,
    RoiCountError,
    ShapeMismatchError,
    UnknownTokenError,
)
from mind_decoder.utils import git_blob_fingerprint, stream_rng, tokenize_text, write_json

logger = logging.getLogger(__name__)

#######################################
# Constants
#######################################

ROI_NAMES: Tuple[str, ...] = ("V1", "V2", "V3", "V4", "LOC", "FFA", "PPA")

ROI_SUBSETS: Dict[str, Tuple[str, ...]] = {
    "LVC": ("V1", "V2", "V3"),
    "HVC": ("LOC", "FFA", "PPA"),
    "VC": ROI_NAMES,
}

SUBSET_LABELS: Dict[str, str] = {
    "LVC": "LVC (V1 + V2 + V3)",
    "HVC": "HVC (LOC + FFA + PPA)",
    "VC": "VC (V4 + LVC + HVC)",
}

SPECIAL_TOKENS: Tuple[str, ...] = ("<bos>", "<eos>", "<pad>", "<unk>")
BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

SPLITS = ("train", "test")
NORMALIZATIONS = ("zscore", "none")
ARRAY_DTYPE = np.dtype("<f4")
AVERAGED_REPETITION = -1

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.txt"
SAMPLE_KEYS = ("sample_id", "stimulus_id", "category", "voxels", "caption")

CaptionTokens = Tuple[int, ...]


def _frozen_array(values, dtype=np.float32) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _optional_equal(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


#######################################
# Domain types
#######################################

@dataclass(frozen=True)
class RoiSpec:
    """A named visual ROI and its voxel count."""

    name: str
    voxel_count: int

    def __post_init__(self):
        if self.name not in ROI_NAMES:
            raise RoiCountError(f"unknown ROI name {self.name!r}; expected one of {ROI_NAMES}")
        if int(self.voxel_count) < 1:
            raise InvalidArgumentError(f"ROI {self.name} voxel_count must be >= 1, got {self.voxel_count}")


@dataclass(frozen=True, eq=False)
class ROISequence:
    """Per-ROI voxel vectors flattened and padded to a common width H (one row per ROI)."""

    values: np.ndarray
    valid_lengths: Tuple[int, ...]
    names: Tuple[str, ...] = ROI_NAMES
    pad_value: float = 0.0

    def __post_init__(self):
        values = _frozen_array(self.values)
        names = tuple(self.names)
        lengths = tuple(int(n) for n in self.valid_lengths)
        if values.ndim != 2 or values.shape[0] != len(names) or len(lengths) != len(names):
            raise ShapeMismatchError(
                f"ROI sequence expects {len(names)} rows and valid lengths, got values {values.shape} "
                f"and {len(lengths)} lengths"
            )
        if any(n < 1 or n > values.shape[1] for n in lengths):
            raise ShapeMismatchError(f"valid lengths {lengths} must lie in [1, {values.shape[1]}]")
        if not np.isfinite(values).all():
            raise NonFiniteValueError("ROI sequence contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "valid_lengths", lengths)

    @property
    def pad_width(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_tokens(self) -> int:
        return len(self.names)

    def strip_padding(self) -> Dict[str, np.ndarray]:
        """Recover the raw per-ROI arrays."""
        return {name: self.values[i, :n].copy() for i, (name, n) in enumerate(zip(self.names, self.valid_lengths))}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ROISequence):
            return NotImplemented
        return (
            self.names == other.names
            and self.valid_lengths == other.valid_lengths
            and self.pad_value == other.pad_value
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class FmriSample:
    """One stimulus presentation: ROI sequence, labels, caption and optional visual proxy."""

    sample_id: str
    stimulus_id: str
    category: str
    repetition_index: int
    rois: ROISequence
    caption: CaptionTokens
    proxy_embedding: Optional[np.ndarray] = None
    patch_embeddings: Optional[np.ndarray] = None
    salient_block: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        caption = tuple(int(t) for t in self.caption)
        if len(caption) < 1:
            raise InvalidArgumentError(f"sample {self.sample_id}: caption must contain at least one token")
        object.__setattr__(self, "caption", caption)
        if self.proxy_embedding is not None:
            object.__setattr__(self, "proxy_embedding", _frozen_array(self.proxy_embedding).reshape(-1))
        if self.patch_embeddings is not None:
            patches = _frozen_array(self.patch_embeddings)
            if patches.ndim != 3 or patches.shape[0] != patches.shape[1]:
                raise ShapeMismatchError(f"sample {self.sample_id}: patch grid must be GxGxD, got {patches.shape}")
            object.__setattr__(self, "patch_embeddings", patches)
        if self.salient_block is not None:
            object.__setattr__(self, "salient_block", tuple(int(v) for v in self.salient_block))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FmriSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.stimulus_id == other.stimulus_id
            and self.category == other.category
            and self.repetition_index == other.repetition_index
            and self.rois == other.rois
            and self.caption == other.caption
            and _optional_equal(self.proxy_embedding, other.proxy_embedding)
            and _optional_equal(self.patch_embeddings, other.patch_embeddings)
            and self.salient_block == other.salient_block
        )


class Vocabulary:
    """Word-level token table; ids 0-3 are the reserved special tokens."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ManifestError(f"vocabulary must start with reserved tokens {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ManifestError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._index = {token: i for i, token in enumerate(tokens)}

    @classmethod
    def build(cls, captions: Iterable[str]) -> Vocabulary:
        """Build a sorted word vocabulary from a caption corpus."""
        words = sorted({word for text in captions for word in tokenize_text(text)} - set(SPECIAL_TOKENS))
        return cls(SPECIAL_TOKENS + tuple(words))

    @classmethod
    def load(cls, path: Union[str, Path]) -> Vocabulary:
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        return path

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def fingerprint(self) -> str:
        return git_blob_fingerprint(("\n".join(self.tokens) + "\n").encode("utf-8"))

    def encode(self, text: str, strict: bool = True) -> CaptionTokens:
        """Map caption text to token ids; unknown words raise unless ``strict`` is False."""
        ids = []
        for word in tokenize_text(text):
            if word in self._index:
                ids.append(self._index[word])
            elif strict:
                raise UnknownTokenError(f"unknown token {word!r} in caption {text!r}")
            else:
                ids.append(UNK_ID)
        return tuple(ids)

    def decode(self, ids: Iterable[int]) -> str:
        """Canonical text form: special tokens dropped, words joined by single spaces."""
        words = []
        for i in ids:
            i = int(i)
            if i < len(SPECIAL_TOKENS):
                continue
            if i >= len(self.tokens):
                raise UnknownTokenError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            words.append(self.tokens[i])
        return " ".join(words)


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable split of fMRI samples with its vocabulary and caption pool."""

    split: str
    samples: Tuple[FmriSample, ...]
    roi_specs: Tuple[RoiSpec, ...]
    vocabulary: Vocabulary
    d_proxy: int
    patch_grid: int
    category_caption_pool: Mapping[str, Tuple[CaptionTokens, ...]]
    normalization: str = "zscore"
    pad_value: float = 0.0
    roi_subset: str = "VC"
    fingerprint: str = ""
    root: Optional[Path] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "roi_specs", tuple(self.roi_specs))
        pool = {k: tuple(tuple(c) for c in v) for k, v in self.category_caption_pool.items()}
        object.__setattr__(self, "category_caption_pool", MappingProxyType(pool))
        for sample in self.samples:
            if sample.category not in pool:
                raise ManifestError(f"sample {sample.sample_id}: category {sample.category!r} missing from caption pool")
            if sample.proxy_embedding is not None and sample.proxy_embedding.shape[0] != self.d_proxy:
                raise ShapeMismatchError(
                    f"sample {sample.sample_id}: proxy dim {sample.proxy_embedding.shape[0]} != d_proxy {self.d_proxy}"
                )

    @property
    def pad_width(self) -> int:
        return max(spec.voxel_count for spec in self.roi_specs)

    @property
    def n_tokens(self) -> int:
        return len(ROI_SUBSETS[self.roi_subset])

    @property
    def categories(self) -> List[str]:
        return sorted(self.category_caption_pool)

    @cached_property
    def by_id(self) -> Dict[str, FmriSample]:
        return {sample.sample_id: sample for sample in self.samples}

    @cached_property
    def _references(self) -> Dict[str, Tuple[str, ...]]:
        grouped: Dict[str, List[str]] = {}
        for sample in self.samples:
            text = self.vocabulary.decode(sample.caption)
            texts = grouped.setdefault(sample.stimulus_id, [])
            if text not in texts:
                texts.append(text)
        return {k: tuple(v) for k, v in grouped.items()}

    def caption_text(self, sample: FmriSample) -> str:
        return self.vocabulary.decode(sample.caption)

    def reference_texts(self, sample: FmriSample) -> Tuple[str, ...]:
        """Distinct reference captions of every presentation of the sample's stimulus."""
        return self._references[sample.stimulus_id]

    def with_samples(self, samples: Iterable[FmriSample], **changes) -> Dataset:
        return replace(self, samples=tuple(samples), **changes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.roi_specs == other.roi_specs
            and self.vocabulary == other.vocabulary
            and self.d_proxy == other.d_proxy
            and self.patch_grid == other.patch_grid
            and dict(self.category_caption_pool) == dict(other.category_caption_pool)
            and self.normalization == other.normalization
            and self.pad_value == other.pad_value
            and self.roi_subset == other.roi_subset
            and len(self.samples) == len(other.samples)
            and all(a == b for a, b in zip(self.samples, other.samples))
        )


#######################################
# ROI operations
#######################################

def zscore_rows(raw: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Z-score each ROI array over its own voxels; constant arrays are only centred."""
    normalized = {}
    for name, values in raw.items():
        values = np.asarray(values, dtype=np.float64)
        centred = values - values.mean()
        std = values.std()
        normalized[name] = (centred / std if std > 0 else centred).astype(np.float32)
    return normalized


def flatten_and_pad(
    raw: Mapping[str, np.ndarray],
    pad_value: float = 0.0,
    names: Sequence[str] = ROI_NAMES,
) -> ROISequence:
    """Stack per-ROI voxel arrays into a rows x H matrix, padding each row to the longest ROI.

    Args:
        raw: Mapping of ROI name to its 1-D voxel array.
        pad_value: Value written after each row's valid entries.
        names: Row order; must match the keys of ``raw`` exactly.
    """
    names = tuple(names)
    if set(raw) != set(names) or len(raw) != len(names):
        raise RoiCountError(f"roi count mismatch: expected {names}, got {tuple(raw)}")
    arrays = []
    for name in names:
        values = np.asarray(raw[name], dtype=np.float32).reshape(-1)
        if values.size == 0:
            raise ShapeMismatchError(f"ROI {name} has no voxels")
        if not np.isfinite(values).all():
            raise NonFiniteValueError(f"non-finite voxel value in ROI {name}")
        arrays.append(values)
    width = max(a.size for a in arrays)
    values = np.full((len(names), width), pad_value, dtype=np.float32)
    for i, array in enumerate(arrays):
        values[i, : array.size] = array
    return ROISequence(values=values, valid_lengths=tuple(a.size for a in arrays), names=names, pad_value=pad_value)


def subset_voxel_count(roi_specs: Sequence[RoiSpec], subset: str) -> int:
    """Total voxels of the ROIs belonging to an LVC/HVC/VC subset."""
    names = _subset_names(subset)
    return sum(spec.voxel_count for spec in roi_specs if spec.name in names)


def _subset_names(subset: str) -> Tuple[str, ...]:
    if subset not in ROI_SUBSETS:
        raise InvalidArgumentError(f"ROI subset must be one of {tuple(ROI_SUBSETS)}, got {subset!r}")
    return ROI_SUBSETS[subset]


def select_roi_subset(sample: FmriSample, subset: str) -> FmriSample:
    """Keep only the ROI rows of an LVC/HVC/VC subset; excluded rows are removed, not zeroed."""
    names = _subset_names(subset)
    rois = sample.rois
    if rois.names == names:
        return sample
    missing = [name for name in names if name not in rois.names]
    if missing:
        raise ShapeMismatchError(f"sample {sample.sample_id} lacks ROIs {missing} required by subset {subset}")
    rows = [rois.names.index(name) for name in names]
    subset_rois = ROISequence(
        values=rois.values[rows],
        valid_lengths=tuple(rois.valid_lengths[i] for i in rows),
        names=names,
        pad_value=rois.pad_value,
    )
    return replace(sample, rois=subset_rois)


def select_dataset_subset(dataset: Dataset, subset: str) -> Dataset:
    return dataset.with_samples((select_roi_subset(s, subset) for s in dataset.samples), roi_subset=subset)


def average_repetitions(samples: Sequence[FmriSample]) -> FmriSample:
    """Average repeated presentations of one stimulus.

    Samples are ordered by (repetition_index, sample_id) before reduction so the result does not
    depend on input order; labels, caption and proxy come from the first sample of that order.
    """
    if not samples:
        raise InvalidArgumentError("average_repetitions needs at least one sample")
    stimulus_ids = sorted({s.stimulus_id for s in samples})
    if len(stimulus_ids) > 1:
        raise InvalidArgumentError(f"cannot average mixed stimulus_ids {stimulus_ids}")
    ordered = sorted(samples, key=lambda s: (s.repetition_index, s.sample_id))
    first = ordered[0]
    for other in ordered[1:]:
        if other.rois.names != first.rois.names or other.rois.valid_lengths != first.rois.valid_lengths \
                or other.rois.values.shape != first.rois.values.shape:
            raise ShapeMismatchError(f"ROI shapes differ between {first.sample_id} and {other.sample_id}")
    stacked = np.stack([s.rois.values.astype(np.float64) for s in ordered])
    averaged = replace(first.rois, values=stacked.mean(axis=0).astype(np.float32))
    return replace(first, sample_id=first.stimulus_id, repetition_index=AVERAGED_REPETITION, rois=averaged)


def collapse_repetitions(dataset: Dataset) -> Dataset:
    """Average every stimulus' repetitions, keeping first-appearance order of stimuli."""
    groups: Dict[str, List[FmriSample]] = {}
    for sample in dataset.samples:
        groups.setdefault(sample.stimulus_id, []).append(sample)
    logger.info(f"Averaging {len(dataset.samples)} presentations into {len(groups)} stimuli")
    return dataset.with_samples(average_repetitions(group) for group in groups.values())


#######################################
# Manifest I/O
#######################################

def _read_array(root: Path, name: str, expected: int, what: str) -> np.ndarray:
    path = root / name
    if not path.is_file():
        raise MissingArtifactError(f"array file for {what} not found: {path}")
    values = np.fromfile(path, dtype=ARRAY_DTYPE)
    if values.size != expected:
        raise ArrayLengthError(f"array length mismatch for {what}: declared {expected}, found {values.size}")
    return values.astype(np.float32)


def _write_array(root: Path, name: str, values: np.ndarray) -> bytes:
    path = root / name
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(values, dtype=ARRAY_DTYPE).tobytes()
    path.write_bytes(payload)
    return payload


def load_dataset(manifest_path: Union[str, Path]) -> Dataset:
    """Load a split from its manifest; sample order follows the manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingArtifactError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    root = manifest_path.parent

    try:
        raw_specs = manifest["roi_specs"]
        split = manifest["split"]
        d_proxy = int(manifest["d_proxy"])
        patch_grid = int(manifest["patch_grid"])
        vocab_name = manifest["vocabulary"]
        entries = manifest["samples"]
    except KeyError as e:
        raise ManifestError(f"manifest {manifest_path} lacks required key {e}") from e

    if len(raw_specs) != len(ROI_NAMES):
        raise RoiCountError(f"roi count mismatch: expected {len(ROI_NAMES)} ROIs, manifest declares {len(raw_specs)}")
    roi_specs = tuple(RoiSpec(name=s["name"], voxel_count=int(s["voxel_count"])) for s in raw_specs)
    if sorted(s.name for s in roi_specs) != sorted(ROI_NAMES):
        raise RoiCountError(f"roi count mismatch: each of {ROI_NAMES} must appear once, got {[s.name for s in roi_specs]}")
    counts = {spec.name: spec.voxel_count for spec in roi_specs}

    vocab_path = root / vocab_name
    vocabulary = Vocabulary.load(vocab_path)
    normalization = manifest.get("normalization", "zscore")
    if normalization not in NORMALIZATIONS:
        raise ManifestError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    pad_value = float(manifest.get("pad_value", 0.0))

    digest = [git_blob_fingerprint(manifest_path.read_bytes()), vocabulary.fingerprint]
    samples = []
    for index, entry in enumerate(entries):
        missing = [key for key in SAMPLE_KEYS if key not in entry]
        if missing:
            raise ManifestError(f"sample {entry.get('sample_id', index)} in {manifest_path} lacks required keys {missing}")
        sample_id = entry["sample_id"]
        voxel_files = entry["voxels"]
        if sorted(voxel_files) != sorted(ROI_NAMES):
            raise RoiCountError(f"roi count mismatch in sample {sample_id}: got {sorted(voxel_files)}")
        raw = {
            name: _read_array(root, voxel_files[name], counts[name], f"{sample_id}/{name}")
            for name in ROI_NAMES
        }
        if normalization == "zscore":
            raw = zscore_rows(raw)
        rois = flatten_and_pad(raw, pad_value=pad_value)
        proxy = None
        if entry.get("proxy"):
            proxy = _read_array(root, entry["proxy"], d_proxy, f"{sample_id}/proxy")
        patches = None
        if entry.get("patches"):
            flat = _read_array(root, entry["patches"], patch_grid * patch_grid * d_proxy, f"{sample_id}/patches")
            patches = flat.reshape(patch_grid, patch_grid, d_proxy)
        digest.append(git_blob_fingerprint(rois.values.tobytes()))
        samples.append(FmriSample(
            sample_id=sample_id,
            stimulus_id=entry["stimulus_id"],
            category=entry["category"],
            repetition_index=int(entry.get("repetition_index", 0)),
            rois=rois,
            caption=vocabulary.encode(entry["caption"]),
            proxy_embedding=proxy,
            patch_embeddings=patches,
            salient_block=entry.get("salient_block"),
        ))

    if "caption_pool" in manifest:
        pool = {cat: tuple(vocabulary.encode(text) for text in texts) for cat, texts in manifest["caption_pool"].items()}
    else:
        built: Dict[str, List[CaptionTokens]] = {}
        for sample in samples:
            captions = built.setdefault(sample.category, [])
            if sample.caption not in captions:
                captions.append(sample.caption)
        pool = {cat: tuple(captions) for cat, captions in built.items()}

    dataset = Dataset(
        split=split,
        samples=tuple(samples),
        roi_specs=roi_specs,
        vocabulary=vocabulary,
        d_proxy=d_proxy,
        patch_grid=patch_grid,
        category_caption_pool=pool,
        normalization=normalization,
        pad_value=pad_value,
        fingerprint=git_blob_fingerprint("\n".join(digest).encode("utf-8")),
        root=root,
    )
    logger.info(f"Loaded {split} split with {len(samples)} samples from {manifest_path}")
    return dataset


#######################################
# Synthetic datasets
#######################################

DEFAULT_CAPTION_TEMPLATES: Dict[str, List[str]] = {
    "dog": ["a dog runs across the green grass", "a brown dog plays with a ball", "a small dog sits on the floor"],
    "car": ["a red car drives down the road", "a car is parked on the street", "an old car sits in a garage"],
    "bird": ["a bird perches on a tree branch", "a small bird flies over the water", "a colorful bird sits on a fence"],
    "guitar": ["a guitar leans against the wall", "a man plays an acoustic guitar", "an electric guitar lies on a bed"],
    "boat": ["a boat floats on the calm lake", "a white boat sails across the sea", "a small boat is tied to the dock"],
    "cat": ["a cat sleeps on the warm sofa", "a grey cat looks out the window", "a cat sits next to a plant"],
    "airplane": ["an airplane flies through the blue sky", "a large airplane sits on the runway", "a small airplane lands at the airport"],
    "flower": ["a red flower grows in the garden", "a vase of flowers stands on a table", "yellow flowers bloom in the field"],
    "piano": ["a black piano stands in the room", "a woman plays the grand piano", "an old piano sits near the window"],
    "train": ["a train travels along the tracks", "a long train waits at the station", "a steam train crosses the bridge"],
    "horse": ["a horse grazes in the open field", "a brown horse runs along the fence", "a person rides a white horse"],
    "bicycle": ["a bicycle leans against the fence", "a man rides a bicycle down the street", "a blue bicycle is parked outside"],
}

DEFAULT_VOXEL_COUNTS: Dict[str, int] = {"V1": 48, "V2": 44, "V3": 40, "V4": 32, "LOC": 36, "FFA": 28, "PPA": 30}


@dataclass(kw_only=True)
class SynthConfig:
    """Parameters of a synthetic fMRI-caption dataset with planted, learnable structure."""

    n_categories: int = field(default=5, metadata={"description": "Number of training categories."})
    samples_per_category: int = field(default=20, metadata={"description": "Training stimuli per category."})
    test_samples_per_category: int = field(default=2, metadata={"description": "Test stimuli per category."})
    test_repetitions: int = field(default=1, metadata={"description": "Presentations per test stimulus."})
    voxel_counts: Dict[str, int] = field(
        default_factory=lambda: dict(DEFAULT_VOXEL_COUNTS),
        metadata={"description": "Voxel count per ROI name."},
    )
    d_proxy: int = field(default=32, metadata={"description": "Dimension of the visual proxy embedding."})
    patch_grid: int = field(default=6, metadata={"description": "Side G of the GxG patch-embedding grid."})
    block_size: int = field(default=2, metadata={"description": "Side of the planted salient block."})
    noise: float = field(default=0.1, metadata={"description": "Voxel noise standard deviation."})
    proxy_noise: float = field(default=0.3, metadata={"description": "Per-stimulus spread around the category centroid."})
    signal_rois: Optional[List[str]] = field(
        default=None,
        metadata={"description": "ROIs driven by the proxy; the rest carry noise only. None means all."},
    )
    caption_templates: Optional[Dict[str, List[str]]] = field(
        default=None,
        metadata={"description": "Caption templates per category; defaults to a built-in bank."},
    )
    disjoint_test_categories: bool = field(
        default=False,
        metadata={"description": "Draw test stimuli from categories never seen in training."},
    )
    normalization: str = field(default="zscore", metadata={"description": "Per-ROI voxel normalization."})
    pad_value: float = field(default=0.0, metadata={"description": "Padding value for short ROI rows."})

    def __post_init__(self):
        if self.n_categories < 1:
            raise InvalidArgumentError("synthetic config needs at least one category")
        if self.patch_grid < 1:
            raise InvalidArgumentError("synthetic config needs a patch grid G >= 1")
        if self.samples_per_category < 1 or self.test_samples_per_category < 0 or self.test_repetitions < 1:
            raise InvalidArgumentError("sample counts must be positive")
        if not 1 <= self.block_size <= self.patch_grid:
            raise InvalidArgumentError(f"block_size must lie in [1, {self.patch_grid}], got {self.block_size}")
        if sorted(self.voxel_counts) != sorted(ROI_NAMES) or min(self.voxel_counts.values()) < 1:
            raise InvalidArgumentError(f"voxel_counts must give a positive count for each of {ROI_NAMES}")
        if self.d_proxy < 2:
            raise InvalidArgumentError("d_proxy must be >= 2")
        if self.noise < 0 or self.proxy_noise < 0:
            raise InvalidArgumentError("noise levels must be non-negative")
        if self.signal_rois is not None and not set(self.signal_rois) <= set(ROI_NAMES):
            raise InvalidArgumentError(f"signal_rois must be drawn from {ROI_NAMES}")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidArgumentError(f"normalization must be one of {NORMALIZATIONS}")
        needed = self.n_categories * (2 if self.disjoint_test_categories else 1)
        if len(self.templates) < needed:
            raise InvalidArgumentError(f"need caption templates for {needed} categories, have {len(self.templates)}")

    @property
    def templates(self) -> Dict[str, List[str]]:
        return self.caption_templates if self.caption_templates is not None else DEFAULT_CAPTION_TEMPLATES


class SyntheticDataset(NamedTuple):
    train: Dataset
    test: Dataset
    mixing: Dict[str, np.ndarray]
    centroids: Dict[str, np.ndarray]
    planted_recovery: float


def _unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


def _orthogonal_unit(rng: np.random.Generator, direction: np.ndarray) -> np.ndarray:
    vector = rng.standard_normal(direction.size)
    vector -= (vector @ direction) * direction
    return _unit(vector)


def _planted_patches(rng: np.random.Generator, centroid: np.ndarray, grid: int, block: int):
    """Patch grid whose block cells align with the centroid (cos ~ 0.89) and background does not (|cos| < 0.1)."""
    direction = _unit(centroid)
    row, col = (int(v) for v in rng.integers(0, grid - block + 1, size=2))
    patches = np.empty((grid, grid, centroid.size), dtype=np.float64)
    for i in range(grid):
        for j in range(grid):
            scale = rng.uniform(0.5, 2.0)
            if row <= i < row + block and col <= j < col + block:
                cell = direction + 0.5 * _orthogonal_unit(rng, direction)
            else:
                cell = _orthogonal_unit(rng, direction) + rng.uniform(-0.1, 0.1) * direction
            patches[i, j] = scale * cell
    return patches.astype(np.float32), (row, col, block)


def _block_recovered(patches: np.ndarray, centroid: np.ndarray, block: Tuple[int, int, int]) -> bool:
    flat = patches.reshape(-1, patches.shape[-1]).astype(np.float64)
    cosine = flat @ centroid / (np.linalg.norm(flat, axis=1) * np.linalg.norm(centroid))
    i, j = divmod(int(np.argmax(cosine)), patches.shape[1])
    row, col, size = block
    return row <= i < row + size and col <= j < col + size


def generate_synthetic_dataset(config: SynthConfig, seed: int, out_dir: Union[str, Path]) -> SyntheticDataset:
    """Write train/test splits with a learnable fMRI-to-proxy mapping and planted salient blocks.

    Per category a proxy centroid is drawn once; each stimulus' proxy is the centroid plus noise,
    and every signal ROI responds linearly to the proxy through a fixed random map.
    """
    out_dir = Path(out_dir)
    rng = stream_rng(seed, "data")
    templates = config.templates
    names = list(templates)
    train_categories = names[: config.n_categories]
    test_categories = (
        names[config.n_categories: 2 * config.n_categories] if config.disjoint_test_categories else train_categories
    )
    used = sorted(set(train_categories) | set(test_categories), key=names.index)
    d = config.d_proxy
    centroids = {cat: rng.standard_normal(d) for cat in used}
    mixing = {roi: rng.standard_normal((config.voxel_counts[roi], d)) / math.sqrt(d) for roi in ROI_NAMES}
    signal = set(config.signal_rois) if config.signal_rois is not None else set(ROI_NAMES)
    vocabulary = Vocabulary.build(text for cat in used for text in templates[cat])

    recovered = total = 0
    splits = {}
    for split, categories, per_category, repetitions in (
        ("train", train_categories, config.samples_per_category, 1),
        ("test", test_categories, config.test_samples_per_category, config.test_repetitions),
    ):
        split_dir = out_dir / split
        entries = []
        for c, category in enumerate(categories):
            for k in range(per_category):
                stimulus_id = f"{split}-{category}-{k:03d}"
                proxy = (centroids[category] + config.proxy_noise * rng.standard_normal(d)).astype(np.float32)
                patches, block = _planted_patches(rng, centroids[category], config.patch_grid, config.block_size)
                recovered += _block_recovered(patches, centroids[category], block)
                total += 1
                caption = templates[category][int(rng.integers(len(templates[category])))]
                for rep in range(repetitions):
                    sample_id = f"{stimulus_id}-r{rep}"
                    voxels = {}
                    for roi in ROI_NAMES:
                        count = config.voxel_counts[roi]
                        response = mixing[roi] @ proxy if roi in signal else rng.standard_normal(count)
                        values = response + config.noise * rng.standard_normal(count)
                        voxels[roi] = f"arrays/{sample_id}.{roi}.f32"
                        _write_array(split_dir, voxels[roi], values)
                    _write_array(split_dir, f"arrays/{sample_id}.proxy.f32", proxy)
                    _write_array(split_dir, f"arrays/{sample_id}.patches.f32", patches)
                    entries.append({
                        "sample_id": sample_id,
                        "stimulus_id": stimulus_id,
                        "category": category,
                        "repetition_index": rep,
                        "voxels": voxels,
                        "proxy": f"arrays/{sample_id}.proxy.f32",
                        "patches": f"arrays/{sample_id}.patches.f32",
                        "caption": caption,
                        "salient_block": list(block),
                    })
        vocabulary.save(split_dir / VOCAB_NAME)
        write_json(split_dir / MANIFEST_NAME, {
            "split": split,
            "roi_specs": [{"name": roi, "voxel_count": config.voxel_counts[roi]} for roi in ROI_NAMES],
            "d_proxy": d,
            "patch_grid": config.patch_grid,
            "vocabulary": VOCAB_NAME,
            "normalization": config.normalization,
            "pad_value": config.pad_value,
            "caption_pool": {cat: list(templates[cat]) for cat in categories},
            "samples": entries,
            "generator": {"seed": seed, "config": asdict(config)},
        })
        splits[split] = load_dataset(split_dir / MANIFEST_NAME)

    planted_recovery = recovered / max(total, 1)
    logger.info(
        f"Synthetic dataset written to {out_dir}: {len(splits['train'].samples)} train / "
        f"{len(splits['test'].samples)} test samples, planted block recovery {planted_recovery:.3f}"
    )
    return SyntheticDataset(
        train=splits["train"],
        test=splits["test"],
        mixing=mixing,
        centroids={k: v.astype(np.float32) for k, v in centroids.items()},
        planted_recovery=planted_recovery,
    )
