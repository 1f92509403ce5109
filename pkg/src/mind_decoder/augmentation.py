"""Same-category fMRI interpolation with captions resampled from the category pool."""

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from mind_decoder.dataset import CaptionTokens, Dataset, FmriSample, ROISequence
from mind_decoder.errors import CategoryMismatchError, InvalidArgumentError, ShapeMismatchError

logger = logging.getLogger(__name__)

ALPHA_DISTRIBUTIONS = ("uniform", "beta")


@dataclass(kw_only=True)
class AugmentationConfig:
    """Configuration of the on-the-fly virtual sample stream."""

    alpha_distribution: str = field(
        default="uniform",
        metadata={"description": "Distribution of the interpolation weight: 'uniform' or 'beta'."},
    )
    beta_a: float = field(default=0.4, metadata={"description": "First Beta shape parameter."})
    beta_b: float = field(default=0.4, metadata={"description": "Second Beta shape parameter."})
    virtual_per_real: int = field(
        default=0,
        metadata={"description": "Virtual samples generated per real sample each epoch."},
    )
    seed: int = field(default=0, metadata={"description": "Seed offset for the augmentation stream."})

    def __post_init__(self):
        if self.alpha_distribution not in ALPHA_DISTRIBUTIONS:
            raise InvalidArgumentError(f"alpha_distribution must be one of {ALPHA_DISTRIBUTIONS}")
        if self.alpha_distribution == "beta" and (self.beta_a <= 0 or self.beta_b <= 0):
            raise InvalidArgumentError("Beta parameters must be positive")
        if self.virtual_per_real < 0:
            raise InvalidArgumentError("virtual_per_real must be non-negative")

    def sample_alpha(self, rng: np.random.Generator) -> float:
        if self.alpha_distribution == "beta":
            alpha = float(rng.beta(self.beta_a, self.beta_b))
        else:
            alpha = float(rng.uniform(0.0, 1.0))
        return min(max(alpha, 0.0), 1.0)


def sample_caption_for_category(
    category: str,
    rng: np.random.Generator,
    caption_pool: Mapping[str, Sequence[CaptionTokens]],
) -> CaptionTokens:
    """Draw a caption uniformly from the category's pool."""
    captions = caption_pool.get(category)
    if not captions:
        raise CategoryMismatchError(f"unknown category {category!r}: not in caption pool")
    return tuple(captions[int(rng.integers(len(captions)))])


def interpolate_same_category(
    a: FmriSample,
    b: FmriSample,
    alpha: float,
    rng: np.random.Generator,
    caption_pool: Mapping[str, Sequence[CaptionTokens]],
) -> FmriSample:
    """Build a virtual sample alpha*a + (1-alpha)*b with a freshly sampled category caption.

    Proxy embeddings and patch grids are interpolated with the same weight when both parents carry them.
    """
    if a.category != b.category:
        raise CategoryMismatchError(f"cannot interpolate across categories {a.category!r} and {b.category!r}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    if a.rois.names != b.rois.names or a.rois.values.shape != b.rois.values.shape \
            or a.rois.valid_lengths != b.rois.valid_lengths:
        raise ShapeMismatchError(f"ROI shapes differ between {a.sample_id} and {b.sample_id}")

    values = alpha * a.rois.values.astype(np.float64) + (1.0 - alpha) * b.rois.values.astype(np.float64)
    rois = ROISequence(
        values=values.astype(np.float32),
        valid_lengths=a.rois.valid_lengths,
        names=a.rois.names,
        pad_value=a.rois.pad_value,
    )
    proxy = None
    if a.proxy_embedding is not None and b.proxy_embedding is not None:
        proxy = (alpha * a.proxy_embedding.astype(np.float64)
                 + (1.0 - alpha) * b.proxy_embedding.astype(np.float64)).astype(np.float32)
    patches = None
    if a.patch_embeddings is not None and b.patch_embeddings is not None:
        patches = (alpha * a.patch_embeddings.astype(np.float64)
                   + (1.0 - alpha) * b.patch_embeddings.astype(np.float64)).astype(np.float32)
    return replace(
        a,
        sample_id=f"virtual:{a.sample_id}+{b.sample_id}",
        stimulus_id=f"virtual:{a.stimulus_id}+{b.stimulus_id}",
        rois=rois,
        caption=sample_caption_for_category(a.category, rng, caption_pool),
        proxy_embedding=proxy,
        patch_embeddings=patches,
        salient_block=None,
    )


def _epoch_pairs(count: int, needed: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """``needed`` index pairs from a category of ``count`` members.

    The unordered pairs are shuffled once and walked in order, so no pair repeats until all have
    been used; only then is a fresh shuffle appended. A singleton category pairs with itself.
    """
    if count == 1:
        return [(0, 0)] * needed
    every = list(itertools.combinations(range(count), 2))
    pairs: List[Tuple[int, int]] = []
    while len(pairs) < needed:
        order = rng.permutation(len(every))
        for k in order[: needed - len(pairs)]:
            i, j = every[int(k)]
            pairs.append((i, j) if rng.random() < 0.5 else (j, i))
    return pairs


def build_epoch_stream(dataset: Dataset, config: AugmentationConfig, rng: np.random.Generator) -> List[FmriSample]:
    """Real samples followed by this epoch's virtual samples.

    Each category contributes ``virtual_per_real`` virtual samples per real member, each interpolating
    a distinct pair of its members (see ``_epoch_pairs``).
    """
    stream = list(dataset.samples)
    if config.virtual_per_real == 0:
        return stream

    by_category: Dict[str, List[FmriSample]] = {}
    for sample in dataset.samples:
        by_category.setdefault(sample.category, []).append(sample)

    for category in sorted(by_category):
        members = by_category[category]
        for i, j in _epoch_pairs(len(members), config.virtual_per_real * len(members), rng):
            stream.append(interpolate_same_category(
                members[i], members[j], config.sample_alpha(rng), rng, dataset.category_caption_pool
            ))
    logger.debug(f"Epoch stream: {len(dataset.samples)} real + {len(stream) - len(dataset.samples)} virtual samples")
    return stream
