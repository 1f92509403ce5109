"""Latent-structure analysis: exact t-SNE, class-embedding clustering and visual-cue maps."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.decomposition import PCA
from sklearn.manifold import trustworthiness
from sklearn.metrics import pairwise_distances, silhouette_score

from mind_decoder.dataset import Dataset, FmriSample
from mind_decoder.errors import ExportError, InvalidArgumentError, MissingArtifactError, NonFiniteValueError
from mind_decoder.modeling.encoder import class_embedding, encode
from mind_decoder.modeling.model import MindDecoderModel
from mind_decoder.utils import derive_seed, stream_rng, write_json

logger = logging.getLogger(__name__)

MACHINE_EPSILON = np.finfo(np.double).eps
PERPLEXITY_TOLERANCE = 1e-5
MIN_GAIN = 0.01


@dataclass(kw_only=True)
class TsneConfig:
    perplexity: float = field(default=15.0, metadata={"description": "Target effective neighbour count."})
    iterations: int = field(default=1000, metadata={"description": "Gradient descent iterations."})
    learning_rate: float = field(default=100.0, metadata={"description": "Step size."})
    early_exaggeration: float = field(default=12.0, metadata={"description": "P multiplier during the early phase."})
    exaggeration_iterations: int = field(default=250, metadata={"description": "Length of the early phase."})
    initial_momentum: float = field(default=0.5, metadata={"description": "Momentum before the switch."})
    final_momentum: float = field(default=0.8, metadata={"description": "Momentum after the switch."})
    momentum_switch: int = field(default=250, metadata={"description": "Iteration at which momentum switches."})
    pca_dims: int = field(default=50, metadata={"description": "PCA target dimension applied when d exceeds it."})
    seed: int = field(default=0, metadata={"description": "Seed of the t-SNE stream."})

    def __post_init__(self):
        if self.perplexity <= 1:
            raise InvalidArgumentError(f"perplexity must exceed 1, got {self.perplexity}")
        if self.iterations < 1:
            raise InvalidArgumentError("t-SNE needs at least one iteration")
        if self.learning_rate <= 0 or self.early_exaggeration < 1:
            raise InvalidArgumentError("learning rate must be positive and exaggeration >= 1")


#######################################
# t-SNE
#######################################

def _row_probabilities(sq_distances: np.ndarray, i: int, beta: float) -> Tuple[np.ndarray, float]:
    row = np.delete(sq_distances[i], i)
    shifted = row - row.min()
    p = np.exp(-shifted * beta)
    total = p.sum()
    p /= total
    entropy = np.log(total) + beta * np.dot(shifted, p)
    return p, entropy


def conditional_probabilities(sq_distances: np.ndarray, perplexity: float, max_steps: int = 200) -> np.ndarray:
    """Row-stochastic p(j|i) with each row's Gaussian precision binary-searched to match perplexity."""
    n = sq_distances.shape[0]
    desired_entropy = np.log(perplexity)
    conditional = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        for _ in range(max_steps):
            p, entropy = _row_probabilities(sq_distances, i, beta)
            difference = entropy - desired_entropy
            if abs(difference) <= PERPLEXITY_TOLERANCE:
                break
            if difference > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        conditional[i] = np.insert(p, i, 0.0)
    return conditional


def _prepare_points(points: np.ndarray, config: TsneConfig) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 4 or points.shape[1] < 2:
        raise InvalidArgumentError(f"t-SNE needs an n x d array with n >= 4 and d >= 2, got {points.shape}")
    if not np.isfinite(points).all():
        raise NonFiniteValueError("t-SNE input contains non-finite values")
    if not 1 < config.perplexity < points.shape[0]:
        raise InvalidArgumentError(f"perplexity must lie in (1, {points.shape[0]}), got {config.perplexity}")
    if np.unique(points, axis=0).shape[0] < points.shape[0]:
        logger.warning("t-SNE input has duplicate points; perturbing by 1e-10")
        points = points + 1e-10 * stream_rng(config.seed, "tsne").standard_normal(points.shape)
    if points.shape[1] > config.pca_dims:
        n_components = min(config.pca_dims, points.shape[0])
        pca = PCA(n_components=n_components, random_state=derive_seed(config.seed, "tsne") % (2 ** 31))
        points = pca.fit_transform(points)
    return points


def joint_probabilities(points: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinities P = (p(j|i) + p(i|j)) / 2n; zero diagonal, sums to one."""
    sq_distances = pairwise_distances(points, squared=True)
    conditional = conditional_probabilities(sq_distances, perplexity)
    return (conditional + conditional.T) / (2.0 * points.shape[0])


def _student_t(embedding: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    numerator = 1.0 / (1.0 + pairwise_distances(embedding, squared=True))
    np.fill_diagonal(numerator, 0.0)
    return numerator, numerator / numerator.sum()


def kl_divergence(p: np.ndarray, embedding: np.ndarray) -> float:
    """KL(P || Q) for the Student-t affinities Q of ``embedding``."""
    _, q = _student_t(embedding)
    positive = p > 0
    return float(np.sum(p[positive] * np.log(p[positive] / np.maximum(q[positive], MACHINE_EPSILON))))


def tsne_gradient(p: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """dKL/dY_i = 4 * sum_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|^2)."""
    numerator, q = _student_t(embedding)
    weights = (p - q) * numerator
    return 4.0 * (weights.sum(axis=1, keepdims=True) * embedding - weights @ embedding)


class TsneResult(NamedTuple):
    embedding: np.ndarray
    kl_divergence: float
    history: Dict[int, float]


def run_tsne(points: np.ndarray, config: TsneConfig, record_every: int = 10) -> TsneResult:
    """Exact t-SNE with early exaggeration, momentum switch and per-coordinate gains."""
    points = _prepare_points(points, config)
    p = joint_probabilities(points, config.perplexity)
    rng = stream_rng(config.seed, "tsne")
    embedding = 1e-4 * rng.standard_normal((points.shape[0], 2))
    update = np.zeros_like(embedding)
    gains = np.ones_like(embedding)
    history: Dict[int, float] = {}

    for iteration in range(1, config.iterations + 1):
        exaggeration = config.early_exaggeration if iteration <= config.exaggeration_iterations else 1.0
        momentum = config.initial_momentum if iteration <= config.momentum_switch else config.final_momentum
        gradient = tsne_gradient(exaggeration * p, embedding)
        increase = update * gradient < 0.0
        gains = np.where(increase, gains + 0.2, gains * 0.8)
        np.clip(gains, MIN_GAIN, None, out=gains)
        update = momentum * update - config.learning_rate * gains * gradient
        embedding = embedding + update
        embedding -= embedding.mean(axis=0)
        if iteration % record_every == 0 or iteration == config.iterations:
            history[iteration] = kl_divergence(p, embedding)
            logger.debug(f"t-SNE iteration {iteration}: KL={history[iteration]:.5f}")

    final = history[config.iterations]
    logger.info(f"t-SNE on {points.shape[0]} points finished with KL={final:.4f}")
    return TsneResult(embedding, final, history)


def tsne(embeddings: np.ndarray, config: Optional[TsneConfig] = None) -> np.ndarray:
    """Two-dimensional t-SNE coordinates of ``embeddings`` (n x d)."""
    return run_tsne(embeddings, config or TsneConfig()).embedding


#######################################
# Class-embedding structure
#######################################

@torch.no_grad()
def class_embeddings(model: MindDecoderModel, samples: Sequence[FmriSample]) -> np.ndarray:
    model.eval()
    rows = [class_embedding(encode(sample.rois, model.encoder)) for sample in samples]
    return torch.stack(rows).double().numpy()


class CategorySeparation(NamedTuple):
    within: float
    across: float


def category_separation(embeddings: np.ndarray, labels: Sequence[str]) -> CategorySeparation:
    """Mean pairwise distance within and across categories."""
    distances = pairwise_distances(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(labels), dtype=bool)
    within = distances[same & off_diagonal]
    across = distances[~same]
    if within.size == 0 or across.size == 0:
        raise InvalidArgumentError("need at least two categories with two members to compare distances")
    return CategorySeparation(float(within.mean()), float(across.mean()))


def embedding_quality(
    embeddings: np.ndarray,
    coordinates: np.ndarray,
    labels: Sequence[str],
    n_neighbors: int = 5,
) -> Dict[str, float]:
    """Silhouette of the 2-D map by category and neighbourhood preservation of the original space."""
    n_neighbors = min(n_neighbors, len(labels) // 2 - 1) or 1
    return {
        "silhouette": float(silhouette_score(coordinates, labels)),
        "trustworthiness": float(trustworthiness(embeddings, coordinates, n_neighbors=n_neighbors)),
    }


#######################################
# Visual-cue maps
#######################################

@dataclass(frozen=True, eq=False)
class CueMap:
    """Cosine-similarity grid with its thresholded mask."""

    grid: np.ndarray
    mask: np.ndarray
    threshold: float

    def __post_init__(self):
        if self.grid.shape != self.mask.shape:
            raise InvalidArgumentError("cue-map grid and mask shapes differ")

    @property
    def argmax_cell(self) -> Tuple[int, int]:
        i, j = np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)
        return int(i), int(j)


def visual_cue_map(patches: np.ndarray, fmri_class: np.ndarray) -> np.ndarray:
    """G x G cosine similarity between each patch embedding and the fMRI class vector."""
    patches = np.asarray(patches, dtype=np.float64)
    fmri_class = np.asarray(fmri_class, dtype=np.float64).reshape(-1)
    if patches.ndim != 3 or patches.shape[-1] != fmri_class.size:
        raise InvalidArgumentError(f"patch grid {patches.shape} does not match class vector of size {fmri_class.size}")
    class_norm = np.linalg.norm(fmri_class)
    if class_norm == 0:
        raise InvalidArgumentError("fMRI class vector is zero; cosine similarity is undefined")
    patch_norms = np.linalg.norm(patches, axis=-1)
    dots = patches @ fmri_class
    # zero patches score 0
    grid = np.divide(dots, patch_norms * class_norm, out=np.zeros_like(dots), where=patch_norms > 0)
    return np.clip(grid, -1.0, 1.0)


def default_threshold(grid: np.ndarray) -> float:
    return float(grid.mean() + grid.std())


def threshold_mask(grid: np.ndarray, threshold: Optional[float] = None) -> CueMap:
    """Mask cells whose similarity reaches ``threshold`` (default: grid mean + one std)."""
    grid = np.asarray(grid, dtype=np.float64)
    threshold = default_threshold(grid) if threshold is None else float(threshold)
    return CueMap(grid=grid, mask=grid >= threshold, threshold=threshold)


class SampleCueMap(NamedTuple):
    sample_id: str
    category: str
    cue_map: CueMap
    salient_block: Optional[Tuple[int, int, int]]

    @property
    def block_recovered(self) -> Optional[bool]:
        if self.salient_block is None:
            return None
        row, col, size = self.salient_block
        i, j = self.cue_map.argmax_cell
        return row <= i < row + size and col <= j < col + size


@torch.no_grad()
def model_cue_maps(
    model: MindDecoderModel,
    dataset: Dataset,
    threshold: Optional[float] = None,
) -> List[SampleCueMap]:
    """Cue maps of every sample carrying patches, using its class embedding carried back to patch space."""
    samples = [s for s in dataset.samples if s.patch_embeddings is not None]
    if not samples:
        raise MissingArtifactError(f"no sample in the {dataset.split} split carries patch embeddings")
    embeddings = torch.from_numpy(class_embeddings(model, samples)).float()
    in_patch_space = model.proxy.to_proxy_space(embeddings).double().numpy()
    return [
        SampleCueMap(
            sample.sample_id,
            sample.category,
            threshold_mask(visual_cue_map(sample.patch_embeddings, vector), threshold),
            sample.salient_block,
        )
        for sample, vector in zip(samples, in_patch_space)
    ]


def block_recovery_rate(cue_maps: Sequence[SampleCueMap]) -> float:
    """Fraction of samples whose cue-map argmax falls inside the planted block."""
    outcomes = [c.block_recovered for c in cue_maps if c.block_recovered is not None]
    return sum(outcomes) / len(outcomes) if outcomes else 0.0


#######################################
# Exports
#######################################

def export_tsne(
    coordinates: np.ndarray,
    sample_ids: Sequence[str],
    labels: Sequence[str],
    out_path: Union[str, Path],
) -> Path:
    """TSV with columns sample_id, x, y, category."""
    if not len(coordinates) == len(sample_ids) == len(labels):
        raise InvalidArgumentError("coordinates, sample ids and labels must have the same length")
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(["sample_id", "x", "y", "category"])
            for sample_id, (x, y), label in zip(sample_ids, coordinates, labels):
                writer.writerow([sample_id, repr(float(x)), repr(float(y)), label])
    except OSError as e:
        raise ExportError(f"cannot write t-SNE export to {out_path}: {e}") from e
    return out_path


def load_tsne(path: Union[str, Path]) -> Tuple[List[str], np.ndarray, List[str]]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"t-SNE export not found: {path}")
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    coordinates = np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float64).reshape(-1, 2)
    return [r["sample_id"] for r in rows], coordinates, [r["category"] for r in rows]


def export_cue_maps(cue_maps: Sequence[SampleCueMap], out_path: Union[str, Path]) -> Path:
    """JSON list of grids, masks and thresholds, with planted-block recovery when known."""
    payload = {
        "block_recovery_rate": block_recovery_rate(cue_maps),
        "cue_maps": [
            {
                "sample_id": c.sample_id,
                "category": c.category,
                "grid": c.cue_map.grid.tolist(),
                "mask": c.cue_map.mask.tolist(),
                "threshold": c.cue_map.threshold,
                "salient_block": list(c.salient_block) if c.salient_block is not None else None,
                "block_recovered": c.block_recovered,
            }
            for c in cue_maps
        ],
    }
    try:
        return write_json(out_path, payload)
    except OSError as e:
        raise ExportError(f"cannot write cue maps to {out_path}: {e}") from e


def load_cue_maps(path: Union[str, Path]) -> List[SampleCueMap]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"cue-map export not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    return [
        SampleCueMap(
            entry["sample_id"],
            entry["category"],
            CueMap(
                grid=np.array(entry["grid"], dtype=np.float64),
                mask=np.array(entry["mask"], dtype=bool),
                threshold=float(entry["threshold"]),
            ),
            tuple(entry["salient_block"]) if entry["salient_block"] is not None else None,
        )
        for entry in payload["cue_maps"]
    ]
