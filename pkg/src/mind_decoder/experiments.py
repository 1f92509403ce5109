"""Experiment grids: ROI-subset ablation and the encoder-size x bridge-scaling variant grid.

Each cell lives in its own directory. A cell whose ``cell.json`` fingerprint matches the current
inputs is reused instead of retrained.
"""

import csv
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

from mind_decoder.configuration import Configuration
from mind_decoder.dataset import SUBSET_LABELS, Dataset, select_dataset_subset, subset_voxel_count
from mind_decoder.metrics import MetricReport, evaluate_corpus, write_predictions
from mind_decoder.modeling.bridge import BridgeConfig, FrozenDecoder, count_trainable_params
from mind_decoder.modeling.checkpoint import save_model
from mind_decoder.modeling.encoder import EncoderConfig
from mind_decoder.modeling.model import decode_dataset
from mind_decoder.training import train, write_training_log
from mind_decoder.utils import fingerprint_json, fingerprint_path, read_json, write_json

logger = logging.getLogger(__name__)

CELL_NAME = "cell.json"
REPORT_NAME = "report.json"


@dataclass(frozen=True)
class CellSpec:
    name: str
    encoder: EncoderConfig
    bridge: BridgeConfig
    roi_subset: str = "VC"


class CellResult(NamedTuple):
    spec: CellSpec
    report: MetricReport
    trainable_params: int
    voxel_count: int
    n_tokens: int
    reused: bool


def cell_fingerprint(
    spec: CellSpec,
    config: Configuration,
    train_set: Dataset,
    test_set: Dataset,
    decoder_path: Union[str, Path],
) -> str:
    return fingerprint_json({
        "cell": asdict(spec),
        "seed": config.seed,
        "loss": asdict(config.loss),
        "optimizer": asdict(config.optimizer),
        "augmentation": asdict(config.augmentation),
        "proxy": asdict(config.proxy),
        "generation": asdict(config.generation),
        "train": train_set.fingerprint,
        "test": test_set.fingerprint,
        "decoder": fingerprint_path(decoder_path),
    })


def run_cell(
    cell_dir: Union[str, Path],
    spec: CellSpec,
    config: Configuration,
    train_set: Dataset,
    test_set: Dataset,
    decoder: FrozenDecoder,
    decoder_path: Union[str, Path],
) -> CellResult:
    """Train, decode and evaluate one cell, or reuse its finished outputs."""
    cell_dir = Path(cell_dir)
    fingerprint = cell_fingerprint(spec, config, train_set, test_set, decoder_path)
    train_subset = select_dataset_subset(train_set, spec.roi_subset)
    test_subset = select_dataset_subset(test_set, spec.roi_subset)
    n_tokens = train_subset.n_tokens
    trainable = count_trainable_params(spec.encoder, spec.bridge, decoder.config, train_subset.pad_width, n_tokens)
    voxels = subset_voxel_count(train_set.roi_specs, spec.roi_subset)

    marker = cell_dir / CELL_NAME
    if marker.is_file() and (cell_dir / REPORT_NAME).is_file() and read_json(marker).get("fingerprint") == fingerprint:
        logger.info(f"Cell {spec.name}: fingerprint unchanged, reusing {cell_dir}")
        report = MetricReport.from_dict(read_json(cell_dir / REPORT_NAME))
        return CellResult(spec, report, trainable, voxels, n_tokens + 1, reused=True)

    logger.info(f"Cell {spec.name}: training ({trainable} trainable parameters)")
    result = train(
        train_subset, decoder, spec.encoder, spec.bridge, config.loss, config.run_optimizer,
        config.augmentation, proxy_mode=config.proxy.mode,
    )
    save_model(cell_dir / "model", result.model, dataset_fingerprint=train_set.fingerprint,
               decoder_path=decoder_path, seed=config.seed)
    write_training_log(result.log, cell_dir / "training_log.tsv")
    predictions = decode_dataset(result.model, test_subset, config.generation)
    write_predictions(predictions, cell_dir / "predictions.tsv")
    report = evaluate_corpus(predictions, test_subset, out_path=cell_dir / REPORT_NAME)
    # written last, so an interrupted cell is retrained
    write_json(marker, {"fingerprint": fingerprint, "cell": asdict(spec)})
    return CellResult(spec, report, trainable, voxels, n_tokens + 1, reused=False)


def _table_row(result: CellResult) -> Dict[str, object]:
    return {name: f"{value:.2f}" for name, value in result.report.columns().items()}


def write_table(rows: Sequence[Dict[str, object]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


#######################################
# ROI ablation
#######################################

def ablation_cells(config: Configuration) -> List[CellSpec]:
    experiments = config.experiments
    encoder = EncoderConfig.from_variant(experiments.ablation_variant, experiments.desk_scale)
    bridge = replace(config.bridge, scaling_factor=experiments.ablation_scaling_factor)
    return [CellSpec(subset, encoder, bridge, subset) for subset in experiments.ablation_subsets]


def run_roi_ablation(
    out_dir: Union[str, Path],
    config: Configuration,
    train_set: Dataset,
    test_set: Dataset,
    decoder: FrozenDecoder,
    decoder_path: Union[str, Path],
) -> List[CellResult]:
    """Same model configuration trained and evaluated on each ROI subset."""
    out_dir = Path(out_dir)
    results = [
        run_cell(out_dir / spec.name, spec, config, train_set, test_set, decoder, decoder_path)
        for spec in ablation_cells(config)
    ]
    write_table([
        {
            "subset": SUBSET_LABELS[r.spec.roi_subset],
            "voxels": r.voxel_count,
            "tokens": r.n_tokens,
            **_table_row(r),
        }
        for r in results
    ], out_dir / "ablation.tsv")
    return results


#######################################
# Variant grid
#######################################

def variant_name(variant: str, scaling_factor: int) -> str:
    return f"{variant}/{scaling_factor}"


def grid_cells(config: Configuration, roi_subset: Optional[str] = None) -> List[CellSpec]:
    experiments = config.experiments
    cells = []
    for variant in experiments.variants:
        encoder = EncoderConfig.from_variant(variant, experiments.desk_scale)
        for scaling_factor in experiments.scaling_factors:
            bridge = replace(config.bridge, scaling_factor=scaling_factor)
            name = variant_name(variant, scaling_factor)
            cells.append(CellSpec(name, encoder, bridge, roi_subset or config.data.roi_subset))
    return cells


def run_variant_grid(
    out_dir: Union[str, Path],
    config: Configuration,
    train_set: Dataset,
    test_set: Dataset,
    decoder: FrozenDecoder,
    decoder_path: Union[str, Path],
) -> List[CellResult]:
    """Every encoder size crossed with every bridge scaling factor."""
    out_dir = Path(out_dir)
    results = [
        run_cell(out_dir / spec.name.replace("/", "-"), spec, config, train_set, test_set, decoder, decoder_path)
        for spec in grid_cells(config)
    ]
    write_table([
        {"model": r.spec.name, "params": r.trainable_params, **_table_row(r)}
        for r in results
    ], out_dir / "variant_grid.tsv")
    reused = sum(r.reused for r in results)
    logger.info(f"Variant grid finished: {len(results)} cells, {reused} reused")
    return results
