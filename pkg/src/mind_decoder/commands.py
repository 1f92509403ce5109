"""Command bodies shared by the CLI and the pipeline graph.

Every command writes a ``<command>.run.json`` RunManifest next to its outputs, recording the
configuration, seed, input/output paths and the fingerprints of its inputs.
"""

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from mind_decoder.analysis import (
    block_recovery_rate,
    category_separation,
    class_embeddings,
    embedding_quality,
    export_cue_maps,
    export_tsne,
    model_cue_maps,
    run_tsne,
)
from mind_decoder.configuration import Configuration
from mind_decoder.dataset import (
    Dataset,
    SyntheticDataset,
    collapse_repetitions,
    generate_synthetic_dataset,
    load_dataset,
    select_dataset_subset,
)
from mind_decoder.experiments import CellResult, run_roi_ablation, run_variant_grid
from mind_decoder.metrics import MetricReport, evaluate_corpus, write_predictions
from mind_decoder.modeling.checkpoint import load_decoder, load_model, save_decoder, save_model
from mind_decoder.modeling.model import decode_dataset
from mind_decoder.training import pretrain_lm, train, write_training_log
from mind_decoder.utils import fingerprint_json, fingerprint_path, write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    seed: int
    config_fingerprint: str
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    input_fingerprints: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(
        cls,
        command: str,
        config: Configuration,
        config_path: Optional[PathLike] = None,
        **inputs: Optional[PathLike],
    ) -> "RunManifest":
        given = {name: str(path) for name, path in inputs.items() if path is not None}
        return cls(
            command=command,
            config_path=str(config_path) if config_path else None,
            seed=config.seed,
            config_fingerprint=fingerprint_json(config.to_dict()),
            inputs=given,
            input_fingerprints={name: fingerprint_path(path) for name, path in given.items()},
        )

    def write(self, out_dir: PathLike, **outputs: PathLike) -> Path:
        self.outputs.update({name: str(path) for name, path in outputs.items()})
        return write_json(Path(out_dir) / f"{self.command}.run.json", asdict(self))


def _load_split(manifest: PathLike, config: Configuration) -> Dataset:
    dataset = load_dataset(manifest)
    if config.data.roi_subset != "VC":
        dataset = select_dataset_subset(dataset, config.data.roi_subset)
    return dataset


def _evaluation_split(manifest: PathLike, config: Configuration, average: Optional[bool]) -> Dataset:
    dataset = _load_split(manifest, config)
    average = config.data.average_repetitions if average is None else average
    return collapse_repetitions(dataset) if average else dataset


#######################################
# Pipeline commands
#######################################

def cmd_synth_data(config: Configuration, out_dir: PathLike, config_path: Optional[PathLike] = None) -> SyntheticDataset:
    out_dir = Path(out_dir)
    run = RunManifest.start("synth-data", config, config_path)
    synth = replace(config.synth, normalization=config.data.normalization, pad_value=config.data.pad_value)
    result = generate_synthetic_dataset(synth, config.seed, out_dir)
    run.write(out_dir, train=out_dir / "train" / "manifest.json", test=out_dir / "test" / "manifest.json")
    return result


def cmd_pretrain_lm(
    config: Configuration,
    train_manifest: PathLike,
    out_dir: PathLike,
    config_path: Optional[PathLike] = None,
) -> Path:
    """Pre-train the frozen decoder on the caption pool of the training split."""
    out_dir = Path(out_dir)
    run = RunManifest.start("pretrain-lm", config, config_path, train=train_manifest)
    dataset = load_dataset(train_manifest)
    corpus = [caption for captions in dataset.category_caption_pool.values() for caption in captions]
    corpus += [sample.caption for sample in dataset.samples]
    decoder_config = replace(config.decoder, vocab_size=len(dataset.vocabulary))
    result = pretrain_lm(corpus, decoder_config, config.run_pretrain, vocabulary_size=len(dataset.vocabulary))
    decoder_path = save_decoder(out_dir / "decoder", result.decoder, dataset.vocabulary.fingerprint)
    log_path = out_dir / "pretrain_log.tsv"
    with open(log_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows([step, f"{loss:.6f}"] for step, loss in enumerate(result.losses))
    run.write(out_dir, decoder=decoder_path, log=log_path)
    return decoder_path


def cmd_train(
    config: Configuration,
    train_manifest: PathLike,
    decoder_path: PathLike,
    out_dir: PathLike,
    config_path: Optional[PathLike] = None,
) -> Path:
    out_dir = Path(out_dir)
    run = RunManifest.start("train", config, config_path, train=train_manifest, decoder=decoder_path)
    dataset = _load_split(train_manifest, config)
    decoder = load_decoder(decoder_path, dataset.vocabulary.fingerprint)
    prompt_ids = dataset.vocabulary.encode(config.generation.prompt) if config.generation.prompt else ()
    result = train(
        dataset, decoder, config.encoder, config.bridge, config.loss, config.run_optimizer,
        config.augmentation, proxy_mode=config.proxy.mode, prompt_ids=prompt_ids,
    )
    model_path = save_model(out_dir / "model", result.model, dataset_fingerprint=dataset.fingerprint,
                            decoder_path=decoder_path, seed=config.seed)
    log_path = write_training_log(result.log, out_dir / "training_log.tsv")
    run.write(out_dir, model=model_path, log=log_path)
    return model_path


def cmd_decode(
    config: Configuration,
    model_path: PathLike,
    test_manifest: PathLike,
    out_dir: PathLike,
    average: Optional[bool] = None,
    config_path: Optional[PathLike] = None,
) -> Path:
    """Decode a split into ``predictions.tsv``; repeated presentations are averaged when enabled."""
    out_dir = Path(out_dir)
    run = RunManifest.start("decode", config, config_path, model=model_path, test=test_manifest)
    model = load_model(model_path)
    dataset = _evaluation_split(test_manifest, config, average)
    predictions = decode_dataset(model, dataset, config.generation)
    path = write_predictions(predictions, out_dir / "predictions.tsv")
    run.write(out_dir, predictions=path)
    return path


def cmd_evaluate(
    config: Configuration,
    predictions_path: PathLike,
    test_manifest: PathLike,
    out_dir: PathLike,
    config_path: Optional[PathLike] = None,
) -> MetricReport:
    out_dir = Path(out_dir)
    run = RunManifest.start("evaluate", config, config_path, predictions=predictions_path, test=test_manifest)
    dataset = _load_split(test_manifest, config)
    report = evaluate_corpus(predictions_path, dataset, out_path=out_dir / "report.json")
    run.write(out_dir, report=out_dir / "report.json")
    return report


#######################################
# Experiment commands
#######################################

def _experiment_inputs(config: Configuration, train_manifest: PathLike, test_manifest: PathLike,
                       decoder_path: PathLike):
    train_set = load_dataset(train_manifest)
    test_set = load_dataset(test_manifest)
    if config.data.average_repetitions:
        test_set = collapse_repetitions(test_set)
    decoder = load_decoder(decoder_path, train_set.vocabulary.fingerprint)
    return train_set, test_set, decoder


def cmd_ablate_roi(
    config: Configuration,
    train_manifest: PathLike,
    test_manifest: PathLike,
    decoder_path: PathLike,
    out_dir: PathLike,
    config_path: Optional[PathLike] = None,
) -> List[CellResult]:
    out_dir = Path(out_dir)
    run = RunManifest.start("ablate-roi", config, config_path, train=train_manifest, test=test_manifest,
                            decoder=decoder_path)
    train_set, test_set, decoder = _experiment_inputs(config, train_manifest, test_manifest, decoder_path)
    results = run_roi_ablation(out_dir, config, train_set, test_set, decoder, decoder_path)
    run.write(out_dir, table=out_dir / "ablation.tsv")
    return results


def cmd_variant_grid(
    config: Configuration,
    train_manifest: PathLike,
    test_manifest: PathLike,
    decoder_path: PathLike,
    out_dir: PathLike,
    config_path: Optional[PathLike] = None,
) -> List[CellResult]:
    out_dir = Path(out_dir)
    run = RunManifest.start("variant-grid", config, config_path, train=train_manifest, test=test_manifest,
                            decoder=decoder_path)
    train_set, test_set, decoder = _experiment_inputs(config, train_manifest, test_manifest, decoder_path)
    results = run_variant_grid(out_dir, config, train_set, test_set, decoder, decoder_path)
    run.write(out_dir, table=out_dir / "variant_grid.tsv")
    return results


#######################################
# Analysis commands
#######################################

def cmd_tsne_export(
    config: Configuration,
    model_path: PathLike,
    manifest: PathLike,
    out_dir: PathLike,
    config_path: Optional[PathLike] = None,
) -> Dict[str, Any]:
    """t-SNE of class embeddings plus clustering statistics."""
    out_dir = Path(out_dir)
    run = RunManifest.start("tsne-export", config, config_path, model=model_path, data=manifest)
    model = load_model(model_path)
    dataset = _load_split(manifest, config)
    embeddings = class_embeddings(model, dataset.samples)
    labels = [sample.category for sample in dataset.samples]
    tsne_config = replace(config.analysis.tsne, seed=config.seed)
    if tsne_config.perplexity >= len(labels):
        perplexity = max(2.0, (len(labels) - 1) / 3.0)
        logger.warning(f"Perplexity {tsne_config.perplexity} too large for {len(labels)} points, using {perplexity:.2f}")
        tsne_config = replace(tsne_config, perplexity=perplexity)
    result = run_tsne(embeddings, tsne_config)
    coordinates_path = export_tsne(result.embedding, [s.sample_id for s in dataset.samples], labels,
                                   out_dir / "tsne.tsv")
    separation = category_separation(embeddings, labels)
    summary = {
        "kl_divergence": result.kl_divergence,
        "within_category_distance": separation.within,
        "across_category_distance": separation.across,
        **embedding_quality(embeddings, result.embedding, labels),
    }
    summary_path = write_json(out_dir / "tsne_summary.json", summary)
    run.write(out_dir, coordinates=coordinates_path, summary=summary_path)
    return summary


def cmd_visualize_cues(
    config: Configuration,
    model_path: PathLike,
    manifest: PathLike,
    out_dir: PathLike,
    threshold: Optional[float] = None,
    config_path: Optional[PathLike] = None,
) -> float:
    """Cue maps for every sample; returns the planted-block recovery rate."""
    out_dir = Path(out_dir)
    run = RunManifest.start("visualize-cues", config, config_path, model=model_path, data=manifest)
    model = load_model(model_path)
    dataset = _load_split(manifest, config)
    threshold = config.analysis.cue_threshold if threshold is None else threshold
    cue_maps = model_cue_maps(model, dataset, threshold)
    path = export_cue_maps(cue_maps, out_dir / "cue_maps.json")
    run.write(out_dir, cue_maps=path)
    rate = block_recovery_rate(cue_maps)
    logger.info(f"Planted block recovered for {rate:.1%} of samples")
    return rate
