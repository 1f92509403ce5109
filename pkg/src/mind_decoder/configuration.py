"""Define the configurable parameters of the decoding pipeline."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from dotenv import load_dotenv
from langchain_core.runnables import RunnableConfig, ensure_config

from mind_decoder.analysis import TsneConfig
from mind_decoder.augmentation import AugmentationConfig
from mind_decoder.dataset import NORMALIZATIONS, ROI_SUBSETS, SynthConfig
from mind_decoder.errors import ConfigError, InvalidArgumentError
from mind_decoder.modeling.bridge import BridgeConfig, DecoderConfig, GenerationConfig
from mind_decoder.modeling.encoder import ENCODER_VARIANTS, EncoderConfig
from mind_decoder.modeling.model import ProxyConfig
from mind_decoder.training import LossConfig, OptimizerConfig

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "MIND_DECODER_CONFIG"


def _load_env() -> None:
    env_path = Path('.env')
    if not env_path.exists():
        env_path = Path('../.env')
    if not env_path.exists():
        env_path = Path('../../.env')

    if env_path.exists():
        logger.info(f"Loading environment from {env_path.absolute()}")
        load_dotenv(env_path)
    else:
        logger.debug("No .env file found")


def load_config(path: Optional[Union[str, Path]] = None) -> dict:
    """Load configuration JSON: explicit path, $MIND_DECODER_CONFIG, config.json, then the template."""
    _load_env()

    config_dir = Path(__file__).parent
    candidates = [
        Path(path) if path else None,
        Path(os.environ[CONFIG_ENV_VAR]) if os.environ.get(CONFIG_ENV_VAR) else None,
        config_dir / 'config.json',
        config_dir / 'config.template.json',
    ]
    for candidate in candidates:
        if candidate is None:
            continue
        if not candidate.exists():
            logger.info(f"No configuration at {candidate}, trying the next source")
            continue
        logger.info(f"Loading configuration from {candidate}")
        try:
            with open(candidate, encoding="utf-8") as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed configuration file {candidate}: {e}") from e
        if not isinstance(config, dict):
            raise ConfigError(f"configuration file {candidate} must hold a JSON object")
        return config

    logger.error("No configuration template found!")
    return {}


# Load configuration
CONFIG = load_config()


@dataclass(kw_only=True)
class DataConfig:
    normalization: str = field(default="zscore", metadata={"description": "Per-ROI voxel normalization on load."})
    pad_value: float = field(default=0.0, metadata={"description": "Padding value of short ROI rows."})
    average_repetitions: bool = field(
        default=True,
        metadata={"description": "Average repeated test presentations before decoding."},
    )
    roi_subset: str = field(default="VC", metadata={"description": "ROI subset fed to the encoder: LVC, HVC or VC."})

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"data.normalization must be one of {NORMALIZATIONS}")
        if self.roi_subset not in ROI_SUBSETS:
            raise ConfigError(f"data.roi_subset must be one of {tuple(ROI_SUBSETS)}")


@dataclass(kw_only=True)
class AnalysisConfig:
    tsne: TsneConfig = field(default_factory=TsneConfig, metadata={"description": "t-SNE settings."})
    cue_threshold: Optional[float] = field(
        default=None,
        metadata={"description": "Cue-map mask threshold; None means grid mean + one std."},
    )


@dataclass(kw_only=True)
class ExperimentsConfig:
    variants: List[str] = field(default_factory=lambda: ["S", "B", "L"], metadata={"description": "Encoder sizes."})
    scaling_factors: List[int] = field(
        default_factory=lambda: [4, 8, 16],
        metadata={"description": "Bridge scaling factors N."},
    )
    ablation_subsets: List[str] = field(
        default_factory=lambda: ["LVC", "HVC", "VC"],
        metadata={"description": "ROI subsets compared by the ablation."},
    )
    ablation_variant: str = field(default="B", metadata={"description": "Encoder size used by the ablation."})
    ablation_scaling_factor: int = field(default=8, metadata={"description": "Bridge N used by the ablation."})
    desk_scale: bool = field(default=True, metadata={"description": "Use desk-scale encoder sizes."})

    def __post_init__(self):
        unknown = [v for v in self.variants + [self.ablation_variant] if v not in ENCODER_VARIANTS]
        if unknown:
            raise ConfigError(f"unknown encoder variants {unknown}")
        unknown = [s for s in self.ablation_subsets if s not in ROI_SUBSETS]
        if unknown:
            raise ConfigError(f"unknown ROI subsets {unknown}")


SECTIONS: Dict[str, type] = {
    "synth": SynthConfig,
    "data": DataConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "bridge": BridgeConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "pretrain": OptimizerConfig,
    "augmentation": AugmentationConfig,
    "proxy": ProxyConfig,
    "generation": GenerationConfig,
    "analysis": AnalysisConfig,
    "experiments": ExperimentsConfig,
}


def _build_section(name: str, values: Optional[Mapping[str, Any]]) -> Any:
    section_cls = SECTIONS[name]
    values = dict(values or {})
    known = {f.name for f in fields(section_cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    try:
        if name == "analysis" and isinstance(values.get("tsne"), Mapping):
            values["tsne"] = TsneConfig(**values["tsne"])
        return section_cls(**values)
    except (TypeError, ValueError, InvalidArgumentError) as e:
        raise ConfigError(f"invalid section {name!r}: {e}") from e


def _section_default(name: str):
    return field(
        default_factory=lambda: _build_section(name, CONFIG.get(name)),
        metadata={"description": f"{SECTIONS[name].__name__} section."},
    )


@dataclass(kw_only=True)
class Configuration:
    """The configuration of the fMRI-to-text decoding pipeline."""

    name: str = field(
        default=CONFIG.get('name', 'MindDecoder desk scale'),
        metadata={"description": "Name of this configuration."},
    )
    seed: int = field(
        default=CONFIG.get('seed', 0),
        metadata={"description": "Run seed; data, augment, init, proxy, dropout and tsne streams derive from it."},
    )
    synth: SynthConfig = _section_default("synth")
    data: DataConfig = _section_default("data")
    encoder: EncoderConfig = _section_default("encoder")
    decoder: DecoderConfig = _section_default("decoder")
    bridge: BridgeConfig = _section_default("bridge")
    loss: LossConfig = _section_default("loss")
    optimizer: OptimizerConfig = _section_default("optimizer")
    pretrain: OptimizerConfig = _section_default("pretrain")
    augmentation: AugmentationConfig = _section_default("augmentation")
    proxy: ProxyConfig = _section_default("proxy")
    generation: GenerationConfig = _section_default("generation")
    analysis: AnalysisConfig = _section_default("analysis")
    experiments: ExperimentsConfig = _section_default("experiments")

    def __post_init__(self):
        """Validate section types and log a short summary."""
        for name, section_cls in SECTIONS.items():
            if not isinstance(getattr(self, name), section_cls):
                raise ConfigError(f"section {name!r} must be a {section_cls.__name__}")
        logger.info(f"Using configuration: {self.name} (seed {self.seed})")
        logger.debug(
            f"Encoder {self.encoder.n_layers}x{self.encoder.embed_dim}, bridge N={self.bridge.scaling_factor}, "
            f"lambda={self.loss.lambda_clip}, lr={self.optimizer.learning_rate}"
        )

    @property
    def run_optimizer(self) -> OptimizerConfig:
        """Training optimizer settings carrying the run seed."""
        return replace(self.optimizer, seed=self.seed)

    @property
    def run_pretrain(self) -> OptimizerConfig:
        return replace(self.pretrain, seed=self.seed)

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> Configuration:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        values: Dict[str, Any] = {k: payload[k] for k in ("name", "seed") if k in payload}
        for name in SECTIONS:
            values[name] = _build_section(name, payload.get(name))
        return cls(**values)

    @classmethod
    def from_file(cls, path: Optional[Union[str, Path]] = None) -> Configuration:
        return cls.from_dict(load_config(path))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, overrides: Mapping[str, Any]) -> Configuration:
        """Overlay top-level values and per-section keys onto this configuration."""
        payload = self.to_dict()
        for key, value in overrides.items():
            if key in SECTIONS and isinstance(value, Mapping):
                section = dict(payload[key])
                if key == "analysis" and isinstance(value.get("tsne"), Mapping):
                    section["tsne"] = {**section["tsne"], **value["tsne"]}
                    value = {k: v for k, v in value.items() if k != "tsne"}
                section.update(value)
                payload[key] = section
            else:
                payload[key] = value
        return type(self).from_dict(payload)

    @classmethod
    def from_runnable_config(
        cls, config: Optional[RunnableConfig] = None
    ) -> Configuration:
        """Create a Configuration from a RunnableConfig, overlaying its ``configurable`` keys."""
        if config is None:
            logger.info("Creating new Configuration from config.json")
            return cls()

        config = ensure_config(config)
        configurable = config.get("configurable", {})

        if configurable is None or not isinstance(configurable, dict):
            logger.info("Creating new Configuration from config.json (no valid configurable)")
            return cls()

        known = {f.name for f in fields(cls)}
        overrides = {k: v for k, v in configurable.items() if k in known}
        return cls().with_overrides(overrides) if overrides else cls()
