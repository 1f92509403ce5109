"""Define the state structures for the decoding pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Optional


@dataclass
class InputState:
    """Defines the input state of the pipeline, the narrow interface to the outside world.

    When both manifests are given the synthetic-data step is skipped.
    """

    out_dir: str = "runs/pipeline"
    """Root directory; each step writes into its own subdirectory."""

    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None


@dataclass
class PipelineState(InputState):
    """Complete pipeline state: the artifact each step hands to the next."""

    decoder_path: Optional[str] = None
    model_path: Optional[str] = None
    predictions_path: Optional[str] = None
    report: Dict[str, Any] = field(default_factory=dict)
