"""Define the end-to-end decoding pipeline as a LangGraph graph.

synth_data -> pretrain_lm -> train -> decode -> evaluate, each node delegating to the command of
the same name.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Literal

from langchain_core.runnables import RunnableConfig
from langgraph.graph import StateGraph

from mind_decoder.commands import cmd_decode, cmd_evaluate, cmd_pretrain_lm, cmd_synth_data, cmd_train
from mind_decoder.configuration import Configuration
from mind_decoder.state import InputState, PipelineState

logger = logging.getLogger(__name__)


def synth_data(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    """Generate a synthetic dataset under ``out_dir/data``."""
    configuration = Configuration.from_runnable_config(config)
    data_dir = Path(state.out_dir) / "data"
    cmd_synth_data(configuration, data_dir)
    return {
        "train_manifest": str(data_dir / "train" / "manifest.json"),
        "test_manifest": str(data_dir / "test" / "manifest.json"),
    }


def pretrain_lm(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    configuration = Configuration.from_runnable_config(config)
    path = cmd_pretrain_lm(configuration, state.train_manifest, Path(state.out_dir) / "lm")
    return {"decoder_path": str(path)}


def train(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    configuration = Configuration.from_runnable_config(config)
    path = cmd_train(configuration, state.train_manifest, state.decoder_path, Path(state.out_dir) / "train")
    return {"model_path": str(path)}


def decode(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    configuration = Configuration.from_runnable_config(config)
    path = cmd_decode(configuration, state.model_path, state.test_manifest, Path(state.out_dir) / "decode")
    return {"predictions_path": str(path)}


def evaluate(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    configuration = Configuration.from_runnable_config(config)
    report = cmd_evaluate(configuration, state.predictions_path, state.test_manifest,
                          Path(state.out_dir) / "evaluate")
    logger.info(f"Pipeline finished: {report.columns()}")
    return {"report": report.to_dict()}


def route_start(state: PipelineState) -> Literal["synth_data", "pretrain_lm"]:
    """Skip data generation when both manifests were supplied."""
    if state.train_manifest and state.test_manifest:
        return "pretrain_lm"
    return "synth_data"


# Define a new graph
builder = StateGraph(PipelineState, input=InputState, config_schema=Configuration)

builder.add_node(synth_data)
builder.add_node(pretrain_lm)
builder.add_node(train)
builder.add_node(decode)
builder.add_node(evaluate)

builder.add_conditional_edges("__start__", route_start)
builder.add_edge("synth_data", "pretrain_lm")
builder.add_edge("pretrain_lm", "train")
builder.add_edge("train", "decode")
builder.add_edge("decode", "evaluate")
builder.add_edge("evaluate", "__end__")

graph = builder.compile(
    interrupt_before=[],
    interrupt_after=[],
)
graph.name = "MindDecoder Pipeline"
