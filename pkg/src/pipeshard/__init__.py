"""Partition single-batch DNN inference across small networked nodes.

The pieces, in dependency order: model_ir parses and shapes models,
reference executes them exactly, splitter cuts single layers into
equivalent shards, costs prices layers and shards, planner turns a model
plus a node budget into a placement, planfile freezes a placement to
disk, pipeline wires a placement into per-node work and routes, simulate
replays it in virtual time, wire frames tensors for sockets, and netexec
runs the real thing over TCP.
"""

from .costs import (BYTES_PER_ELEMENT, DeviceProfile, LayerCost, LinkProfile,
                    estimate_latency, layer_cost, speedup_estimate)
from .model_ir import (Activation, Conv2D, Conv3D, Dense, Flatten, ModelFormatError,
                       ModelGraph, OpaqueProfiled, Pool2D, format_model,
                       load_model, parse_model)
from .pipeline import PipelineSpec, build_pipeline, trace_comm
from .planfile import (DEFAULT_DEVICE, DEFAULT_LINK, RunPlan, format_plan,
                       load_plan, make_run_plan, parse_plan)
from .planner import (Assignment, NodeStats, PlanError, ProfileDB, Stage,
                      find_bottleneck, find_idle, generate_distribution,
                      group_layers, refine)
from .reference import model_forward, synth_input, synth_model_weights
from .simulate import SimConfig, SimReport, simulate, speedup_vs_single
from .splitter import (ConvChannelSplit, ConvFilterSplit, ConvSpatialSplit,
                       DenseInputSplit, DenseOutputSplit, SplitError,
                       merge_outputs, method_label, parse_method, run_shard,
                       split_layer, verify_split)

__version__ = "0.1.0"

__all__ = [
    "Activation", "Assignment", "BYTES_PER_ELEMENT", "Conv2D", "Conv3D",
    "ConvChannelSplit", "ConvFilterSplit", "ConvSpatialSplit",
    "DEFAULT_DEVICE", "DEFAULT_LINK", "Dense", "DenseInputSplit",
    "DenseOutputSplit", "DeviceProfile", "Flatten", "LayerCost",
    "LinkProfile", "ModelFormatError", "ModelGraph", "NodeStats",
    "OpaqueProfiled", "PipelineSpec", "PlanError", "Pool2D", "ProfileDB",
    "RunPlan", "SimConfig", "SimReport", "SplitError", "Stage",
    "build_pipeline", "estimate_latency", "find_bottleneck", "find_idle",
    "format_model", "format_plan", "generate_distribution", "group_layers",
    "layer_cost", "load_model", "load_plan", "make_run_plan",
    "merge_outputs", "method_label", "model_forward", "parse_method",
    "parse_model", "parse_plan", "refine", "run_shard", "simulate",
    "speedup_estimate", "speedup_vs_single", "split_layer", "synth_input",
    "synth_model_weights", "trace_comm", "verify_split",
]
