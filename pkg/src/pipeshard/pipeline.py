"""Wire an Assignment into an executable pipeline topology.

Everything downstream of planning consumes this one view, so the traffic
the simulator charges, the traffic the cost model predicts, and the bytes
the socket executor actually moves all come from the same selectors.

Topology rules:

    source (the driver) -> stage 0 -> stage 1 -> ... -> sink (the driver)

    * a simple stage is one node running a run of whole layers; with r
      replica nodes, inference i goes to replica i mod r;
    * a split stage is d shard nodes working on every inference in
      parallel; the upstream holder of the full tensor slices per shard
      selector, and the downstream stage's node (or the sink) collects
      the d partials and merges them before its own layers run;
    * an activation that follows a split layer is just the first layer of
      the next stage, so sum-merges apply it after the merge, which is
      the only correct place for them.

Two split stages may not be adjacent; models interleave activations in
practice, which puts at least a tiny stage between them.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Optional

import numpy as np

from .costs import BYTES_PER_ELEMENT, LinkProfile, conv_mults_reductions
from .model_ir import ModelGraph
from .planner import PlanError, layer_footprint_bytes
from .planfile import RunPlan
from .reference import layer_forward, synth_layer_weights
from .splitter import (MergeOp, Shard, SpatialRect, merge_outputs, run_shard,
                       selector_elems, shard_input, slice_weights, split_layer)

SOURCE_ID = -1
SINK_ID = -2


@dataclass(frozen=True)
class Route:
    """Where a node's (or the source's) output goes.

    rr routes carry the whole tensor to one target chosen by inference id;
    fanout routes carry one slice per target, every inference.
    """
    mode: str                          # "rr" | "fanout"
    targets: tuple[int, ...]
    elems: tuple[int, ...]             # aligned with targets
    selectors: Optional[tuple] = None  # fanout only; aligned with targets

    def pick(self, inference_id: int) -> list[tuple[int, int, Optional[object]]]:
        """(target, elems, selector) transfers for one inference, in order."""
        if self.mode == "rr":
            j = inference_id % len(self.targets)
            return [(self.targets[j], self.elems[j], None)]
        sel = self.selectors or (None,) * len(self.targets)
        return list(zip(self.targets, self.elems, sel))


@dataclass
class NodeSpec:
    """One pipeline node: its work, its inbound shape, its outbound route."""
    node_id: int
    stage_index: int
    kind: str                          # "simple" | "shard"
    layers: tuple[int, ...] = ()
    shard: Optional[Shard] = None
    shard_layer: Optional[int] = None
    merge: Optional[MergeOp] = None    # set when this node merges shard partials
    merge_sources: tuple[int, ...] = ()
    parts_per_inference: int = 1
    rx_elems: int = 0
    compute_s: float = 0.0
    out: Route = None


@dataclass
class PipelineSpec:
    nodes: dict[int, NodeSpec]
    source_route: Route
    sink_sources: tuple[int, ...]
    sink_merge: Optional[MergeOp]
    stage_nodes: list[tuple[int, ...]]
    link: LinkProfile
    plan: Optional[RunPlan] = None

    def node_cycle_s(self, node_id: int) -> float:
        """Per-inference busy time of one node: read, compute, write."""
        spec = self.nodes[node_id]
        bw = self.link.bandwidth_bits_per_s
        rx = spec.rx_elems * BYTES_PER_ELEMENT * 8 / bw
        tx = sum(spec.out.elems) * BYTES_PER_ELEMENT * 8 / bw \
            if spec.out.mode == "fanout" else \
            (spec.out.elems[0] * BYTES_PER_ELEMENT * 8 / bw)
        return rx + spec.compute_s + tx

    def max_stage_cycle_s(self) -> float:
        worst = 0.0
        for nodes in self.stage_nodes:
            r = len(nodes) if self.nodes[nodes[0]].kind == "simple" else 1
            for n in nodes:
                worst = max(worst, self.node_cycle_s(n) / r)
        return worst


def _layer_work(layer) -> tuple[float, float]:
    """(mults, reductions) one whole layer costs a node."""
    if layer.kind == "dense":
        return layer.d_in * layer.d_out, layer.d_out
    if layer.kind in ("conv2d", "conv3d"):
        return conv_mults_reductions(layer)
    if layer.kind == "pool2d":
        return 0.0, prod(layer.out_shape()) * layer.window * layer.window
    if layer.kind == "activation":
        return 0.0, prod(layer.shape)
    return 0.0, 0.0


def _group_compute_s(graph: ModelGraph, layers, device) -> float:
    mults = reds = 0.0
    opaque = 0.0
    for li in layers:
        layer = graph.layers[li]
        if layer.kind == "opaque":
            opaque += layer.latency_s
            continue
        m, r = _layer_work(layer)
        mults += m
        reds += r
    t = mults / device.elems_per_s_mult + reds / device.elems_per_s_reduce
    if layers:
        footprint = sum(layer_footprint_bytes(graph, li) for li in layers)
        if footprint > device.mem_bytes:
            t *= device.swap_factor
    return t + opaque


def _shard_compute_s(shard: Shard, device) -> float:
    task = shard.task
    if isinstance(shard.selector, SpatialRect):
        cy0, cy1, cx0, cx1 = shard.selector.cell
        cell = (cy1 - cy0) * (cx1 - cx0)
        mults = cell * task.k * task.c_in * task.f * task.f
        reds = cell * task.k
        out_elems = cell * task.k
    elif task.kind == "dense":
        mults, reds = task.d_in * task.d_out, task.d_out
        out_elems = task.d_out
    else:
        mults, reds = conv_mults_reductions(task)
        out_elems = prod(task.out_shape())
    t = mults / device.elems_per_s_mult + reds / device.elems_per_s_reduce
    w_elems = task.param_count() if not isinstance(task, tuple) else \
        sum(l.param_count() for l in task)
    in_elems = _shard_in_elems(shard)
    if (w_elems + in_elems + out_elems) * BYTES_PER_ELEMENT > device.mem_bytes:
        t *= device.swap_factor
    return t


def _shard_in_elems(shard: Shard) -> int:
    task = shard.task if not isinstance(shard.task, tuple) else shard.task[0]
    if isinstance(shard.selector, SpatialRect):
        s = shard.selector
        return (s.y1 - s.y0) * (s.x1 - s.x0) * task.c_in
    # Reduced tasks already describe the selected region: a row range for
    # dense input splitting, a channel range for channel splitting, the
    # full tensor otherwise.
    if task.kind == "dense":
        return task.d_in
    return task.h_in * task.w_in * task.c_in if task.kind == "conv2d" else \
        task.d_in * task.h_in * task.w_in * task.c_in


def _shard_out_elems(shard: Shard) -> int:
    task = shard.task if not isinstance(shard.task, tuple) else shard.task[-1]
    if isinstance(shard.selector, SpatialRect):
        cy0, cy1, cx0, cx1 = shard.selector.cell
        return (cy1 - cy0) * (cx1 - cx0) * task.k
    return prod(task.out_shape())


def build_pipeline(plan: RunPlan) -> PipelineSpec:
    """Resolve stages into per-node work, inbound parts, and routes."""
    graph = plan.graph
    assignment = plan.assignment
    stages = assignment.stages
    for a, b in zip(stages, stages[1:]):
        if a.is_split and b.is_split:
            raise PlanError(
                "two split stages may not be adjacent; place a layer "
                "(an activation will do) between them")

    splits = {}
    for st in stages:
        if st.is_split:
            splits[st.layers[0]] = split_layer(graph.layers[st.layers[0]],
                                               st.method)

    nodes: dict[int, NodeSpec] = {}
    stage_nodes: list[tuple[int, ...]] = []
    for si, st in enumerate(stages):
        stage_nodes.append(st.nodes)
        if st.is_split:
            sp = splits[st.layers[0]]
            for j, node in enumerate(st.nodes):
                shard = sp.shards[j]
                nodes[node] = NodeSpec(
                    node_id=node, stage_index=si, kind="shard",
                    shard=shard, shard_layer=st.layers[0],
                    rx_elems=_shard_in_elems(shard),
                    compute_s=_shard_compute_s(shard, plan.device_for(node)))
        else:
            for node in st.nodes:
                nodes[node] = NodeSpec(
                    node_id=node, stage_index=si, kind="simple",
                    layers=st.layers,
                    compute_s=_group_compute_s(graph, st.layers,
                                               plan.device_for(node)))

    # inbound volume and merge duties, stage by stage
    def stage_out_elems(st) -> int:
        if st.is_split:
            return prod(graph.layers[st.layers[0]].out_shape())
        if st.layers:
            return prod(graph.layers[st.layers[-1]].out_shape())
        return None  # forwarder: passes its input through

    model_in_elems = prod(graph.input_shape)
    flowing = model_in_elems
    for si, st in enumerate(stages):
        prev_split = stages[si - 1] if si > 0 and stages[si - 1].is_split else None
        if prev_split is not None:
            sp = splits[prev_split.layers[0]]
            part_elems = [_shard_out_elems(s) for s in sp.shards]
            for node in st.nodes:
                spec = nodes[node]
                spec.merge = MergeOp(
                    op=sp.merge.op, axis=sp.merge.axis, grid=sp.merge.grid,
                    activation_after_merge=sp.merge.activation_after_merge)
                spec.merge_sources = prev_split.nodes
                spec.parts_per_inference = len(prev_split.nodes)
                spec.rx_elems = sum(part_elems)
                if spec.kind == "simple":
                    dev = plan.device_for(node)
                    merge_elems = sum(part_elems) if sp.merge.op == "sum" \
                        else stage_out_elems(prev_split)
                    spec.compute_s += merge_elems / dev.elems_per_s_reduce
        elif st.is_split:
            pass  # shard rx set at construction
        else:
            for node in st.nodes:
                nodes[node].rx_elems = flowing
        out = stage_out_elems(st)
        flowing = out if out is not None else flowing

    # routes, stage by stage
    def route_into(si: int, payload_elems: int) -> Route:
        if si >= len(stages):
            return Route(mode="rr", targets=(SINK_ID,),
                         elems=(payload_elems,))
        st = stages[si]
        if st.is_split:
            sp = splits[st.layers[0]]
            in_shape = graph.input_shape if st.layers[0] == 0 else \
                graph.layers[st.layers[0] - 1].out_shape()
            sels = tuple(s.selector for s in sp.shards)
            elems = tuple(selector_elems(s, in_shape) for s in sels)
            return Route(mode="fanout", targets=st.nodes, elems=elems,
                         selectors=sels)
        return Route(mode="rr", targets=st.nodes,
                     elems=(payload_elems,) * len(st.nodes))

    flowing = model_in_elems
    source_route = route_into(0, flowing)
    for si, st in enumerate(stages):
        out = stage_out_elems(st)
        flowing = out if out is not None else flowing
        if st.is_split:
            sp = splits[st.layers[0]]
            for j, node in enumerate(st.nodes):
                part = _shard_out_elems(sp.shards[j])
                nxt = route_into(si + 1, part)
                if nxt.mode == "fanout":
                    raise PlanError("split stages may not be adjacent")
                nodes[node].out = Route(mode="rr", targets=nxt.targets,
                                        elems=(part,) * len(nxt.targets))
        else:
            for node in st.nodes:
                nodes[node].out = route_into(si + 1, flowing)

    last = stages[-1]
    sink_merge = None
    if last.is_split:
        sp = splits[last.layers[0]]
        sink_merge = sp.merge
    return PipelineSpec(nodes=nodes, source_route=source_route,
                        sink_sources=last.nodes, sink_merge=sink_merge,
                        stage_nodes=stage_nodes, link=plan.link, plan=plan)


def trace_comm(plan: RunPlan) -> dict:
    """Element counts enqueued on every edge for one inference.

    Replicated stages are traced along inference 0's path. Totals match
    the cost model's communication accounting for the same placement.
    """
    spec = build_pipeline(plan)
    edges = []
    for target, elems, _ in spec.source_route.pick(0):
        edges.append({"src": SOURCE_ID, "dst": target, "elems": elems})
    for node_id in sorted(spec.nodes):
        node = spec.nodes[node_id]
        for target, elems, _ in node.out.pick(0):
            edges.append({"src": node_id, "dst": target, "elems": elems})
    return {"edges": edges, "total_elems": sum(e["elems"] for e in edges)}


# ------------------------------------------------------- numeric runtime

class NodeRuntime:
    """Actually run one node's work: weights, merging, slicing, forwarding.

    Used by the socket executor; also runnable in process for tests. The
    driver side uses source_transfers() and SinkRuntime.
    """

    def __init__(self, pipeline: PipelineSpec, node_id: int):
        self.spec = pipeline.nodes[node_id]
        self.pipeline = pipeline
        graph = pipeline.plan.graph
        seed = pipeline.plan.seed
        self._weights = {}
        if self.spec.kind == "shard":
            li = self.spec.shard_layer
            full = synth_layer_weights(graph.layers[li], seed, li)
            w, b = slice_weights(self.spec.shard, full[0], full[1])
            self._weights[li] = (w, b)
        else:
            for li in self.spec.layers:
                wb = synth_layer_weights(graph.layers[li], seed, li)
                if wb is not None:
                    self._weights[li] = wb

    def process(self, inference_id: int,
                parts: dict[int, np.ndarray]) -> list[tuple[int, np.ndarray]]:
        """Parts keyed by upstream node id -> (target, tensor) sends."""
        x = self._assemble_input(parts)
        y = self._run(x)
        out = []
        for target, _, selector in self.spec.out.pick(inference_id):
            out.append((target, shard_input(selector, y)
                        if selector is not None else y))
        return out

    def _assemble_input(self, parts: dict[int, np.ndarray]) -> np.ndarray:
        if self.spec.merge is not None:
            ordered = [parts[src] for src in self.spec.merge_sources]
            return merge_outputs(self.spec.merge, ordered)
        (x,) = parts.values()
        return x

    def _run(self, x: np.ndarray) -> np.ndarray:
        graph = self.pipeline.plan.graph
        if self.spec.kind == "shard":
            li = self.spec.shard_layer
            w, b = self._weights[li]
            # sender already applied the selector; weights arrive sliced
            shard = self.spec.shard
            if isinstance(shard.selector, SpatialRect):
                from .reference import conv2d_edge_padded
                return conv2d_edge_padded(x, w, shard.selector.pads,
                                          b if shard.task.bias else None)
            return layer_forward(shard.task, x, (w, b))
        y = x
        for li in self.spec.layers:
            y = layer_forward(graph.layers[li], y, self._weights.get(li))
        return y


def source_transfers(pipeline: PipelineSpec, inference_id: int,
                     x: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Slice one input tensor into the transfers the driver must send."""
    out = []
    for target, _, selector in pipeline.source_route.pick(inference_id):
        out.append((target, shard_input(selector, x)
                    if selector is not None else x))
    return out


class SinkRuntime:
    """Collect final-stage parts at the driver and merge when the last
    stage is split."""

    def __init__(self, pipeline: PipelineSpec):
        self.pipeline = pipeline
        # a split last stage sends one partial per shard; a simple last
        # stage sends one tensor, from whichever replica ran the inference
        self.expected = len(pipeline.sink_sources) \
            if pipeline.sink_merge is not None else 1
        self._pending: dict[int, dict[int, np.ndarray]] = {}

    def offer(self, inference_id: int, src: int,
              tensor: np.ndarray) -> Optional[np.ndarray]:
        """Returns the finished output once all parts are in."""
        bucket = self._pending.setdefault(inference_id, {})
        bucket[src] = tensor
        if len(bucket) < self.expected:
            return None
        del self._pending[inference_id]
        if self.pipeline.sink_merge is None:
            (y,) = bucket.values()
            return y
        ordered = [bucket[src] for src in self.pipeline.sink_sources]
        return merge_outputs(self.pipeline.sink_merge, ordered)
