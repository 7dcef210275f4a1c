"""Pipeline topology: routes, merge duties, traffic accounting, and the
in-process runtime the socket executor reuses."""

import numpy as np
import pytest

from pipeshard.costs import LinkProfile, layer_cost
from pipeshard.model_ir import parse_model
from pipeshard.pipeline import (SINK_ID, SOURCE_ID, NodeRuntime, Route,
                                SinkRuntime, build_pipeline, source_transfers,
                                trace_comm)
from pipeshard.planner import Assignment, PlanError, Stage
from pipeshard.planfile import DEFAULT_DEVICE, DEFAULT_LINK, make_run_plan
from pipeshard.reference import model_forward, synth_input
from pipeshard.splitter import (ConvChannelSplit, ConvFilterSplit,
                                ConvSpatialSplit, DenseInputSplit,
                                DenseOutputSplit, halo_rect, node_count)


def plan_for(tmp_path, model_text, stages, total_nodes, seed=7,
             link=DEFAULT_LINK):
    path = tmp_path / "m.mdl"
    path.write_text(model_text)
    graph = parse_model(model_text)
    asg = Assignment(graph=graph, total_nodes=total_nodes,
                     mem_bytes=DEFAULT_DEVICE.mem_bytes, stages=stages)
    return make_run_plan(asg, str(path), seed=seed, device=DEFAULT_DEVICE,
                         link=link)


def run_in_process(plan, x, inference_id=0):
    """Push one inference through NodeRuntime/SinkRuntime without sockets."""
    pipe = build_pipeline(plan)
    runtimes = {nid: NodeRuntime(pipe, nid) for nid in pipe.nodes}
    sink = SinkRuntime(pipe)
    inbox = {nid: {} for nid in pipe.nodes}
    for target, tensor in source_transfers(pipe, inference_id, x):
        inbox[target][SOURCE_ID] = tensor
    result = None
    # stages form a chain, so stage order is a valid execution order
    for stage in pipe.stage_nodes:
        for nid in stage:
            parts = inbox[nid]
            if not parts:
                continue  # replica not chosen for this inference
            for target, tensor in runtimes[nid].process(inference_id, parts):
                if target == SINK_ID:
                    y = sink.offer(inference_id, nid, tensor)
                    if y is not None:
                        result = y
                else:
                    inbox[target][nid] = tensor
    assert result is not None
    return result


# ---------------------------------------------------------------- routes

def test_round_robin_route_cycles_by_inference_id():
    route = Route(mode="rr", targets=(5, 9), elems=(100, 100))
    assert route.pick(0) == [(5, 100, None)]
    assert route.pick(1) == [(9, 100, None)]
    assert route.pick(2) == [(5, 100, None)]


def test_fanout_route_sends_every_slice_each_inference():
    route = Route(mode="fanout", targets=(1, 2), elems=(30, 34),
                  selectors=("a", "b"))
    assert route.pick(0) == [(1, 30, "a"), (2, 34, "b")]
    assert route.pick(7) == route.pick(0)


# ---------------------------------------------------- topology structure

CHAIN = """input 8
dense out=6 bias=1
relu
dense out=4 bias=1
"""


def test_simple_chain_wiring(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1,), layers=(2,)),
    ), total_nodes=2)
    pipe = build_pipeline(plan)
    assert pipe.source_route == Route(mode="rr", targets=(0,), elems=(8,))
    assert pipe.nodes[0].rx_elems == 8
    assert pipe.nodes[0].out == Route(mode="rr", targets=(1,), elems=(6,))
    assert pipe.nodes[1].rx_elems == 6
    assert pipe.nodes[1].out == Route(mode="rr", targets=(SINK_ID,),
                                      elems=(4,))
    assert pipe.sink_sources == (1,)
    assert pipe.sink_merge is None
    assert pipe.stage_nodes == [(0,), (1,)]


def test_split_stage_wiring_and_merge_duty(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0, 1), layers=(0,), method=DenseOutputSplit(2)),
        Stage(nodes=(2,), layers=(1, 2)),
    ), total_nodes=3)
    pipe = build_pipeline(plan)

    assert pipe.source_route.mode == "fanout"
    assert pipe.source_route.targets == (0, 1)
    # output splitting replicates the input to every shard
    assert pipe.source_route.elems == (8, 8)

    for nid in (0, 1):
        spec = pipe.nodes[nid]
        assert spec.kind == "shard"
        assert spec.shard_layer == 0
        assert spec.rx_elems == 8
        assert spec.out == Route(mode="rr", targets=(2,), elems=(3,))

    collector = pipe.nodes[2]
    assert collector.kind == "simple"
    assert collector.merge is not None
    assert collector.merge.op == "concat"
    assert collector.merge_sources == (0, 1)
    assert collector.parts_per_inference == 2
    assert collector.rx_elems == 6
    assert pipe.sink_merge is None


def test_sum_merge_keeps_activation_downstream(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0, 1), layers=(0,), method=DenseInputSplit(2)),
        Stage(nodes=(2,), layers=(1, 2)),
    ), total_nodes=3)
    pipe = build_pipeline(plan)
    # input rows go 4+4, partial outputs are full width
    assert pipe.source_route.elems == (4, 4)
    collector = pipe.nodes[2]
    assert collector.merge.op == "sum"
    assert collector.merge.activation_after_merge
    assert collector.merge.activation is None  # relu runs as layer 1
    assert collector.layers == (1, 2)
    assert collector.rx_elems == 12


def test_split_last_stage_merges_at_sink(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1, 2), layers=(2,), method=DenseOutputSplit(2)),
    ), total_nodes=3)
    pipe = build_pipeline(plan)
    assert pipe.sink_sources == (1, 2)
    assert pipe.sink_merge is not None
    assert pipe.sink_merge.op == "concat"
    assert SinkRuntime(pipe).expected == 2


def test_replicated_last_stage_expects_one_part(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1, 2), layers=(2,)),
    ), total_nodes=3)
    pipe = build_pipeline(plan)
    assert pipe.sink_sources == (1, 2)
    assert pipe.sink_merge is None
    # each inference returns from exactly one replica
    assert SinkRuntime(pipe).expected == 1


def test_adjacent_split_stages_rejected(tmp_path):
    text = "input 8\ndense out=6\ndense out=4\n"
    plan = plan_for(tmp_path, text, (
        Stage(nodes=(0, 1), layers=(0,), method=DenseOutputSplit(2)),
        Stage(nodes=(2, 3), layers=(1,), method=DenseOutputSplit(2)),
    ), total_nodes=4)
    with pytest.raises(PlanError, match="adjacent"):
        build_pipeline(plan)


# ------------------------------------------------------ traffic accounting

def _single_split_total(tmp_path, model_text, method):
    graph = parse_model(model_text)
    n = node_count(graph.layers[0], method)
    plan = plan_for(tmp_path, model_text,
                    (Stage(nodes=tuple(range(n)), layers=(0,),
                           method=method),),
                    total_nodes=n)
    return trace_comm(plan), layer_cost(graph.layers[0], method)


@pytest.mark.parametrize("model_text,method", [
    ("input 17\ndense out=10\n", DenseOutputSplit(3)),
    ("input 5\ndense out=7\n", DenseOutputSplit(3)),
    ("input 12\ndense out=9\n", DenseInputSplit(4)),
    ("input 13\ndense out=5 bias=1\n", DenseInputSplit(2)),
    ("input 8x6x5\nconv2d k=7 f=3 s=1 pad=same\n", ConvChannelSplit(3)),
    ("input 4x4x3\nconv2d k=6 f=1 s=1 pad=same\n", ConvChannelSplit(2)),
    ("input 5x5x6\nconv2d k=4 f=3 s=1 pad=same\n", ConvFilterSplit(4)),
    ("input 6x7x5\nconv2d k=3 f=5 s=1 pad=same bias=1\n", ConvFilterSplit(2)),
    ("input 11x13x3\nconv2d k=5 f=3 s=1 pad=same\n", ConvSpatialSplit(2, 2)),
    ("input 9x8x2\nconv2d k=3 f=5 s=1 pad=same\n", ConvSpatialSplit(3, 1)),
])
def test_traced_traffic_matches_cost_model(tmp_path, model_text, method):
    trace, cost = _single_split_total(tmp_path, model_text, method)
    assert trace["total_elems"] == cost.comm_total_elems


def test_spatial_trace_matches_halo_geometry_per_edge(tmp_path):
    text = "input 11x13x3\nconv2d k=5 f=3 s=1 pad=same\n"
    graph = parse_model(text)
    layer = graph.layers[0]
    plan = plan_for(tmp_path, text,
                    (Stage(nodes=(0, 1, 2, 3), layers=(0,),
                           method=ConvSpatialSplit(2, 2)),),
                    total_nodes=4)
    trace = trace_comm(plan)
    in_edges = {e["dst"]: e["elems"] for e in trace["edges"]
                if e["src"] == SOURCE_ID}
    out_edges = {e["src"]: e["elems"] for e in trace["edges"]
                 if e["dst"] == SINK_ID}
    halo = layer.f // 2
    for i in range(4):
        rect = halo_rect(layer.h_in, layer.w_in, 2, 2, i, halo)
        assert in_edges[i] == (rect.y1 - rect.y0) * (rect.x1 - rect.x0) \
            * layer.c_in
        cy0, cy1, cx0, cx1 = rect.cell
        assert out_edges[i] == (cy1 - cy0) * (cx1 - cx0) * layer.k


def test_trace_of_chain_with_middle_split(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1, 2), layers=(2,), method=DenseOutputSplit(2)),
    ), total_nodes=3)
    trace = trace_comm(plan)
    by_pair = {(e["src"], e["dst"]): e["elems"] for e in trace["edges"]}
    assert by_pair == {
        (SOURCE_ID, 0): 8,
        (0, 1): 6, (0, 2): 6,      # full activation to every shard
        (1, SINK_ID): 2, (2, SINK_ID): 2,
    }
    assert trace["total_elems"] == 24


def test_replicated_stage_traced_along_one_path(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1, 2), layers=(2,)),
    ), total_nodes=3)
    trace = trace_comm(plan)
    by_pair = {(e["src"], e["dst"]): e["elems"] for e in trace["edges"]}
    # inference 0 feeds replica 1 only; each node reports its own route
    assert (0, 1) in by_pair and (0, 2) not in by_pair
    assert by_pair[(1, SINK_ID)] == by_pair[(2, SINK_ID)] == 4
    assert trace["total_elems"] == 8 + 6 + 4 + 4


# --------------------------------------------------------- cycle estimates

OPAQUE_TWO = """input 100
opaque latency=0.25 mem=2048
opaque latency=0.5 mem=2048
"""


def test_node_cycle_counts_rx_compute_tx(tmp_path):
    # 100 elements = 3200 bits, so bandwidth 3200 bps moves one hop in 1 s
    link = LinkProfile(bandwidth_bits_per_s=3200.0, latency_s=0.0)
    plan = plan_for(tmp_path, OPAQUE_TWO, (
        Stage(nodes=(0,), layers=(0,)),
        Stage(nodes=(1, 2), layers=(1,)),
    ), total_nodes=3, link=link)
    pipe = build_pipeline(plan)
    assert pipe.node_cycle_s(0) == pytest.approx(1.0 + 0.25 + 1.0)
    assert pipe.node_cycle_s(1) == pytest.approx(1.0 + 0.5 + 1.0)
    # the replicated pair halves its effective cycle
    assert pipe.max_stage_cycle_s() == pytest.approx(2.25)


def test_fanout_sender_pays_for_every_slice(tmp_path):
    text = "input 8\nopaque latency=0.125 mem=64\ndense out=4\n"
    # 8 elements = 256 bits; bandwidth 256 bps makes each slice cost 1 s
    link = LinkProfile(bandwidth_bits_per_s=256.0, latency_s=0.0)
    plan = plan_for(tmp_path, text, (
        Stage(nodes=(0,), layers=(0,)),
        Stage(nodes=(1, 2), layers=(1,), method=DenseOutputSplit(2)),
    ), total_nodes=3, link=link)
    pipe = build_pipeline(plan)
    assert pipe.nodes[0].out.mode == "fanout"
    assert pipe.node_cycle_s(0) == pytest.approx(1.0 + 0.125 + 2.0)


# ------------------------------------------------------ in-process runtime

def test_runtime_output_split_matches_reference_exactly(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0, 1), layers=(0,), method=DenseOutputSplit(2)),
        Stage(nodes=(2,), layers=(1, 2)),
    ), total_nodes=3, seed=31)
    graph = plan.graph
    x = synth_input(graph, 31)
    y = run_in_process(plan, x)
    # each output row is computed by exactly one shard, so bitwise equal
    assert np.array_equal(y, model_forward(graph, x, seed=31))


def test_runtime_input_split_sums_then_activates(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0, 1), layers=(0,), method=DenseInputSplit(2)),
        Stage(nodes=(2,), layers=(1, 2)),
    ), total_nodes=3, seed=32)
    graph = plan.graph
    x = synth_input(graph, 32)
    y = run_in_process(plan, x)
    np.testing.assert_allclose(y, model_forward(graph, x, seed=32), atol=1e-4)


CONV_CHAIN = """input 6x6x3
conv2d k=4 f=3 s=1 pad=same bias=1
relu
flatten
dense out=5 bias=1
"""


@pytest.mark.parametrize("method,n", [
    (ConvChannelSplit(2), 2),
    (ConvFilterSplit(2), 2),
    (ConvSpatialSplit(2, 2), 4),
])
def test_runtime_conv_splits_match_reference(tmp_path, method, n):
    plan = plan_for(tmp_path, CONV_CHAIN, (
        Stage(nodes=tuple(range(n)), layers=(0,), method=method),
        Stage(nodes=(n,), layers=(1, 2, 3)),
    ), total_nodes=n + 1, seed=33)
    graph = plan.graph
    x = synth_input(graph, 33)
    y = run_in_process(plan, x)
    np.testing.assert_allclose(y, model_forward(graph, x, seed=33), atol=1e-4)


def test_runtime_split_last_stage(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1, 2), layers=(2,), method=DenseOutputSplit(2)),
    ), total_nodes=3, seed=34)
    graph = plan.graph
    x = synth_input(graph, 34)
    y = run_in_process(plan, x)
    assert np.array_equal(y, model_forward(graph, x, seed=34))


def test_runtime_replicated_stages_cover_every_inference(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1, 2), layers=(2,)),
    ), total_nodes=3, seed=35)
    graph = plan.graph
    for i in range(4):
        x = synth_input(graph, 35, inference_id=i)
        y = run_in_process(plan, x, inference_id=i)
        assert np.array_equal(y, model_forward(graph, x, seed=35)), i


def test_runtime_forwarder_stage_passes_through(tmp_path):
    text = "input 8\ndense out=4 bias=1\n"
    plan = plan_for(tmp_path, text, (
        Stage(nodes=(0,), layers=(0,)),
        Stage(nodes=(1,), layers=()),
    ), total_nodes=2, seed=36)
    graph = plan.graph
    pipe = build_pipeline(plan)
    assert pipe.nodes[1].rx_elems == 4
    assert pipe.nodes[1].out == Route(mode="rr", targets=(SINK_ID,),
                                      elems=(4,))
    x = synth_input(graph, 36)
    assert np.array_equal(run_in_process(plan, x),
                          model_forward(graph, x, seed=36))


def test_source_transfers_slice_split_first_stage(tmp_path):
    text = "input 6x6x2\nconv2d k=3 f=3 s=1 pad=same\n"
    plan = plan_for(tmp_path, text,
                    (Stage(nodes=(0, 1), layers=(0,),
                           method=ConvSpatialSplit(2, 1)),),
                    total_nodes=2, seed=37)
    pipe = build_pipeline(plan)
    x = synth_input(plan.graph, 37)
    sent = source_transfers(pipe, 0, x)
    assert [t for t, _ in sent] == [0, 1]
    # top strip plus one halo row below, bottom strip plus one above
    assert sent[0][1].shape == (4, 6, 2)
    assert sent[1][1].shape == (4, 6, 2)
    np.testing.assert_array_equal(sent[0][1], x[0:4])
    np.testing.assert_array_equal(sent[1][1], x[2:6])


def test_sink_collects_parts_in_any_arrival_order(tmp_path):
    plan = plan_for(tmp_path, CHAIN, (
        Stage(nodes=(0,), layers=(0, 1)),
        Stage(nodes=(1, 2), layers=(2,), method=DenseOutputSplit(2)),
    ), total_nodes=3, seed=38)
    pipe = build_pipeline(plan)
    sink = SinkRuntime(pipe)
    hi = np.array([2.0, 3.0], dtype=np.float32)
    lo = np.array([0.0, 1.0], dtype=np.float32)
    assert sink.offer(0, 2, hi) is None
    y = sink.offer(0, 1, lo)
    # merge order follows shard order, not arrival order
    np.testing.assert_array_equal(y, [0.0, 1.0, 2.0, 3.0])
