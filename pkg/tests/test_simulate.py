"""Discrete-event simulator: throughput, latency, queueing, and reports.

The synthetic chains make every expectation computable by hand: zero-byte
hops leave service times as the only cost, so a stage that takes s seconds
completes one inference every s seconds once the pipe is full.
"""

import json

import numpy as np
import pytest

from pipeshard.costs import LinkProfile
from pipeshard.model_ir import parse_model
from pipeshard.pipeline import SINK_ID, SOURCE_ID, build_pipeline
from pipeshard.planner import (Assignment, Stage, find_bottleneck, find_idle,
                               median_occupancy)
from pipeshard.planfile import DEFAULT_DEVICE, DEFAULT_LINK, make_run_plan
from pipeshard.simulate import (SimConfig, SimReport, simulate,
                                synthetic_pipeline)


def run(services, inferences=50, replicas=None, hop_elems=0, link=None,
        **cfg):
    pipe = synthetic_pipeline(services, hop_elems=hop_elems, link=link,
                              replicas=replicas)
    return simulate(pipe, SimConfig(inferences=inferences, **cfg))


# ------------------------------------------------------------- throughput

def test_balanced_pipeline_rate_and_latency():
    rep = run([1.0, 1.0])
    assert rep.completions == 50
    assert rep.ips == pytest.approx(1.0)
    # every inference spends exactly one second per stage
    assert rep.latency_p50_s == pytest.approx(2.0)
    assert rep.latency_p95_s == pytest.approx(2.0)


def test_slowest_stage_sets_throughput():
    rep = run([2.0, 1.0, 1.0])
    assert rep.ips == pytest.approx(0.5)
    assert rep.latency_p95_s == pytest.approx(4.0)
    assert find_bottleneck(rep.node_stats) == 0


def test_mid_pipeline_bottleneck_backs_up_its_queue():
    rep = run([1.0, 2.0, 1.0], inferences=100)
    stats = {s.node: s for s in rep.node_stats}
    assert stats[1].busy_fraction > 0.95
    # the inbox in front of the slow stage sits at capacity
    assert median_occupancy(stats[1].queue_occupancy_hist) == 4
    assert max(stats[1].queue_occupancy_hist) <= 4
    assert find_bottleneck(rep.node_stats) == 1
    assert find_idle(rep.node_stats) == []


def test_single_inference_latency_is_sum_of_stage_times():
    rep = run([0.5, 0.25, 0.125], inferences=1)
    assert rep.completions == 1
    assert rep.discarded == 0
    assert rep.latency_p50_s == pytest.approx(0.875)
    assert rep.latency_mean_s == pytest.approx(0.875)


def test_replicas_multiply_stage_throughput():
    rep = run([0.3], inferences=60, replicas=[3])
    assert rep.completions == 60
    assert rep.ips == pytest.approx(3 / 0.3)


def test_replicated_final_stage_completes_every_inference():
    rep = run([0.1, 0.4], inferences=50, replicas=[1, 2], seed=3)
    assert rep.completions == 50
    assert rep.in_flight == 0
    assert rep.ips == pytest.approx(2 / 0.4, rel=0.02)


def test_transfer_time_charged_on_both_ends():
    # 250 elements = 8000 bits; 8000 bps moves one hop in exactly 1 s
    link = LinkProfile(bandwidth_bits_per_s=8000.0, latency_s=0.0)
    rep = run([1.0], inferences=1, hop_elems=[250, 250], link=link)
    # rx 1 s + compute 1 s + tx 1 s
    assert rep.latency_p50_s == pytest.approx(3.0)


def test_link_latency_extends_single_inference_latency():
    link = LinkProfile(bandwidth_bits_per_s=1e9, latency_s=0.05)
    rep = run([1.0, 1.0], inferences=1, hop_elems=0, link=link)
    # latency is measured from first-stage dequeue: one mid hop plus the
    # final hop to the sink land 0.05 s late each
    assert rep.latency_p50_s == pytest.approx(2.1)


# ---------------------------------------------------------------- queueing

def test_queue_capacity_bounds_occupancy():
    rep = run([0.1, 1.0], inferences=40, queue_capacity=2)
    stats = {s.node: s for s in rep.node_stats}
    assert max(stats[1].queue_occupancy_hist) <= 2
    rep4 = run([0.1, 1.0], inferences=40, queue_capacity=4)
    stats4 = {s.node: s for s in rep4.node_stats}
    assert max(stats4[1].queue_occupancy_hist) == 4


def test_backpressure_does_not_change_steady_rate():
    tight = run([1.0, 2.0, 1.0], inferences=60, queue_capacity=1)
    wide = run([1.0, 2.0, 1.0], inferences=60, queue_capacity=8)
    assert tight.ips == pytest.approx(0.5, rel=0.02)
    assert wide.ips == pytest.approx(0.5, rel=0.02)


# ------------------------------------------------------------- open mode

def test_open_mode_is_deterministic_per_seed():
    kw = dict(mode="open", rate_per_s=0.5, duration_s=200.0, seed=11)
    a = simulate(synthetic_pipeline([0.1]), SimConfig(**kw))
    b = simulate(synthetic_pipeline([0.1]), SimConfig(**kw))
    assert a.to_json() == b.to_json()
    assert a.mode == "open"
    assert a.completions == a.injected
    assert a.latency_p50_s == pytest.approx(0.1)


def test_open_mode_seed_changes_schedule():
    kw = dict(mode="open", rate_per_s=0.5, duration_s=200.0)
    a = simulate(synthetic_pipeline([0.1]), SimConfig(seed=1, **kw))
    b = simulate(synthetic_pipeline([0.1]), SimConfig(seed=2, **kw))
    assert (a.injected, a.sim_time_s) != (b.injected, b.sim_time_s)


def test_open_mode_accounts_for_in_flight_work():
    rep = simulate(synthetic_pipeline([0.4]),
                   SimConfig(mode="open", rate_per_s=2.0, duration_s=50.0,
                             seed=4))
    assert rep.completions + rep.in_flight == rep.injected
    assert rep.latency_p50_s >= 0.4 - 1e-9


# ------------------------------------------------------- report mechanics

def test_warmup_discard_is_tenth_of_completions():
    assert run([0.1], inferences=50).discarded == 5
    assert run([0.1], inferences=9).discarded == 0


def test_report_json_roundtrip():
    rep = run([1.0, 2.0], inferences=30)
    wire = json.loads(json.dumps(rep.to_json()))
    assert SimReport.from_json(wire) == rep


def test_config_validation():
    with pytest.raises(ValueError, match="mode"):
        SimConfig(mode="burst")
    with pytest.raises(ValueError, match="inference"):
        SimConfig(inferences=0)
    with pytest.raises(ValueError, match="capacity"):
        SimConfig(queue_capacity=0)


# ------------------------------------------------------------- real plans

def test_simulated_traffic_matches_plan_edges(tmp_path):
    text = "input 20\ndense out=10 bias=1\n"
    path = tmp_path / "m.mdl"
    path.write_text(text)
    graph = parse_model(text)
    asg = Assignment(graph=graph, total_nodes=1,
                     mem_bytes=DEFAULT_DEVICE.mem_bytes,
                     stages=(Stage(nodes=(0,), layers=(0,)),))
    plan = make_run_plan(asg, str(path), seed=5, device=DEFAULT_DEVICE,
                         link=DEFAULT_LINK)
    rep = simulate(build_pipeline(plan), SimConfig(inferences=10))
    assert rep.completions == 10
    assert rep.plan_hash == plan.plan_hash
    edges = {(e["src"], e["dst"]): e for e in rep.edges}
    assert edges[(SOURCE_ID, 0)]["elems"] == 20 * 10
    assert edges[(0, SINK_ID)]["elems"] == 10 * 10
    assert edges[(0, SINK_ID)]["transfers"] == 10
