"""Discrete-event simulation of a partitioned inference pipeline.

Timing model, kept deliberately close to how the socket executor behaves
on single-core boards:

    * every node is one server: it reads its input (rx seconds), computes,
      then writes its outputs one after another (tx seconds each);
    * a transfer occupies the sender for elems * 32 bits / bandwidth, and
      the payload lands at the receiver that long plus the link latency
      after the send began;
    * each node has a bounded inbox counted in inferences; a sender needs
      a free slot before it may begin transmitting, which is what gives
      upstream stages backpressure;
    * the driver feeds the first stage with a window of one inference per
      target node in closed mode, so the first stage never queues behind
      the driver, or from a seeded Poisson schedule in open mode.

Reported latency is service entry at the first stage to arrival of the
last output part in closed mode, and scheduled arrival to completion in
open mode. The first tenth of completions is dropped as warmup before
throughput and percentiles are taken.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import BYTES_PER_ELEMENT, LinkProfile
from .pipeline import SINK_ID, SOURCE_ID, NodeSpec, PipelineSpec, Route
from .planner import NodeStats


@dataclass(frozen=True)
class SimConfig:
    mode: str = "closed"            # "closed" | "open"
    inferences: int = 100           # closed mode
    rate_per_s: float = 1.0         # open mode
    duration_s: float = 100.0       # open mode
    queue_capacity: int = 4
    seed: int = 0
    warmup_frac: float = 0.1

    def __post_init__(self):
        if self.mode not in ("closed", "open"):
            raise ValueError(f"unknown injection mode {self.mode!r}")
        if self.mode == "closed" and self.inferences < 1:
            raise ValueError("closed mode needs at least one inference")
        if self.queue_capacity < 1:
            raise ValueError("queue capacity must be at least 1")


@dataclass
class SimReport:
    ips: float
    latency_p50_s: float
    latency_p95_s: float
    latency_mean_s: float
    completions: int
    injected: int
    discarded: int
    in_flight: int
    sim_time_s: float
    mode: str
    seed: int
    plan_hash: str
    queue_capacity: int
    node_stats: list[NodeStats] = field(default_factory=list)
    edges: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "ips", "latency_p50_s", "latency_p95_s", "latency_mean_s",
            "completions", "injected", "discarded", "in_flight",
            "sim_time_s", "mode", "seed", "plan_hash", "queue_capacity")}
        d["node_stats"] = [s.to_json() for s in self.node_stats]
        d["edges"] = self.edges
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SimReport":
        stats = [NodeStats.from_json(s) for s in d.get("node_stats", [])]
        kw = {k: d[k] for k in (
            "ips", "latency_p50_s", "latency_p95_s", "latency_mean_s",
            "completions", "injected", "discarded", "in_flight",
            "sim_time_s", "mode", "seed", "plan_hash", "queue_capacity")}
        return cls(node_stats=stats, edges=d.get("edges", []), **kw)


class _NodeState:
    __slots__ = ("spec", "inbox", "ready", "reserved", "waiters", "idle",
                 "busy_s", "work_s", "jobs", "occ_hist")

    def __init__(self, spec: NodeSpec):
        self.spec = spec
        self.inbox: dict[int, set] = {}
        self.ready: set[int] = set()
        self.reserved: set[int] = set()
        self.waiters: deque = deque()
        self.idle = True
        self.busy_s = 0.0
        self.work_s = 0.0
        self.jobs = 0
        self.occ_hist: Counter = Counter()

    def occupancy(self) -> int:
        return len(self.inbox) + len(self.reserved)


class _Sim:
    def __init__(self, pipeline: PipelineSpec, config: SimConfig):
        self.pipe = pipeline
        self.cfg = config
        self.bw = pipeline.link.bandwidth_bits_per_s
        self.lat = pipeline.link.latency_s
        self.nodes = {nid: _NodeState(spec)
                      for nid, spec in pipeline.nodes.items()}
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        # source
        self.src_pending: list = []     # heap of (inference, order, target, elems)
        self.src_idle = True
        self.src_sent: dict[tuple, int] = {}
        # sink
        self.sink_parts: dict[int, set] = {}
        # one partial per shard after a split last stage, otherwise one
        # tensor from whichever replica handled the inference
        self.sink_need = len(pipeline.sink_sources) \
            if pipeline.sink_merge is not None else 1
        self.completed_at: dict[int, float] = {}
        self.started_at: dict[int, float] = {}
        self.injected_at: dict[int, float] = {}
        self.edge_elems: Counter = Counter()
        self.edge_count: Counter = Counter()
        self.total_to_inject = 0

    # ---- engine plumbing

    def schedule(self, t: float, fn, *args):
        heapq.heappush(self.heap, (t, self.seq, fn, args))
        self.seq += 1

    def run(self):
        while self.heap:
            t, _, fn, args = heapq.heappop(self.heap)
            self.now = t
            fn(t, *args)

    def tx_s(self, elems: int) -> float:
        return elems * BYTES_PER_ELEMENT * 8 / self.bw

    # ---- source

    def prime_closed(self):
        n = self.cfg.inferences
        route = self.pipe.source_route
        if route.mode == "rr":
            r = len(route.targets)
            for v in range(min(r, n)):
                self.enqueue_source(v, route.targets[v], route.elems[v])
        else:
            for j, tgt in enumerate(route.targets):
                self.enqueue_source(0, tgt, route.elems[j])
        self.total_to_inject = n

    def schedule_open(self):
        rng = np.random.default_rng([self.cfg.seed, 0x51A])
        t = 0.0
        i = 0
        route = self.pipe.source_route
        while True:
            t += rng.exponential(1.0 / self.cfg.rate_per_s)
            if t > self.cfg.duration_s:
                break
            self.schedule(t, self._open_arrival, i)
            i += 1
        self.total_to_inject = i

    def _open_arrival(self, t: float, i: int):
        self.injected_at[i] = t
        route = self.pipe.source_route
        for tgt, elems, _ in route.pick(i):
            self.enqueue_source(i, tgt, elems)

    def enqueue_source(self, inference: int, target: int, elems: int):
        key = (inference, target)
        if key in self.src_sent:
            return
        self.src_sent[key] = 1
        heapq.heappush(self.src_pending, (inference, len(self.src_sent),
                                          target, elems))
        # one active send chain at a time; claim it before scheduling
        if self.src_idle:
            self.src_idle = False
            self.schedule(self.now, self._source_next)

    def _source_next(self, t: float):
        if not self.src_pending:
            self.src_idle = True
            return
        inference, _, target, elems = heapq.heappop(self.src_pending)
        self.request_slot(target, inference, t,
                          self._source_tx, inference, target, elems)

    def _source_tx(self, t: float, inference: int, target: int, elems: int):
        tx = self.tx_s(elems)
        if self.cfg.mode == "closed" and inference not in self.injected_at:
            self.injected_at[inference] = t
        self.schedule(t + tx + self.lat, self.arrival, SOURCE_ID, target,
                      inference, elems)
        self.schedule(t + tx, self._source_next)

    def on_first_stage_dequeue(self, node_id: int, inference: int):
        if self.cfg.mode != "closed":
            return
        route = self.pipe.source_route
        if route.mode == "rr":
            stride = len(route.targets)
            j = route.targets.index(node_id)
            nxt = inference + stride
            if nxt < self.cfg.inferences:
                self.enqueue_source(nxt, node_id, route.elems[j])
        else:
            j = route.targets.index(node_id)
            nxt = inference + 1
            if nxt < self.cfg.inferences:
                self.enqueue_source(nxt, node_id, route.elems[j])

    # ---- transfers

    def request_slot(self, target: int, inference: int, t: float, cont, *args):
        if target == SINK_ID:
            self.schedule(t, cont, *args)
            return
        dst = self.nodes[target]
        if inference in dst.inbox or inference in dst.reserved:
            self.schedule(t, cont, *args)
        elif dst.occupancy() < self.cfg.queue_capacity:
            dst.reserved.add(inference)
            self.schedule(t, cont, *args)
        else:
            dst.waiters.append((inference, cont, args))

    def _wake_waiter(self, target: int, t: float):
        dst = self.nodes[target]
        if not dst.waiters or dst.occupancy() >= self.cfg.queue_capacity:
            return
        inference, cont, args = dst.waiters.popleft()
        if inference not in dst.inbox:
            dst.reserved.add(inference)
        self.schedule(t, cont, *args)

    def arrival(self, t: float, src: int, dst_id: int, inference: int,
                elems: int):
        self.edge_elems[(src, dst_id)] += elems
        self.edge_count[(src, dst_id)] += 1
        if dst_id == SINK_ID:
            parts = self.sink_parts.setdefault(inference, set())
            parts.add(src)
            if len(parts) == self.sink_need:
                self.completed_at[inference] = t
            return
        dst = self.nodes[dst_id]
        dst.reserved.discard(inference)
        parts = dst.inbox.setdefault(inference, set())
        parts.add(src)
        if len(parts) == dst.spec.parts_per_inference:
            dst.ready.add(inference)
        dst.occ_hist[dst.occupancy()] += 1
        self.try_start(dst_id, t)

    # ---- node server

    def try_start(self, node_id: int, t: float):
        node = self.nodes[node_id]
        if not node.idle or not node.ready:
            return
        inference = min(node.ready)
        node.ready.remove(inference)
        del node.inbox[inference]
        node.idle = False
        node.jobs += 1
        if node.spec.stage_index == 0:
            self.started_at.setdefault(inference, t)
            self.on_first_stage_dequeue(node_id, inference)
        self._wake_waiter(node_id, t)
        service = self.tx_s(node.spec.rx_elems) + node.spec.compute_s
        node.busy_s += service
        node.work_s += service
        sends = node.spec.out.pick(inference)
        self.schedule(t + service, self._node_send, node_id, inference,
                      sends, 0)

    def _node_send(self, t: float, node_id: int, inference: int,
                   sends: list, idx: int):
        node = self.nodes[node_id]
        if idx == len(sends):
            node.idle = True
            self.try_start(node_id, t)
            return
        target, elems, _ = sends[idx]
        self.request_slot(target, inference, t, self._node_tx,
                          node_id, inference, sends, idx)

    def _node_tx(self, t: float, node_id: int, inference: int,
                 sends: list, idx: int):
        node = self.nodes[node_id]
        target, elems, _ = sends[idx]
        tx = self.tx_s(elems)
        node.busy_s += tx
        node.work_s += tx
        self.schedule(t + tx + self.lat, self.arrival, node_id, target,
                      inference, elems)
        self.schedule(t + tx, self._node_send, node_id, inference,
                      sends, idx + 1)


def simulate(pipeline: PipelineSpec, config: SimConfig) -> SimReport:
    sim = _Sim(pipeline, config)
    if config.mode == "closed":
        sim.prime_closed()
    else:
        sim.schedule_open()
    sim.run()

    order = sorted(sim.completed_at.items(), key=lambda kv: kv[1])
    n_done = len(order)
    discard = int(config.warmup_frac * n_done)
    kept = order[discard:]
    basis = sim.started_at if config.mode == "closed" else sim.injected_at
    lats = np.array([t - basis[i] for i, t in kept]) if kept else np.array([0.0])
    boundary = order[discard - 1][1] if discard >= 1 else 0.0
    t_last = order[-1][1] if order else 0.0
    span = t_last - boundary
    ips = len(kept) / span if span > 0 else 0.0

    horizon = t_last if t_last > 0 else 1.0
    stats = []
    for nid in sorted(sim.nodes):
        st = sim.nodes[nid]
        stats.append(NodeStats(
            node=nid,
            observed_latency_s=st.work_s / st.jobs if st.jobs else 0.0,
            busy_fraction=st.busy_s / horizon,
            queue_occupancy_hist={int(k): int(v)
                                  for k, v in sorted(st.occ_hist.items())}))
    edges = [{"src": s, "dst": d, "elems": int(sim.edge_elems[(s, d)]),
              "transfers": int(sim.edge_count[(s, d)])}
             for s, d in sorted(sim.edge_elems)]
    plan_hash = pipeline.plan.plan_hash if pipeline.plan is not None else "synthetic"
    return SimReport(
        ips=ips,
        latency_p50_s=float(np.percentile(lats, 50, method="nearest")),
        latency_p95_s=float(np.percentile(lats, 95, method="nearest")),
        latency_mean_s=float(lats.mean()),
        completions=n_done,
        injected=sim.total_to_inject,
        discarded=discard,
        in_flight=sim.total_to_inject - n_done,
        sim_time_s=t_last,
        mode=config.mode,
        seed=config.seed,
        plan_hash=plan_hash,
        queue_capacity=config.queue_capacity,
        node_stats=stats,
        edges=edges)


def synthetic_pipeline(service_times_s: list[float],
                       hop_elems: int | list[int] = 0,
                       link: Optional[LinkProfile] = None,
                       replicas: Optional[list[int]] = None) -> PipelineSpec:
    """A plain chain of single-layer stages with given compute times.

    Useful for studying the queueing behaviour in isolation; hop_elems
    gives the payload on each of the len+1 hops.
    """
    n = len(service_times_s)
    if isinstance(hop_elems, int):
        hop_elems = [hop_elems] * (n + 1)
    if len(hop_elems) != n + 1:
        raise ValueError("need one hop payload per stage boundary")
    reps = replicas or [1] * n
    link = link or LinkProfile(bandwidth_bits_per_s=1e9, latency_s=0.0)

    nodes = {}
    stage_nodes = []
    next_id = 0
    groups = []
    for si in range(n):
        group = tuple(range(next_id, next_id + reps[si]))
        next_id += reps[si]
        groups.append(group)
        stage_nodes.append(group)
    for si in range(n):
        targets = groups[si + 1] if si + 1 < n else (SINK_ID,)
        route = Route(mode="rr", targets=targets,
                      elems=(hop_elems[si + 1],) * len(targets))
        for nid in groups[si]:
            nodes[nid] = NodeSpec(
                node_id=nid, stage_index=si, kind="simple", layers=(si,),
                parts_per_inference=1, rx_elems=hop_elems[si],
                compute_s=service_times_s[si], out=route)
    source_route = Route(mode="rr", targets=groups[0],
                         elems=(hop_elems[0],) * len(groups[0]))
    return PipelineSpec(nodes=nodes, source_route=source_route,
                        sink_sources=groups[-1], sink_merge=None,
                        stage_nodes=stage_nodes, link=link, plan=None)


def speedup_vs_single(plan, inferences: int = 40,
                      queue_capacity: int = 4) -> dict:
    """Simulated throughput of a plan against the whole model on one node."""
    from .pipeline import build_pipeline
    from .planfile import RunPlan
    from .planner import Assignment, Stage

    cfg = SimConfig(mode="closed", inferences=inferences,
                    queue_capacity=queue_capacity, seed=plan.seed)
    multi = simulate(build_pipeline(plan), cfg)

    graph = plan.graph
    single_assign = Assignment(
        graph=graph, total_nodes=1,
        mem_bytes=plan.device.mem_bytes,
        stages=(Stage(nodes=(0,), layers=tuple(range(len(graph.layers)))),))
    single_plan = RunPlan(
        model_path=plan.model_path, graph=graph, assignment=single_assign,
        seed=plan.seed, device=plan.device, node_devices={},
        link=plan.link, driver_addr=plan.driver_addr,
        node_addrs={0: plan.node_addrs.get(0, "127.0.0.1:7101")},
        plan_hash=plan.plan_hash + ":single")
    single = simulate(build_pipeline(single_plan), cfg)
    speedup = multi.ips / single.ips if single.ips > 0 else float("inf")
    return {"ips": multi.ips, "single_ips": single.ips, "speedup": speedup,
            "nodes": len(plan.assignment.nodes_used())}
