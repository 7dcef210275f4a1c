"""Socket execution of a partitioned pipeline.

Each worker node listens on the address the run plan gives it. Whoever
feeds a node connects to it: the driver for first-stage nodes, upstream
workers otherwise. Final-stage nodes connect back to the driver. Every
connection begins with a hello carrying the run plan digest; a node that
hears a different digest refuses to serve and exits nonzero, because two
processes disagreeing about the plan must not exchange tensors.

A worker is one reader thread per inbound connection feeding one bounded
inbox (the backpressure surface), plus a single compute loop that
assembles per-inference parts, runs its share of the model, and writes
results downstream. Stats frames ride the same connections every ten
inferences and once more at shutdown; workers forward any stats they
receive so everything reaches the driver. Shutdown propagates the same
way once every upstream has said it.
"""

from __future__ import annotations

import queue
import socket
import subprocess
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .pipeline import (SINK_ID, SOURCE_ID, NodeRuntime, PipelineSpec,
                       SinkRuntime, build_pipeline, source_transfers)
from .planfile import RunPlan, load_plan
from .planner import NodeStats
from .reference import synth_input
from .wire import (Hello, Shutdown, StatsMsg, TensorFrame, WireError,
                   read_message, write_message)

DRIVER_HELLO_ID = 0xFFFFFFFF
STATS_EVERY = 10
CONNECT_TIMEOUT_S = 30.0
ACCEPT_TIMEOUT_S = 60.0


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


def _digest_bytes(plan: RunPlan) -> bytes:
    return bytes.fromhex(plan.plan_hash)


def in_senders(pipeline: PipelineSpec, node_id: int) -> list[int]:
    """Who opens a connection into this node, in part-merge order."""
    spec = pipeline.nodes[node_id]
    if spec.merge is not None:
        return list(spec.merge_sources)
    if spec.stage_index == 0:
        return [SOURCE_ID]
    senders = [nid for nid, other in sorted(pipeline.nodes.items())
               if other.out is not None and node_id in other.out.targets]
    return senders


def _connect_with_retry(addr: str, deadline_s: float = CONNECT_TIMEOUT_S):
    host, port = _parse_addr(addr)
    deadline = time.monotonic() + deadline_s
    last = None
    while time.monotonic() < deadline:
        try:
            return socket.create_connection((host, port), timeout=5.0)
        except OSError as e:
            last = e
            time.sleep(0.05)
    raise ConnectionError(f"could not reach {addr}: {last}")


class _Conn:
    """One established connection with framed read/write and a write lock."""

    def __init__(self, sock: socket.socket, peer: int):
        self.sock = sock
        self.peer = peer
        self.rfile = sock.makefile("rb")
        self.wfile = sock.makefile("wb")
        self.wlock = threading.Lock()

    def send(self, msg) -> None:
        with self.wlock:
            write_message(self.wfile, msg)

    def read(self):
        return read_message(self.rfile)

    def close(self) -> None:
        for f in (self.rfile, self.wfile):
            try:
                f.close()
            except OSError:
                pass
        try:
            self.sock.close()
        except OSError:
            pass


def _handshake_out(sock: socket.socket, my_id: int, digest: bytes) -> _Conn:
    conn = _Conn(sock, peer=-999)
    conn.send(Hello(node_id=my_id & 0xFFFFFFFF, plan_digest=digest))
    reply = conn.read()
    if not isinstance(reply, Hello):
        raise WireError(f"expected hello back, got {type(reply).__name__}")
    if reply.plan_digest != digest:
        raise WireError("peer is running a different plan")
    conn.peer = reply.node_id
    return conn

def _handshake_in(sock: socket.socket, my_id: int, digest: bytes) -> _Conn:
    conn = _Conn(sock, peer=-999)
    hello = conn.read()
    if not isinstance(hello, Hello):
        raise WireError(f"expected hello, got {type(hello).__name__}")
    if hello.plan_digest != digest:
        conn.close()
        raise WireError(
            f"hello from node {hello.node_id} carries a different plan digest")
    conn.send(Hello(node_id=my_id & 0xFFFFFFFF, plan_digest=digest))
    conn.peer = hello.node_id
    return conn


class _Inbox:
    """Bounded mailbox all reader threads feed; occupancy sampled per put."""

    def __init__(self, capacity: int):
        self.q: queue.Queue = queue.Queue(maxsize=capacity)
        self.occ_hist: Counter = Counter()
        self._lock = threading.Lock()

    def put(self, src: int, msg) -> None:
        self.q.put((src, msg))
        with self._lock:
            self.occ_hist[self.q.qsize()] += 1

    def get(self):
        return self.q.get()


def serve_node(plan: RunPlan, node_id: int, queue_capacity: int = 4,
               pipeline: Optional[PipelineSpec] = None) -> NodeStats:
    """Run one worker until shutdown; returns the stats it reported."""
    pipe = pipeline or build_pipeline(plan)
    spec = pipe.nodes[node_id]
    runtime = NodeRuntime(pipe, node_id)
    digest = _digest_bytes(plan)
    senders = in_senders(pipe, node_id)

    # accept inbound connections
    host, port = _parse_addr(plan.node_addrs[node_id])
    server = socket.create_server((host, port), backlog=len(senders) + 2)
    server.settimeout(ACCEPT_TIMEOUT_S)
    inbound: dict[int, _Conn] = {}
    try:
        while len(inbound) < len(senders):
            sock, _ = server.accept()
            conn = _handshake_in(sock, node_id, digest)
            inbound[conn.peer if conn.peer != DRIVER_HELLO_ID else SOURCE_ID] = conn
    finally:
        server.close()

    # open outbound connections, driver last so it can be accepting already
    out_targets = list(dict.fromkeys(spec.out.targets))
    outbound: dict[int, _Conn] = {}
    for tgt in out_targets:
        addr = plan.driver_addr if tgt == SINK_ID else plan.node_addrs[tgt]
        sock = _connect_with_retry(addr)
        outbound[tgt] = _handshake_out(sock, node_id, digest)
    stats_conn = outbound[out_targets[0]]

    inbox = _Inbox(queue_capacity)

    def reader(src: int, conn: _Conn):
        while True:
            try:
                msg = conn.read()
            except WireError:
                inbox.put(src, Shutdown())
                return
            inbox.put(src, msg)
            if isinstance(msg, Shutdown):
                return

    threads = []
    for src, conn in inbound.items():
        th = threading.Thread(target=reader, args=(src, conn), daemon=True)
        th.start()
        threads.append(th)

    pending: dict[int, dict[int, np.ndarray]] = {}
    done_srcs: set[int] = set()
    jobs = 0
    work_s = 0.0
    t_first: Optional[float] = None
    t_last = time.perf_counter()

    def current_stats() -> NodeStats:
        span = max(t_last - (t_first if t_first is not None else t_last), 1e-9)
        return NodeStats(
            node=node_id,
            observed_latency_s=work_s / jobs if jobs else 0.0,
            busy_fraction=min(1.0, work_s / span),
            queue_occupancy_hist={int(k): int(v)
                                  for k, v in sorted(inbox.occ_hist.items())})

    need = spec.parts_per_inference
    while len(done_srcs) < len(senders):
        src, msg = inbox.get()
        if isinstance(msg, Shutdown):
            done_srcs.add(src)
            continue
        if isinstance(msg, StatsMsg):
            stats_conn.send(msg)
            continue
        if not isinstance(msg, TensorFrame):
            continue
        parts = pending.setdefault(msg.inference_id, {})
        parts[msg.src] = msg.tensor
        if len(parts) < need:
            continue
        del pending[msg.inference_id]
        t0 = time.perf_counter()
        if t_first is None:
            t_first = t0
        for target, tensor in runtime.process(msg.inference_id, parts):
            outbound[target].send(TensorFrame(
                inference_id=msg.inference_id, src=node_id, tensor=tensor))
        t_last = time.perf_counter()
        work_s += t_last - t0
        jobs += 1
        if jobs % STATS_EVERY == 0:
            stats_conn.send(StatsMsg(payload=current_stats().to_json()))

    final = current_stats()
    stats_conn.send(StatsMsg(payload=final.to_json()))
    for tgt, conn in outbound.items():
        conn.send(Shutdown())
    for conn in outbound.values():
        conn.close()
    for conn in inbound.values():
        conn.close()
    return final


@dataclass
class RunResult:
    outputs: list[np.ndarray]
    stats: dict[int, NodeStats]
    wall_s: float
    inferences: int

    @property
    def stats_list(self) -> list[NodeStats]:
        return [self.stats[k] for k in sorted(self.stats)]


def drive_pipeline(plan: RunPlan, inferences: int,
                   inputs: Optional[list[np.ndarray]] = None,
                   spawn_local: bool = False,
                   queue_capacity: int = 4,
                   plan_path: Optional[str] = None) -> RunResult:
    """Feed the pipeline, collect ordered outputs and worker stats.

    With spawn_local the workers are started as local subprocesses from
    the plan file; otherwise they must already be running.
    """
    pipe = build_pipeline(plan)
    digest = _digest_bytes(plan)
    sink = SinkRuntime(pipe)

    host, port = _parse_addr(plan.driver_addr)
    server = socket.create_server((host, port),
                                  backlog=len(pipe.sink_sources) + 2)
    server.settimeout(ACCEPT_TIMEOUT_S)

    procs: list[subprocess.Popen] = []
    if spawn_local:
        if plan_path is None:
            raise ValueError("spawn_local needs the plan file path")
        for nid in sorted(pipe.nodes):
            procs.append(subprocess.Popen(
                [sys.executable, "-m", "pipeshard", "serve",
                 "--plan", str(plan_path), "--node", str(nid),
                 "--queue", str(queue_capacity)]))

    t_start = time.perf_counter()
    try:
        # connect to first-stage nodes
        feeds: dict[int, _Conn] = {}
        for tgt in dict.fromkeys(pipe.source_route.targets):
            sock = _connect_with_retry(plan.node_addrs[tgt])
            feeds[tgt] = _handshake_out(sock, DRIVER_HELLO_ID, digest)

        # accept connections from last-stage nodes
        returns: dict[int, _Conn] = {}
        while len(returns) < len(set(pipe.sink_sources)):
            sock, _ = server.accept()
            conn = _handshake_in(sock, DRIVER_HELLO_ID, digest)
            returns[conn.peer] = conn

        outputs: dict[int, np.ndarray] = {}
        stats: dict[int, NodeStats] = {}
        done = threading.Event()
        shut = Counter()

        def collector(src: int, conn: _Conn):
            while True:
                try:
                    msg = conn.read()
                except WireError:
                    break
                if isinstance(msg, TensorFrame):
                    y = sink.offer(msg.inference_id, msg.src, msg.tensor)
                    if y is not None:
                        outputs[msg.inference_id] = y
                elif isinstance(msg, StatsMsg):
                    st = NodeStats.from_json(msg.payload)
                    stats[st.node] = st
                elif isinstance(msg, Shutdown):
                    break
            shut[src] += 1
            if sum(shut.values()) >= len(returns):
                done.set()

        threads = []
        for src, conn in returns.items():
            th = threading.Thread(target=collector, args=(src, conn),
                                  daemon=True)
            th.start()
            threads.append(th)

        graph = plan.graph
        for i in range(inferences):
            x = inputs[i] if inputs is not None else \
                synth_input(graph, plan.seed, i)
            for target, tensor in source_transfers(pipe, i, x):
                feeds[target].send(TensorFrame(inference_id=i, src=SOURCE_ID,
                                               tensor=tensor))
        for conn in feeds.values():
            conn.send(Shutdown())

        if not done.wait(timeout=ACCEPT_TIMEOUT_S * 2):
            raise TimeoutError("pipeline did not drain before the timeout")
        for th in threads:
            th.join(timeout=5.0)
        for conn in feeds.values():
            conn.close()
        for conn in returns.values():
            conn.close()
    finally:
        server.close()
        for p in procs:
            try:
                p.wait(timeout=30.0)
            except subprocess.TimeoutExpired:
                p.kill()

    wall = time.perf_counter() - t_start
    if procs:
        bad = [p.returncode for p in procs if p.returncode != 0]
        if bad:
            raise RuntimeError(f"worker exited nonzero: {bad}")
    ordered = [outputs[i] for i in sorted(outputs)]
    if len(ordered) != inferences:
        raise RuntimeError(
            f"collected {len(ordered)} of {inferences} outputs")
    return RunResult(outputs=ordered, stats=stats, wall_s=wall,
                     inferences=inferences)
