"""Placement: decide which layers split, how layers group into stages, and
which nodes run them.

The procedure, given a chain of layers and n identical nodes:

    1. any layer whose working set cannot fit one node's memory is split
       with the cheapest applicable method at the smallest division that
       fits (choose_split);
    2. the remaining runs of whole layers are grouped into contiguous
       stages so the slowest stage is as fast as possible, subject to
       each stage fitting in memory (group_layers / an exact threshold
       search across runs);
    3. leftover nodes go to work: the slowest stage is split further when
       it is a single splittable layer, otherwise it is replicated and
       fed round-robin.

Estimates come from a ProfileDB: modeled entries are synthesized from
the cost formulas and a device/link profile, and measured entries (fed
back from a simulation or a live run) override them, so re-planning after
a run converges toward observed behavior.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from math import prod
from typing import Optional, Sequence, Union

from .costs import (BYTES_PER_ELEMENT, DeviceProfile, LayerCost, LinkProfile,
                    compute_seconds, estimate_latency, layer_cost,
                    transfer_seconds)
from .model_ir import LayerSpec, ModelGraph, activation_elems, layer_signature
from .splitter import (ConvChannelSplit, ConvFilterSplit, ConvSpatialSplit,
                       DenseInputSplit, DenseOutputSplit, SplitError,
                       SplitMethod, method_label, node_count, parse_method,
                       split_layer, weights_elems_per_shard, selector_elems)


class PlanError(ValueError):
    """Raised when no feasible placement exists for the given budget."""


# ------------------------------------------------------------- assignment

@dataclass(frozen=True)
class ShardTask:
    """One shard of a split layer, as referenced by plans and node task lists."""
    layer: int
    method: SplitMethod
    index: int

    def label(self) -> str:
        return f"L{self.layer}.{method_label(self.method)}#{self.index}"


TaskRef = Union[int, ShardTask]


def task_label(task: TaskRef) -> str:
    return f"L{task}" if isinstance(task, int) else task.label()


def parse_task(text: str) -> TaskRef:
    text = text.strip()
    if not text.startswith("L"):
        raise PlanError(f"bad task {text!r}")
    if "." not in text:
        return int(text[1:])
    head, _, rest = text.partition(".")
    body, sep, idx = rest.rpartition("#")
    if not sep or not idx:
        raise PlanError(f"shard task needs #index: {text!r}")
    return ShardTask(layer=int(head[1:]), method=parse_method(body),
                     index=int(idx))


@dataclass(frozen=True)
class Stage:
    """One pipeline stage: either a run of whole layers on one node (or on
    r replica nodes fed round-robin), or one split layer across shard nodes."""
    nodes: tuple[int, ...]
    layers: tuple[int, ...]
    method: Optional[SplitMethod] = None

    @property
    def is_split(self) -> bool:
        return self.method is not None

    @property
    def replicas(self) -> int:
        return 1 if self.is_split else len(self.nodes)


@dataclass(frozen=True)
class Assignment:
    """Complete placement of a model chain on a node budget."""
    graph: ModelGraph
    total_nodes: int
    mem_bytes: int
    stages: tuple[Stage, ...]

    def __post_init__(self):
        covered = [li for st in self.stages for li in st.layers]
        if covered != list(range(len(self.graph.layers))):
            raise PlanError(f"stages cover layers {covered}, "
                            f"expected 0..{len(self.graph.layers) - 1}")
        nodes = [n for st in self.stages for n in st.nodes]
        if len(set(nodes)) != len(nodes):
            raise PlanError("a node appears in two stages")

    def nodes_used(self) -> list[int]:
        return [n for st in self.stages for n in st.nodes]

    def tasks(self) -> dict[int, list[TaskRef]]:
        out: dict[int, list[TaskRef]] = {}
        for st in self.stages:
            if st.is_split:
                for j, node in enumerate(st.nodes):
                    out[node] = [ShardTask(st.layers[0], st.method, j)]
            else:
                for node in st.nodes:
                    out[node] = list(st.layers)
        return out


# ------------------------------------------------------------ run stats

@dataclass
class NodeStats:
    """Per-node observations from a simulated or live pipeline run.

    The schema is shared verbatim between the simulator and the socket
    executor so either can feed refine().
    """
    node: int
    observed_latency_s: float
    busy_fraction: float
    queue_occupancy_hist: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"node": self.node,
                "observed_latency_s": self.observed_latency_s,
                "busy_fraction": self.busy_fraction,
                "queue_occupancy_hist": {str(k): v for k, v in
                                         sorted(self.queue_occupancy_hist.items())}}

    @staticmethod
    def from_json(d: dict) -> "NodeStats":
        return NodeStats(node=int(d["node"]),
                         observed_latency_s=float(d["observed_latency_s"]),
                         busy_fraction=float(d["busy_fraction"]),
                         queue_occupancy_hist={int(k): int(v) for k, v in
                                               d["queue_occupancy_hist"].items()})


PipelineStats = list


def median_occupancy(hist: dict[int, int]) -> float:
    samples = [depth for depth, count in sorted(hist.items())
               for _ in range(count)]
    return statistics.median(samples) if samples else 0.0


def find_bottleneck(stats: Sequence[NodeStats]) -> Optional[int]:
    """Node that is both queueing (median occupancy >= 1) and slow
    (latency at least 1.1x the mean); None when the pipeline is balanced."""
    if not stats:
        return None
    mean = statistics.fmean(s.observed_latency_s for s in stats)
    if mean <= 0:
        return None
    for s in sorted(stats, key=lambda s: -s.observed_latency_s):
        if (median_occupancy(s.queue_occupancy_hist) >= 1
                and s.observed_latency_s >= 1.1 * mean):
            return s.node
    return None


def find_idle(stats: Sequence[NodeStats]) -> list[int]:
    return [s.node for s in stats if s.busy_fraction < 0.1]


# ------------------------------------------------------------- profiles

@dataclass
class ProfileRecord:
    latency_s: float
    mem_bytes: int
    source: str                 # "measured" | "modeled"


def _record_key(layer: LayerSpec, method: Optional[SplitMethod]) -> tuple:
    if method is None:
        return (layer_signature(layer), "-", 1)
    return (layer_signature(layer), method_label(method),
            node_count(layer, method))


def layer_footprint_bytes(graph: ModelGraph, index: int) -> int:
    """Weights plus live input/output activations, in bytes."""
    layer = graph.layers[index]
    if layer.kind == "opaque":
        return layer.mem_bytes
    a_in, a_out = activation_elems(graph, index)
    return (layer.param_count() + a_in + a_out) * BYTES_PER_ELEMENT


def shard_footprint_bytes(layer: LayerSpec, method: SplitMethod) -> int:
    """Largest shard working set under a split: its weight slice plus its
    selector input and its partial output."""
    plan = split_layer(layer, method)
    in_shape = _layer_in_shape(layer)
    worst = 0
    for shard, w_elems in zip(plan.shards, weights_elems_per_shard(plan)):
        a_in = selector_elems(shard.selector, in_shape)
        a_out = _shard_out_elems(shard)
        worst = max(worst, (w_elems + a_in + a_out) * BYTES_PER_ELEMENT)
    return worst


def _layer_in_shape(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind == "dense":
        return (layer.d_in,)
    if layer.kind == "conv2d":
        return (layer.h_in, layer.w_in, layer.c_in)
    if layer.kind == "conv3d":
        return (layer.d_in, layer.h_in, layer.w_in, layer.c_in)
    raise PlanError(f"layer kind {layer.kind} has no split input shape")


def _shard_out_elems(shard) -> int:
    task = shard.task
    if isinstance(task, tuple):
        task = task[-1]
    if hasattr(shard.selector, "cell"):
        cy0, cy1, cx0, cx1 = shard.selector.cell
        return (cy1 - cy0) * (cx1 - cx0) * task.k
    return prod(task.out_shape())


class ProfileDB:
    """Latency/memory lookups for layers and split stages.

    Modeled figures come from the cost formulas against the configured
    device and link; measured figures, keyed the same way, shadow them.
    """

    def __init__(self, device: DeviceProfile, link: LinkProfile):
        self.device = device
        self.link = link
        self.records: dict[tuple, ProfileRecord] = {}

    # -- lookups ---------------------------------------------------------

    def layer_latency(self, graph: ModelGraph, index: int) -> float:
        layer = graph.layers[index]
        key = _record_key(layer, None)
        rec = self.records.get(key)
        if rec is not None:
            return rec.latency_s
        return self._modeled_layer_latency(graph, index)

    def _modeled_layer_latency(self, graph: ModelGraph, index: int) -> float:
        layer = graph.layers[index]
        if layer.kind == "opaque":
            return layer.latency_s
        cost = layer_cost(layer)
        # memory pressure is judged on the real footprint, activations included
        t = (cost.mults_per_node / self.device.elems_per_s_mult
             + cost.reductions_per_node / self.device.elems_per_s_reduce)
        if layer_footprint_bytes(graph, index) > self.device.mem_bytes:
            t *= self.device.swap_factor
        return t + transfer_seconds(
            cost.comm_in_per_node + cost.comm_out_per_node, self.link, 2)

    def split_latency(self, layer: LayerSpec, method: SplitMethod) -> float:
        key = _record_key(layer, method)
        rec = self.records.get(key)
        if rec is not None:
            return rec.latency_s
        return self.modeled_split_latency(layer, method)

    def modeled_split_latency(self, layer: LayerSpec,
                              method: SplitMethod) -> float:
        """Critical-path shard latency plus the merge reductions downstream."""
        cost = layer_cost(layer, method)
        dev = self.device
        t = (cost.mults_per_node / dev.elems_per_s_mult
             + cost.reductions_per_node / dev.elems_per_s_reduce)
        if shard_footprint_bytes(layer, method) > dev.mem_bytes:
            t *= dev.swap_factor
        t += transfer_seconds(cost.comm_in_per_node + cost.comm_out_per_node,
                              self.link, 2)
        return t + cost.merge_elems / dev.elems_per_s_reduce

    # -- feedback --------------------------------------------------------

    def record_measured(self, layer: LayerSpec, method: Optional[SplitMethod],
                        latency_s: float, mem_bytes: int = 0) -> None:
        self.records[_record_key(layer, method)] = ProfileRecord(
            latency_s=latency_s, mem_bytes=mem_bytes, source="measured")

    def absorb(self, assignment: Assignment,
               stats: Sequence[NodeStats]) -> None:
        """Fold per-node observations back into the table.

        A node running several layers reports one number; it is split
        across the layers in proportion to their modeled latencies.
        Layers with identical configurations share one record, so their
        samples are pooled by mean rather than overwriting each other.
        """
        by_node = {s.node: s for s in stats}
        samples: dict[tuple, list] = {}

        def offer(layer, method, value):
            key = _record_key(layer, method)
            samples.setdefault(key, []).append((layer, method, value))

        for st in assignment.stages:
            if st.is_split:
                layer = assignment.graph.layers[st.layers[0]]
                observed = [by_node[n].observed_latency_s
                            for n in st.nodes if n in by_node]
                if observed:
                    offer(layer, st.method, max(observed))
                continue
            node = st.nodes[0]
            if node not in by_node:
                continue
            observed = by_node[node].observed_latency_s
            modeled = [self._modeled_layer_latency(assignment.graph, li)
                       for li in st.layers]
            total = sum(modeled)
            for li, m in zip(st.layers, modeled):
                share = observed * (m / total) if total > 0 \
                    else observed / len(st.layers)
                offer(assignment.graph.layers[li], None, share)

        for rows in samples.values():
            layer, method, _ = rows[0]
            mean = statistics.fmean(v for _, _, v in rows)
            self.record_measured(layer, method, mean)


# ------------------------------------------------------------- grouping

def group_layers(latencies: Sequence[float], n_groups: int,
                 footprints: Optional[Sequence[int]] = None,
                 mem_bytes: Optional[int] = None) -> list[tuple[int, int]]:
    """Cut a chain into exactly n contiguous groups minimizing the largest
    group sum. Exact dynamic program; optionally rejects groups whose
    summed footprint exceeds mem_bytes.

    Returns half-open (start, stop) index ranges.
    """
    n_items = len(latencies)
    if not 1 <= n_groups <= n_items:
        raise PlanError(f"cannot cut {n_items} layers into {n_groups} groups")
    prefix = [0.0]
    for v in latencies:
        prefix.append(prefix[-1] + v)
    mem_prefix = [0]
    if footprints is not None:
        for v in footprints:
            mem_prefix.append(mem_prefix[-1] + v)

    def seg_ok(i: int, j: int) -> bool:
        if footprints is None or mem_bytes is None:
            return True
        return mem_prefix[j] - mem_prefix[i] <= mem_bytes

    INF = float("inf")
    best = [[INF] * (n_groups + 1) for _ in range(n_items + 1)]
    cut = [[-1] * (n_groups + 1) for _ in range(n_items + 1)]
    best[0][0] = 0.0
    for j in range(1, n_items + 1):
        gmax = min(j, n_groups)
        for g in range(1, gmax + 1):
            for i in range(g - 1, j):
                if best[i][g - 1] == INF or not seg_ok(i, j):
                    continue
                cand = max(best[i][g - 1], prefix[j] - prefix[i])
                if cand < best[j][g]:
                    best[j][g] = cand
                    cut[j][g] = i
    if best[n_items][n_groups] == INF:
        raise PlanError("no grouping satisfies the memory bound")
    bounds = []
    j, g = n_items, n_groups
    while g > 0:
        i = cut[j][g]
        bounds.append((i, j))
        j, g = i, g - 1
    return bounds[::-1]


# ------------------------------------------------------------ choosing

def candidate_methods(layer: LayerSpec, max_nodes: int) -> list[SplitMethod]:
    """Every applicable method/division pair using at most max_nodes nodes."""
    out: list[SplitMethod] = []
    if layer.kind == "dense":
        for n in range(2, min(max_nodes, layer.d_out) + 1):
            out.append(DenseOutputSplit(n))
        for n in range(2, min(max_nodes, layer.d_in) + 1):
            out.append(DenseInputSplit(n))
        return out
    if layer.kind in ("conv2d", "conv3d"):
        seen = set()
        for m in range(2, min(max_nodes, layer.k) + 1):
            per = -(-layer.k // m)
            method = ConvChannelSplit(per)
            if node_count(layer, method) <= max_nodes and per not in seen:
                seen.add(per)
                out.append(method)
        seen = set()
        for m in range(2, min(max_nodes, layer.c_in) + 1):
            per = -(-layer.c_in // m)
            method = ConvFilterSplit(per)
            if node_count(layer, method) <= max_nodes and per not in seen:
                seen.add(per)
                out.append(method)
        if (layer.kind == "conv2d" and layer.stride == 1
                and layer.padding == "same"):
            for py in range(1, min(max_nodes, layer.h_in) + 1):
                for px in range(1, min(max_nodes // py, layer.w_in) + 1):
                    if py * px >= 2:
                        out.append(ConvSpatialSplit(py, px))
    return out


def choose_split(layer: LayerSpec, mem_bytes: int, max_nodes: int,
                 db: ProfileDB, prefer: str = "latency") -> tuple[SplitMethod, int]:
    """Cheapest feasible split of one layer within a node budget.

    Feasible means the largest shard's working set fits in memory. The
    default ranking is estimated stage latency, then fewer nodes; prefer
    "nodes" flips that, for memory-forced splits that should stay as
    small as the budget allows. Method name breaks remaining ties so the
    choice is deterministic.
    """
    best = None
    for method in candidate_methods(layer, max_nodes):
        if shard_footprint_bytes(layer, method) > mem_bytes:
            continue
        est = db.split_latency(layer, method)
        d = node_count(layer, method)
        key = (est, d) if prefer == "latency" else (d, est)
        key = key + (method.tag, method_label(method))
        if best is None or key < best[0]:
            best = (key, method)
    if best is None:
        raise PlanError(
            f"no split of {layer_signature(layer)} fits {mem_bytes} bytes "
            f"within {max_nodes} nodes")
    method = best[1]
    return method, node_count(layer, method)


# ------------------------------------------------------- the procedure

def generate_distribution(graph: ModelGraph, n: int, mem_bytes: int,
                          db: ProfileDB) -> Assignment:
    """Place a model chain on at most n nodes; see the module docstring."""
    if n < 1:
        raise PlanError("need at least one node")
    n_layers = len(graph.layers)

    # step 1: memory-forced splits
    split_for: dict[int, SplitMethod] = {}
    for i, layer in enumerate(graph.layers):
        if layer_footprint_bytes(graph, i) <= mem_bytes:
            continue
        if layer.kind not in ("dense", "conv2d", "conv3d"):
            raise PlanError(
                f"layer {i} ({layer.kind}) exceeds node memory and cannot "
                "be split")
        method, _ = choose_split(layer, mem_bytes, n, db, prefer="nodes")
        split_for[i] = method

    assignment = _assemble(graph, n, mem_bytes, db, split_for)

    # step 3: spend leftover nodes on the modeled bottleneck
    for _ in range(n):
        improved = _upgrade_bottleneck(graph, n, mem_bytes, db, split_for,
                                       assignment)
        if improved is None:
            break
        assignment = improved
    return assignment


def _run_units(n_layers: int, split_for: dict) -> list[tuple[int, int]]:
    """Maximal runs of unsplit layers between split layers."""
    runs, at = [], 0
    for i in sorted(split_for):
        if i > at:
            runs.append((at, i))
        at = i + 1
    if at < n_layers:
        runs.append((at, n_layers))
    return runs


def _assemble(graph: ModelGraph, n: int, mem_bytes: int, db: ProfileDB,
              split_for: dict[int, SplitMethod]) -> Assignment:
    """Steps 1+2: fix split stages, group the runs between them, and spend
    leftover nodes replicating the hottest groups.

    Every distinct run segment sum is tried as a stage-latency cap; greedy
    grouping gives the fewest stages under that cap, leftover nodes then
    replicate whichever simple stage models slowest. The cap whose final
    bottleneck models fastest wins, so a coarse grouping plus replicas can
    beat a fine grouping when nodes allow it.
    """
    n_layers = len(graph.layers)
    shard_nodes = sum(node_count(graph.layers[i], m)
                      for i, m in split_for.items())
    runs = _run_units(n_layers, split_for)
    budget = n - shard_nodes
    if budget < len(runs) or (not runs and budget < 0):
        need = shard_nodes + len(runs)
        raise PlanError(
            f"model needs at least {need} nodes "
            f"({shard_nodes} for shards, {len(runs)} for stages), have {n}")

    lat = [db.layer_latency(graph, i) for i in range(n_layers)]
    foot = [layer_footprint_bytes(graph, i) for i in range(n_layers)]
    for (a, b) in runs:
        for i in range(a, b):
            if foot[i] > mem_bytes:
                raise PlanError(
                    f"layer {i} does not fit a node even alone")
    split_lat = [db.split_latency(graph.layers[i], m)
                 for i, m in split_for.items()]
    floor = max(split_lat, default=0.0)

    candidates = sorted({sum(lat[i:j]) for a, b in runs
                         for i in range(a, b) for j in range(i + 1, b + 1)})
    best = None
    for cap in candidates:
        groups = [_greedy_groups(lat[a:b], foot[a:b], cap, mem_bytes)
                  for a, b in runs]
        sums = [sum(lat[a + i:a + j]) for (a, _), gs in zip(runs, groups)
                for i, j in gs]
        if len(sums) > budget:
            continue
        reps = _spread_replicas(sums, budget - len(sums), floor)
        bottleneck = max([floor] + [s / r for s, r in zip(sums, reps)])
        used = shard_nodes + sum(reps)
        key = (bottleneck, used, cap)
        if best is None or key < best[0]:
            best = (key, cap, groups, reps)
    if best is None and runs:
        raise PlanError("no grouping fits the node budget")

    stages: list[Stage] = []
    next_node = 0
    at = 0
    if best is not None:
        _, _, groups, reps = best
        run_groups = {a: gs for (a, _), gs in zip(runs, groups)}
        flat_index = {}
        counter = 0
        for (a, _), gs in zip(runs, groups):
            for g in gs:
                flat_index[(a, g)] = counter
                counter += 1
    while at < n_layers:
        if at in split_for:
            method = split_for[at]
            d = node_count(graph.layers[at], method)
            stages.append(Stage(nodes=tuple(range(next_node, next_node + d)),
                                layers=(at,), method=method))
            next_node += d
            at += 1
            continue
        a, b = next((r for r in runs if r[0] == at))
        for (i, j) in run_groups[a]:
            r = reps[flat_index[(a, (i, j))]]
            stages.append(Stage(nodes=tuple(range(next_node, next_node + r)),
                                layers=tuple(range(a + i, a + j))))
            next_node += r
        at = b
    return Assignment(graph=graph, total_nodes=n, mem_bytes=mem_bytes,
                      stages=tuple(stages))


def _spread_replicas(sums: list[float], spare: int, floor: float) -> list[int]:
    """Give spare nodes to the modeled-slowest stages, one at a time.

    Stops early once the bottleneck is a split stage (the floor), which no
    replica can lower. Greedy on max(sums/reps) is exact for this shape.
    """
    reps = [1] * len(sums)
    for _ in range(spare):
        if not sums:
            break
        j = max(range(len(sums)), key=lambda i: (sums[i] / reps[i], -i))
        if sums[j] / reps[j] <= floor + 1e-12:
            break
        reps[j] += 1
    return reps


def _greedy_groups(latencies, footprints, cap, mem_bytes) -> list[tuple[int, int]]:
    groups = []
    start, lat, mem = 0, 0.0, 0
    for idx, (l, m) in enumerate(zip(latencies, footprints)):
        if idx == start:
            lat, mem = l, m
        elif lat + l > cap + 1e-12 or mem + m > mem_bytes:
            groups.append((start, idx))
            start, lat, mem = idx, l, m
        else:
            lat += l
            mem += m
    groups.append((start, len(latencies)))
    return groups


def stage_estimate(assignment: Assignment, stage: Stage, db: ProfileDB) -> float:
    """Modeled latency of one stage, replicas discounted."""
    if stage.is_split:
        layer = assignment.graph.layers[stage.layers[0]]
        return db.split_latency(layer, stage.method)
    total = sum(db.layer_latency(assignment.graph, li) for li in stage.layers)
    return total / stage.replicas


def _upgrade_bottleneck(graph, n, mem_bytes, db, split_for, assignment):
    """Try splitting a layer inside the slowest stage if that models faster.

    Replica placement already happened during assembly, so the only move
    left is converting compute into intra-layer parallelism: pick the
    heaviest splittable layer in the bottleneck stage, choose a split that
    could use the spare nodes plus the stage's own, and keep the reassembled
    plan when its bottleneck actually drops.
    """
    spare = n - len(assignment.nodes_used())
    if spare <= 0:
        return None
    ests = [stage_estimate(assignment, st, db) for st in assignment.stages]
    worst = max(range(len(ests)), key=lambda i: ests[i])
    stage = assignment.stages[worst]

    if stage.is_split:
        # a memory-forced split was sized as small as possible; widen it
        target = stage.layers[0]
    else:
        splittable = [li for li in stage.layers
                      if graph.layers[li].kind in ("dense", "conv2d",
                                                   "conv3d")]
        if not splittable:
            return None
        target = max(splittable, key=lambda li: db.layer_latency(graph, li))
    layer = graph.layers[target]
    try:
        method, _ = choose_split(layer, mem_bytes,
                                 spare + len(stage.nodes), db)
    except PlanError:
        return None
    if method == split_for.get(target):
        return None
    if db.split_latency(layer, method) >= ests[worst]:
        return None
    trial = dict(split_for)
    trial[target] = method
    try:
        candidate = _assemble(graph, n, mem_bytes, db, trial)
    except PlanError:
        return None
    new_max = max(stage_estimate(candidate, st, db)
                  for st in candidate.stages)
    if new_max < max(ests) - 1e-12:
        split_for[target] = method
        return candidate
    return None


def refine(assignment: Assignment, stats: Sequence[NodeStats],
           db: ProfileDB) -> Assignment:
    """Re-plan with measured latencies folded in.

    With stationary measurements this reaches a fixed point: the second
    pass sees the same table and reproduces the same placement.
    """
    db.absorb(assignment, stats)
    return generate_distribution(assignment.graph, assignment.total_nodes,
                                 assignment.mem_bytes, db)
