"""Plan files: the on-disk contract between the planner, the simulator,
the CLI, and the node processes.

Line oriented, comments with ``#``:

    model models/toy.mdl
    seed 42
    device default mult=2e8 reduce=2e8 mem=256MB swap=4.0
    link bw=94.1Mbps latency=0.4ms
    driver 127.0.0.1:7100
    node 0 127.0.0.1:7101 : L0, L1
    node 1 127.0.0.1:7102 : L2.output[2]#0
    node 2 127.0.0.1:7103 : L2.output[2]#1
    node 3 127.0.0.1:7104 : L3

Tasks are layer indices (``L3``) or shards (``L2.output[2]#0``). Nodes
with identical whole-layer task lists form a replica group fed
round-robin. The driver address is where the last stage delivers and
where run control lives. Memory sizes accept KB/MB/GB (powers of 1024),
bandwidth accepts Kbps/Mbps/Gbps (powers of 1000), durations accept
s/ms/us.

Every participant hashes the canonical plan text plus the model text;
peers refuse to run together when the digests differ.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field

from .costs import DeviceProfile, LinkProfile
from .model_ir import ModelGraph, format_model, load_model
from .planner import (Assignment, PlanError, ShardTask, Stage, TaskRef,
                      parse_task, task_label)
from .splitter import node_count


_SIZE_UNITS = {"": 1, "B": 1, "KB": 1024, "MB": 1024 ** 2, "GB": 1024 ** 3}
_RATE_UNITS = {"": 1.0, "BPS": 1.0, "KBPS": 1e3, "MBPS": 1e6, "GBPS": 1e9}
_TIME_UNITS = {"": 1.0, "S": 1.0, "MS": 1e-3, "US": 1e-6}


def _split_unit(text: str, units) -> tuple[str, float]:
    text = text.strip()
    best = ""
    for unit in units:
        if unit and text.upper().endswith(unit) and len(unit) > len(best):
            best = unit
    number = text[:len(text) - len(best)] if best else text
    return number, units[best if best else ""]


def parse_size(text: str) -> int:
    """"256MB" -> bytes; powers of 1024."""
    number, mul = _split_unit(text, _SIZE_UNITS)
    try:
        return int(float(number) * mul)
    except ValueError:
        raise PlanError(f"bad size {text!r}")


def parse_rate(text: str) -> float:
    """"94.1Mbps" -> bits per second; powers of 1000."""
    number, mul = _split_unit(text, _RATE_UNITS)
    try:
        return float(number) * mul
    except ValueError:
        raise PlanError(f"bad rate {text!r}")


def parse_duration(text: str) -> float:
    """"0.4ms" -> seconds."""
    number, mul = _split_unit(text, _TIME_UNITS)
    try:
        return float(number) * mul
    except ValueError:
        raise PlanError(f"bad duration {text!r}")


DEFAULT_DEVICE = DeviceProfile(elems_per_s_mult=2.0e8,
                               elems_per_s_reduce=2.0e8,
                               mem_bytes=256 * 1024 ** 2,
                               swap_factor=4.0)
DEFAULT_LINK = LinkProfile(bandwidth_bits_per_s=94.1e6, latency_s=0.4e-3)


@dataclass
class RunPlan:
    """A parsed plan: the placement plus everything needed to execute it."""
    model_path: str
    graph: ModelGraph
    assignment: Assignment
    seed: int
    device: DeviceProfile
    node_devices: dict[int, DeviceProfile]
    link: LinkProfile
    driver_addr: str
    node_addrs: dict[int, str]
    plan_hash: str = ""

    def device_for(self, node: int) -> DeviceProfile:
        return self.node_devices.get(node, self.device)


def _parse_device_args(args: list[str], base: DeviceProfile) -> DeviceProfile:
    mult = base.elems_per_s_mult
    reduce_ = base.elems_per_s_reduce
    mem = base.mem_bytes
    swap = base.swap_factor
    for arg in args:
        key, _, val = arg.partition("=")
        if key == "mult":
            mult = float(val)
        elif key == "reduce":
            reduce_ = float(val)
        elif key == "mem":
            mem = parse_size(val)
        elif key == "swap":
            swap = float(val)
        else:
            raise PlanError(f"unknown device field {key!r}")
    return DeviceProfile(elems_per_s_mult=mult, elems_per_s_reduce=reduce_,
                         mem_bytes=mem, swap_factor=swap)


def _stages_from_tasks(graph: ModelGraph, node_tasks: dict[int, list[TaskRef]],
                       total_nodes: int, mem_bytes: int) -> Assignment:
    """Rebuild the stage list from per-node task lists.

    Shard tasks of one (layer, method) regroup into a split stage; nodes
    with identical whole-layer lists become one replicated stage.
    """
    splits: dict[tuple, dict[int, int]] = {}
    simple: list[tuple[int, tuple[int, ...]]] = []
    for node, tasks in node_tasks.items():
        if len(tasks) == 1 and isinstance(tasks[0], ShardTask):
            t = tasks[0]
            splits.setdefault((t.layer, t.method), {})[t.index] = node
        else:
            if any(isinstance(t, ShardTask) for t in tasks):
                raise PlanError(
                    f"node {node} mixes shard and whole-layer tasks")
            simple.append((node, tuple(tasks)))

    stages: list[Stage] = []
    for (layer_idx, method), members in splits.items():
        d = node_count(graph.layers[layer_idx], method)
        if sorted(members) != list(range(d)):
            raise PlanError(
                f"split of L{layer_idx} needs shards 0..{d - 1}, "
                f"have {sorted(members)}")
        stages.append(Stage(nodes=tuple(members[i] for i in range(d)),
                            layers=(layer_idx,), method=method))

    by_layers: dict[tuple[int, ...], list[int]] = {}
    for node, layers in simple:
        by_layers.setdefault(layers, []).append(node)
    for layers, nodes in by_layers.items():
        stages.append(Stage(nodes=tuple(sorted(nodes)), layers=layers))

    # task-free nodes are forwarders; they sit after the last real stage
    stages.sort(key=lambda st: (st.layers[0] if st.layers else float("inf"),
                                st.nodes[0]))
    return Assignment(graph=graph, total_nodes=total_nodes,
                      mem_bytes=mem_bytes, stages=tuple(stages))


def parse_plan(text: str, base_dir: str = ".") -> RunPlan:
    """Parse plan text; the referenced model file must exist."""
    model_path = None
    seed = 0
    device = DEFAULT_DEVICE
    node_devices: dict[int, DeviceProfile] = {}
    link = DEFAULT_LINK
    driver_addr = "127.0.0.1:7100"
    node_addrs: dict[int, str] = {}
    node_tasks: dict[int, list[TaskRef]] = {}

    for line_no, raw in enumerate(text.splitlines(), start=1):
        # shard labels carry a '#', so comments need space before the hash
        line = re.sub(r"(^|\s)#.*$", "", raw).strip()
        if not line:
            continue
        parts = line.split()
        word = parts[0]
        if word == "model":
            model_path = parts[1]
        elif word == "seed":
            seed = int(parts[1])
        elif word == "device":
            if parts[1] == "default":
                device = _parse_device_args(parts[2:], DEFAULT_DEVICE)
            else:
                node_devices[int(parts[1])] = _parse_device_args(
                    parts[2:], device)
        elif word == "link":
            bw = link.bandwidth_bits_per_s
            lat = link.latency_s
            for arg in parts[1:]:
                key, _, val = arg.partition("=")
                if key == "bw":
                    bw = parse_rate(val)
                elif key == "latency":
                    lat = parse_duration(val)
                else:
                    raise PlanError(f"line {line_no}: unknown link field {key!r}")
            link = LinkProfile(bandwidth_bits_per_s=bw, latency_s=lat)
        elif word == "driver":
            driver_addr = parts[1]
        elif word == "node":
            # addresses hold a colon, so the separator is the bare ":" token
            if len(parts) < 4 or parts[3] != ":":
                raise PlanError(
                    f"line {line_no}: expected 'node <id> <addr> : <tasks>'")
            node_id = int(parts[1])
            node_addrs[node_id] = parts[2]
            tasks_text = " ".join(parts[4:])
            if not tasks_text.strip():
                node_tasks[node_id] = []
            else:
                node_tasks[node_id] = [parse_task(t) for t in
                                       tasks_text.split(",")]
        else:
            raise PlanError(f"line {line_no}: unknown directive {word!r}")

    if model_path is None:
        raise PlanError("plan is missing a model line")
    resolved = model_path if os.path.isabs(model_path) \
        else os.path.normpath(os.path.join(base_dir, model_path))
    if not os.path.exists(resolved):
        raise PlanError(f"model file {resolved!r} not found")
    graph = load_model(resolved)

    # per-node devices may vary, but planning feasibility uses the default
    assignment = _stages_from_tasks(graph, node_tasks,
                                    total_nodes=len(node_tasks),
                                    mem_bytes=device.mem_bytes)
    plan = RunPlan(model_path=resolved, graph=graph, assignment=assignment,
                   seed=seed, device=device, node_devices=node_devices,
                   link=link, driver_addr=driver_addr, node_addrs=node_addrs)
    plan.plan_hash = plan_digest(plan)
    return plan


def load_plan(path: str) -> RunPlan:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_plan(text, base_dir=os.path.dirname(os.path.abspath(path)))


def format_plan(plan: RunPlan) -> str:
    dev = plan.device
    lines = [
        f"model {plan.model_path}",
        f"seed {plan.seed}",
        (f"device default mult={dev.elems_per_s_mult:g} "
         f"reduce={dev.elems_per_s_reduce:g} mem={dev.mem_bytes}B "
         f"swap={dev.swap_factor:g}"),
    ]
    for node, d in sorted(plan.node_devices.items()):
        lines.append(f"device {node} mult={d.elems_per_s_mult:g} "
                     f"reduce={d.elems_per_s_reduce:g} mem={d.mem_bytes}B "
                     f"swap={d.swap_factor:g}")
    lines.append(f"link bw={plan.link.bandwidth_bits_per_s:g}bps "
                 f"latency={plan.link.latency_s:g}s")
    lines.append(f"driver {plan.driver_addr}")
    tasks = plan.assignment.tasks()
    for node in sorted(tasks):
        spell = ", ".join(task_label(t) for t in tasks[node])
        lines.append(f"node {node} {plan.node_addrs[node]} : {spell}")
    return "\n".join(lines) + "\n"


def plan_digest(plan: RunPlan) -> str:
    """Digest of the placement and the model; identical across every
    process that loaded the same pair of files.

    The model line is dropped before hashing: the graph content is hashed
    instead, so nodes started from different working directories (hence
    different resolved paths) still agree.
    """
    h = hashlib.sha256()
    body = "\n".join(line for line in format_plan(plan).splitlines()
                     if not line.startswith("model "))
    h.update(body.encode())
    h.update(format_model(plan.graph).encode())
    return h.hexdigest()


def make_run_plan(assignment: Assignment, model_path: str, seed: int,
                  device: DeviceProfile, link: LinkProfile,
                  driver_addr: str = "127.0.0.1:7100",
                  base_port: int = 7101) -> RunPlan:
    """Attach addresses and profiles to a fresh assignment."""
    host = driver_addr.rsplit(":", 1)[0]
    node_addrs = {node: f"{host}:{base_port + node}"
                  for node in assignment.nodes_used()}
    plan = RunPlan(model_path=model_path, graph=assignment.graph,
                   assignment=assignment, seed=seed, device=device,
                   node_devices={}, link=link, driver_addr=driver_addr,
                   node_addrs=node_addrs)
    plan.plan_hash = plan_digest(plan)
    return plan
