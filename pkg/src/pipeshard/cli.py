"""Command line front end.

Subcommands:

    cost      per-layer, per-method cost table      -> cost.csv + cost.png
    plan      generate a placement for N nodes      -> plan.txt
    simulate  discrete-event run of a plan          -> sim.json + sim.png
    verify    numeric split-vs-whole equivalence    -> verify.txt
    serve     run one worker node from a plan
    drive     feed a pipeline over sockets          -> run.json
    export    traffic + speedup report for a plan   -> export.csv + export.png

Report outputs land under --out with those fixed names so callers can
script against them. Exit status is zero only when the command's checks
hold.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .costs import LinkProfile, estimate_latency, layer_cost
from .model_ir import load_model
from .pipeline import build_pipeline, trace_comm
from .planfile import (DEFAULT_DEVICE, DEFAULT_LINK, _parse_device_args,
                       format_plan, load_plan, make_run_plan, parse_duration,
                       parse_rate)
from .planner import (ProfileDB, find_bottleneck, find_idle,
                      generate_distribution)
from .simulate import SimConfig, simulate, speedup_vs_single
from .splitter import method_label, verify_split


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _device(args):
    if getattr(args, "device", None):
        return _parse_device_args(args.device.split(), DEFAULT_DEVICE)
    return DEFAULT_DEVICE


def _link(args):
    if not getattr(args, "link", None):
        return DEFAULT_LINK
    bw = DEFAULT_LINK.bandwidth_bits_per_s
    lat = DEFAULT_LINK.latency_s
    for token in args.link.split():
        key, _, val = token.partition("=")
        if key == "bw":
            bw = parse_rate(val)
        elif key == "latency":
            lat = parse_duration(val)
        else:
            raise SystemExit(f"unknown link field {key!r}")
    return LinkProfile(bandwidth_bits_per_s=bw, latency_s=lat)


def cmd_cost(args) -> int:
    from .figures import render_cost_figure
    from .planner import candidate_methods

    graph = load_model(args.model)
    device = _device(args)
    link = _link(args)
    out = _out_dir(args)
    rows = []
    for li, layer in enumerate(graph.layers):
        whole = layer_cost(layer, None)
        rows.append({
            "layer": li, "kind": layer.kind, "method": "-",
            "nodes": 1,
            "mults_per_node": int(whole.mults_per_node),
            "reductions_per_node": int(whole.reductions_per_node),
            "weights_per_node": int(whole.weights_per_node),
            "comm_total_elems": int(whole.comm_total_elems),
            "est_latency_s": estimate_latency(whole, device, link),
        })
        for method in candidate_methods(layer, args.max_nodes):
            c = layer_cost(layer, method)
            rows.append({
                "layer": li, "kind": layer.kind,
                "method": method_label(method), "nodes": c.nodes,
                "mults_per_node": int(c.mults_per_node),
                "reductions_per_node": int(c.reductions_per_node),
                "weights_per_node": int(c.weights_per_node),
                "comm_total_elems": int(c.comm_total_elems),
                "est_latency_s": estimate_latency(c, device, link),
            })
    path = out / "cost.csv"
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    render_cost_figure(rows, str(out / "cost.png"))
    print(f"{len(rows)} cost rows for {len(graph.layers)} layers "
          f"-> {path} and cost.png")
    return 0


def cmd_plan(args) -> int:
    graph = load_model(args.model)
    device = _device(args)
    link = _link(args)
    db = ProfileDB(device=device, link=link)
    assignment = generate_distribution(graph, args.nodes, device.mem_bytes, db)
    plan = make_run_plan(assignment, model_path=str(Path(args.model).resolve()),
                         seed=args.seed, device=device, link=link,
                         driver_addr=args.driver, base_port=args.base_port)
    out = _out_dir(args)
    path = out / "plan.txt"
    path.write_text(format_plan(plan))
    used = len(assignment.nodes_used())
    splits = sum(1 for st in assignment.stages if st.is_split)
    print(f"placed {len(graph.layers)} layers on {used} of {args.nodes} "
          f"nodes ({len(assignment.stages)} stages, {splits} split) -> {path}")
    return 0


def cmd_simulate(args) -> int:
    from .figures import render_sim_figure

    plan = load_plan(args.plan)
    if args.open_rate is not None:
        cfg = SimConfig(mode="open", rate_per_s=args.open_rate,
                        duration_s=args.duration, seed=args.seed,
                        queue_capacity=args.queue)
    else:
        cfg = SimConfig(mode="closed", inferences=args.inferences,
                        seed=args.seed, queue_capacity=args.queue)
    report = simulate(build_pipeline(plan), cfg)
    out = _out_dir(args)
    doc = report.to_json()
    bn = find_bottleneck(report.node_stats)
    idle = find_idle(report.node_stats)
    doc["bottleneck_node"] = bn
    doc["idle_nodes"] = idle
    (out / "sim.json").write_text(json.dumps(doc, indent=2))
    render_sim_figure(doc, str(out / "sim.png"))
    print(f"ips {report.ips:.4g}  p50 {report.latency_p50_s:.4g}s  "
          f"p95 {report.latency_p95_s:.4g}s  "
          f"({report.completions} done, {report.discarded} warmup)")
    if bn is not None:
        print(f"bottleneck: node {bn}")
    if idle:
        print(f"idle: nodes {idle}")
    print(f"wrote {out / 'sim.json'} and sim.png")
    return 0


def cmd_verify(args) -> int:
    from .planner import candidate_methods

    graph = load_model(args.model)
    out = _out_dir(args)
    lines = []
    worst = 0.0
    failed = 0
    for li, layer in enumerate(graph.layers):
        for method in candidate_methods(layer, args.max_nodes):
            err = verify_split(layer, method, trials=args.trials,
                               seed=args.seed)
            worst = max(worst, err)
            ok = err <= args.tol
            failed += 0 if ok else 1
            lines.append(f"layer {li} {layer.kind} {method_label(method)} "
                         f"max_abs_err {err:.3e} "
                         f"{'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines) + (f"\nworst {worst:.3e} tol {args.tol:.1e} "
                               f"{'PASS' if failed == 0 else 'FAIL'}\n")
    (out / "verify.txt").write_text(text)
    print(text, end="")
    return 0 if failed == 0 else 1


def cmd_serve(args) -> int:
    from .netexec import serve_node

    plan = load_plan(args.plan)
    try:
        serve_node(plan, args.node, queue_capacity=args.queue)
    except Exception as e:  # a worker must fail loudly, not hang
        print(f"node {args.node}: {e}", file=sys.stderr)
        return 2
    return 0


def cmd_drive(args) -> int:
    from .netexec import drive_pipeline

    plan = load_plan(args.plan)
    result = drive_pipeline(plan, args.inferences, spawn_local=args.local,
                            queue_capacity=args.queue, plan_path=args.plan)
    out = _out_dir(args)
    digest = hashlib.sha256()
    for y in result.outputs:
        digest.update(np.ascontiguousarray(y, dtype="<f4").tobytes())
    doc = {
        "inferences": result.inferences,
        "wall_s": result.wall_s,
        "ips": result.inferences / result.wall_s if result.wall_s else 0.0,
        "output_digest": digest.hexdigest(),
        "plan_hash": plan.plan_hash,
        "node_stats": [s.to_json() for s in result.stats_list],
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2))
    if args.save_outputs:
        np.savez(out / "outputs.npz",
                 **{f"inference_{i}": y for i, y in enumerate(result.outputs)})
    print(f"{result.inferences} inferences in {result.wall_s:.3f}s "
          f"({doc['ips']:.2f}/s) -> {out / 'run.json'}")
    return 0


def cmd_export(args) -> int:
    from .figures import render_export_figure

    plan = load_plan(args.plan)
    trace = trace_comm(plan)
    sp = speedup_vs_single(plan, inferences=args.inferences)
    out = _out_dir(args)
    path = out / "export.csv"
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["src", "dst", "elems"])
        for e in trace["edges"]:
            w.writerow([e["src"], e["dst"], e["elems"]])
        w.writerow([])
        w.writerow(["total_elems", trace["total_elems"], ""])
        w.writerow(["ips", f"{sp['ips']:.6g}", ""])
        w.writerow(["single_ips", f"{sp['single_ips']:.6g}", ""])
        w.writerow(["speedup", f"{sp['speedup']:.6g}", ""])
        w.writerow(["nodes", sp["nodes"], ""])
    render_export_figure(trace["edges"], sp, str(out / "export.png"))
    print(f"speedup x{sp['speedup']:.2f} on {sp['nodes']} nodes, "
          f"{trace['total_elems']} elems/inference -> {path} and export.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pipeshard",
        description="partition, estimate, simulate, and run DNN inference "
                    "pipelines on small networked nodes")
    sub = p.add_subparsers(dest="command", required=True)

    def common_out(sp):
        sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("cost", help="per-layer, per-method cost table")
    sp.add_argument("--model", required=True)
    sp.add_argument("--max-nodes", type=int, default=8)
    sp.add_argument("--device", help="mult=.. reduce=.. mem=.. swap=.. tokens")
    sp.add_argument("--link", help="e.g. 'bw=94.1Mbps latency=0.4ms'")
    common_out(sp)
    sp.set_defaults(fn=cmd_cost)

    sp = sub.add_parser("plan", help="generate a placement")
    sp.add_argument("--model", required=True)
    sp.add_argument("--nodes", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--device", help="mult=.. reduce=.. mem=.. swap=.. tokens")
    sp.add_argument("--link", help="e.g. 'bw=94.1Mbps latency=0.4ms'")
    sp.add_argument("--driver", default="127.0.0.1:7100")
    sp.add_argument("--base-port", type=int, default=7101)
    common_out(sp)
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("simulate", help="discrete-event run of a plan")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--inferences", type=int, default=100)
    sp.add_argument("--open-rate", type=float, default=None,
                    help="Poisson arrivals per second (open mode)")
    sp.add_argument("--duration", type=float, default=100.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--queue", type=int, default=4)
    common_out(sp)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("verify", help="split-vs-whole numeric equivalence")
    sp.add_argument("--model", required=True)
    sp.add_argument("--max-nodes", type=int, default=8)
    sp.add_argument("--trials", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    common_out(sp)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("serve", help="run one worker node")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--node", type=int, required=True)
    sp.add_argument("--queue", type=int, default=4)
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("drive", help="feed a pipeline over sockets")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--inferences", type=int, default=10)
    sp.add_argument("--local", action="store_true",
                    help="spawn the workers locally from the plan")
    sp.add_argument("--queue", type=int, default=4)
    sp.add_argument("--save-outputs", action="store_true")
    common_out(sp)
    sp.set_defaults(fn=cmd_drive)

    sp = sub.add_parser("export", help="traffic and speedup report")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--inferences", type=int, default=40)
    common_out(sp)
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
