"""Figure rendering for the report-producing CLI paths.

Every function takes plain data and a target path and writes one PNG next
to whatever delimited file the caller is producing. Rendering is
headless; no display is ever required.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_cost_figure(rows: list[dict], path: str) -> None:
    """Estimated per-layer latency, whole layer next to its best split."""
    by_layer: dict[int, dict] = {}
    for r in rows:
        li = r["layer"]
        entry = by_layer.setdefault(li, {"kind": r["kind"], "whole": None,
                                         "best": None, "best_label": ""})
        if r["method"] == "-":
            entry["whole"] = r["est_latency_s"]
        elif entry["best"] is None or r["est_latency_s"] < entry["best"]:
            entry["best"] = r["est_latency_s"]
            entry["best_label"] = r["method"]
    layers = sorted(by_layer)
    whole = [by_layer[i]["whole"] or 0.0 for i in layers]
    best = [by_layer[i]["best"] if by_layer[i]["best"] is not None
            else by_layer[i]["whole"] or 0.0 for i in layers]

    fig, ax = plt.subplots(figsize=(max(6, len(layers) * 0.7), 4.2))
    xs = range(len(layers))
    ax.bar([x - 0.2 for x in xs], whole, width=0.4, label="one node",
           color="#744")
    ax.bar([x + 0.2 for x in xs], best, width=0.4, label="best split",
           color="#386")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"L{i}\n{by_layer[i]['kind']}" for i in layers],
                       fontsize=7)
    ax.set_ylabel("estimated latency (s)")
    ax.set_title("per-layer latency, whole vs best split")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sim_figure(report_json: dict, path: str) -> None:
    """Per-node busy fraction and median inbox depth from one run."""
    stats = report_json.get("node_stats", [])
    nodes = [s["node"] for s in stats]
    busy = [s["busy_fraction"] for s in stats]
    medians = []
    for s in stats:
        hist = s.get("queue_occupancy_hist", {})
        total = sum(hist.values())
        med = 0
        if total:
            half = total / 2
            seen = 0
            for depth in sorted(hist, key=int):
                seen += hist[depth]
                if seen >= half:
                    med = int(depth)
                    break
        medians.append(med)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.8))
    ax1.bar(range(len(nodes)), busy, color="#368")
    ax1.set_xticks(range(len(nodes)))
    ax1.set_xticklabels([str(n) for n in nodes])
    ax1.set_ylim(0, 1.05)
    ax1.set_xlabel("node")
    ax1.set_ylabel("busy fraction")
    ax1.set_title(f"throughput {report_json.get('ips', 0):.3g}/s")
    ax2.bar(range(len(nodes)), medians, color="#863")
    ax2.set_xticks(range(len(nodes)))
    ax2.set_xticklabels([str(n) for n in nodes])
    ax2.set_xlabel("node")
    ax2.set_ylabel("median inbox depth")
    ax2.set_title(f"p50 latency {report_json.get('latency_p50_s', 0):.3g}s")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_export_figure(edges: list[dict], speedup: dict | None,
                         path: str) -> None:
    """Per-edge traffic, with the measured speedup in the title."""
    labels = [f"{e['src']}->{e['dst']}" for e in edges]
    elems = [e["elems"] for e in edges]
    fig, ax = plt.subplots(figsize=(max(6, len(edges) * 0.5), 4))
    ax.bar(range(len(edges)), elems, color="#486")
    ax.set_xticks(range(len(edges)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("elements per inference")
    title = "per-edge traffic"
    if speedup:
        title += (f"  |  speedup x{speedup['speedup']:.2f} "
                  f"on {speedup['nodes']} nodes")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
