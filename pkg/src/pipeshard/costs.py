"""Closed-form work and traffic accounting for whole and split layers.

Counts are per inference. For a convolution producing an Ho x Wo x k
output from c_in channels with an f x f kernel:

    multiplications = Ho * Wo * k * c_in * f^2
    reductions      = Ho * Wo * k          (one accumulator per output element)

With "same" padding at stride 1, Ho x Wo equals the input grid, and an
unsplit layer moves (c_in + k) * H * W elements per inference (input in,
output out). Dense layers follow the same pattern with d_in * d_out
multiplications.

Split-method accounting (n nodes, or batches as noted):

    dense by output:   per node d_in * d_out/n mults; traffic n*d_in + d_out
    dense by input:    per node d_in/n * d_out mults and d_out*(d_in/n - 1)
                       partial-sum reductions; traffic d_in + n*d_out
    conv by filters:   ceil(k/k') nodes; traffic (ceil(k/k')*c_in + k) * H*W
    conv spatial:      grid cells with halo floor(f/2); weights replicated
                       per node, counted once in setup_elems, not traffic;
                       input traffic is the exact sum of halo rectangles
    conv by channels:  ceil(c_in/cb) nodes; traffic (c_in + k*ceil(c_in/cb)) * H*W

Per-node figures use the largest shard, which is what a critical-path
latency estimate needs. An approximate closed form for the spatial
input traffic is kept alongside the exact count because published
projections use it; it underestimates once the halo is wide relative to
the cell (see spatial_input_elems_closed_form).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model_ir import LayerSpec
from .splitter import (ConvChannelSplit, ConvFilterSplit, ConvSpatialSplit,
                       DenseInputSplit, DenseOutputSplit, SplitError,
                       SplitMethod, batch_ranges, halo_rect, node_count,
                       partition_ranges)

BYTES_PER_ELEMENT = 4   # float32 everywhere, on the wire and in memory


@dataclass(frozen=True)
class DeviceProfile:
    """Throughput and memory of one node.

    Rates are elements per second through the multiplier and the
    accumulator. When a task's working set exceeds mem_bytes, compute
    time is multiplied by swap_factor (paging to storage); the model is
    deliberately binary, fits or does not.
    """
    elems_per_s_mult: float
    elems_per_s_reduce: float
    mem_bytes: int
    swap_factor: float = 1.0

    def __post_init__(self):
        if self.elems_per_s_mult <= 0 or self.elems_per_s_reduce <= 0:
            raise ValueError("device rates must be positive")
        if self.swap_factor < 1.0:
            raise ValueError("swap_factor must be >= 1")


@dataclass(frozen=True)
class LinkProfile:
    """Point-to-point link: serialized bits per second plus a fixed
    per-message latency."""
    bandwidth_bits_per_s: float
    latency_s: float = 0.0

    def __post_init__(self):
        if self.bandwidth_bits_per_s <= 0 or self.latency_s < 0:
            raise ValueError("bad link profile")


@dataclass(frozen=True)
class LayerCost:
    """Work and traffic for one layer under one placement."""
    nodes: int
    mults_per_node: float
    reductions_per_node: float
    weights_per_node: float          # elements held per node
    comm_in_elems: int               # summed over nodes, per inference
    comm_out_elems: int
    comm_in_per_node: int            # largest shard
    comm_out_per_node: int
    merge_elems: int                 # partial elements flowing into the merge
    setup_elems: int                 # one-time weight distribution, not traffic
    comm_total_elems: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "comm_total_elems",
                           self.comm_in_elems + self.comm_out_elems)


def dense_cost(d_in: int, d_out: int,
               method: Optional[SplitMethod] = None) -> LayerCost:
    """Cost of a dense layer, whole or split n ways."""
    if method is None:
        return LayerCost(nodes=1, mults_per_node=d_in * d_out,
                         reductions_per_node=d_out,
                         weights_per_node=d_in * d_out,
                         comm_in_elems=d_in, comm_out_elems=d_out,
                         comm_in_per_node=d_in, comm_out_per_node=d_out,
                         merge_elems=0, setup_elems=d_in * d_out)
    if isinstance(method, DenseOutputSplit):
        n = method.n
        ranges = partition_ranges(d_out, n)
        widest = max(hi - lo for lo, hi in ranges)
        return LayerCost(nodes=n, mults_per_node=(d_out / n) * d_in,
                         reductions_per_node=d_out / n,
                         weights_per_node=d_in * d_out / n,
                         comm_in_elems=n * d_in, comm_out_elems=d_out,
                         comm_in_per_node=d_in, comm_out_per_node=widest,
                         merge_elems=d_out, setup_elems=d_in * d_out)
    if isinstance(method, DenseInputSplit):
        n = method.n
        ranges = partition_ranges(d_in, n)
        widest = max(hi - lo for lo, hi in ranges)
        return LayerCost(nodes=n, mults_per_node=(d_in / n) * d_out,
                         reductions_per_node=d_out * (d_in / n - 1),
                         weights_per_node=d_in * d_out / n,
                         comm_in_elems=d_in, comm_out_elems=n * d_out,
                         comm_in_per_node=widest, comm_out_per_node=d_out,
                         merge_elems=n * d_out, setup_elems=d_in * d_out)
    raise SplitError(f"method {method!r} does not apply to dense layers")


def conv_mults_reductions(layer: LayerSpec) -> tuple[int, int]:
    """(multiplications, reductions) of one whole convolution layer."""
    if layer.kind == "conv2d":
        ho, wo, k = layer.out_shape()
        taps = layer.f * layer.f * layer.c_in
        return ho * wo * k * taps, ho * wo * k
    if layer.kind == "conv3d":
        do, ho, wo, k = layer.out_shape()
        taps = layer.fd * layer.f * layer.f * layer.c_in
        return do * ho * wo * k * taps, do * ho * wo * k
    raise SplitError(f"conv cost needs a conv layer, got {layer.kind}")


def _conv_grid(layer: LayerSpec) -> tuple[int, int, int]:
    """(output positions, input positions, input elems) for a conv layer."""
    if layer.kind == "conv2d":
        ho, wo, _ = layer.out_shape()
        return ho * wo, layer.h_in * layer.w_in, layer.h_in * layer.w_in * layer.c_in
    do, ho, wo, _ = layer.out_shape()
    in_pos = layer.d_in * layer.h_in * layer.w_in
    return do * ho * wo, in_pos, in_pos * layer.c_in


def conv_cost(layer: LayerSpec,
              method: Optional[SplitMethod] = None) -> LayerCost:
    """Cost of a convolution layer, whole or under one of the conv methods."""
    if layer.kind not in ("conv2d", "conv3d"):
        raise SplitError(f"conv cost needs a conv layer, got {layer.kind}")
    mults, reductions = conv_mults_reductions(layer)
    out_pos, in_pos, in_elems = _conv_grid(layer)
    out_elems = out_pos * layer.k
    w_elems = layer.param_count()

    if method is None:
        return LayerCost(nodes=1, mults_per_node=mults,
                         reductions_per_node=reductions,
                         weights_per_node=w_elems,
                         comm_in_elems=in_elems, comm_out_elems=out_elems,
                         comm_in_per_node=in_elems, comm_out_per_node=out_elems,
                         merge_elems=0, setup_elems=w_elems)

    if isinstance(method, ConvChannelSplit):
        kp = method.k_per_node
        m = node_count(layer, method)
        return LayerCost(nodes=m,
                         mults_per_node=mults * kp / layer.k,
                         reductions_per_node=reductions * kp / layer.k,
                         weights_per_node=w_elems * kp / layer.k,
                         comm_in_elems=m * in_elems, comm_out_elems=out_elems,
                         comm_in_per_node=in_elems,
                         comm_out_per_node=out_pos * kp,
                         merge_elems=out_elems, setup_elems=w_elems)

    if isinstance(method, ConvFilterSplit):
        cb = method.c_per_node
        m = node_count(layer, method)
        return LayerCost(nodes=m,
                         mults_per_node=mults * cb / layer.c_in,
                         reductions_per_node=reductions,
                         weights_per_node=w_elems * cb / layer.c_in,
                         comm_in_elems=in_elems, comm_out_elems=m * out_elems,
                         comm_in_per_node=in_pos * cb,
                         comm_out_per_node=out_elems,
                         merge_elems=m * out_elems, setup_elems=w_elems)

    if isinstance(method, ConvSpatialSplit):
        if layer.kind != "conv2d":
            raise SplitError("spatial split cost is defined for conv2d")
        py, px = method.parts_y, method.parts_x
        halo = layer.f // 2
        rect_elems, cell_elems = [], []
        for i in range(py * px):
            r = halo_rect(layer.h_in, layer.w_in, py, px, i, halo)
            rect_elems.append((r.y1 - r.y0) * (r.x1 - r.x0) * layer.c_in)
            cy0, cy1, cx0, cx1 = r.cell
            cell_elems.append((cy1 - cy0) * (cx1 - cx0))
        max_cell = max(cell_elems)
        return LayerCost(nodes=py * px,
                         mults_per_node=max_cell * layer.k * layer.c_in * layer.f ** 2,
                         reductions_per_node=max_cell * layer.k,
                         weights_per_node=w_elems,
                         comm_in_elems=sum(rect_elems),
                         comm_out_elems=out_elems,
                         comm_in_per_node=max(rect_elems),
                         comm_out_per_node=max_cell * layer.k,
                         merge_elems=out_elems,
                         setup_elems=py * px * w_elems)

    raise SplitError(f"method {method!r} does not apply to conv layers")


def layer_cost(layer: LayerSpec,
               method: Optional[SplitMethod] = None) -> LayerCost:
    """Dispatch on layer kind; weightless layers cost only their traffic."""
    if layer.kind == "dense":
        if method is not None and not isinstance(
                method, (DenseOutputSplit, DenseInputSplit)):
            raise SplitError(f"{method!r} does not apply to dense layers")
        return dense_cost(layer.d_in, layer.d_out, method)
    if layer.kind in ("conv2d", "conv3d"):
        return conv_cost(layer, method)
    if method is not None:
        raise SplitError(f"layer kind {layer.kind} cannot be split")
    from math import prod
    out_elems = prod(layer.out_shape())
    if layer.kind == "pool2d":
        in_elems = layer.h_in * layer.w_in * layer.c_in
    else:
        # activation/flatten/opaque preserve the element count
        in_elems = out_elems
    return LayerCost(nodes=1, mults_per_node=0,
                     reductions_per_node=_pool_reductions(layer),
                     weights_per_node=0,
                     comm_in_elems=in_elems, comm_out_elems=out_elems,
                     comm_in_per_node=in_elems, comm_out_per_node=out_elems,
                     merge_elems=0, setup_elems=0)


def _pool_reductions(layer: LayerSpec) -> int:
    if layer.kind != "pool2d":
        return 0
    from math import prod
    return prod(layer.out_shape()) * layer.window * layer.window


def spatial_input_elems_closed_form(h: int, w: int, c: int, f: int,
                                    d: int) -> int:
    """Published per-node estimate for spatial-split input traffic.

    ceil(h*w*c / d^2) + 4*floor(f/2)*(d^2 - d) for a d x d grid. The halo
    term ignores the edge length and channel depth, so this drifts low as
    floor(f/2)*d grows; the exact figure is the halo_rect sum used by
    conv_cost. Kept for comparison plots, not for planning.
    """
    if d < 1:
        raise SplitError(f"grid factor must be >= 1, got {d}")
    return -(-h * w * c // (d * d)) + 4 * (f // 2) * (d * d - d)


def transfer_seconds(elems: int, link: LinkProfile, messages: int = 1) -> float:
    """Serialization plus fixed per-message latency for one hop."""
    bits = elems * BYTES_PER_ELEMENT * 8
    return bits / link.bandwidth_bits_per_s + messages * link.latency_s


def compute_seconds(cost: LayerCost, device: DeviceProfile) -> float:
    """Per-node compute time, with the swap penalty when the shard
    working set (weights plus live activations) does not fit."""
    t = (cost.mults_per_node / device.elems_per_s_mult
         + cost.reductions_per_node / device.elems_per_s_reduce)
    footprint = (cost.weights_per_node + cost.comm_in_per_node
                 + cost.comm_out_per_node) * BYTES_PER_ELEMENT
    if footprint > device.mem_bytes:
        t *= device.swap_factor
    return t


def estimate_latency(cost: LayerCost, device: DeviceProfile,
                     link: LinkProfile) -> float:
    """Stage latency on the critical-path node: compute plus its own traffic.

    Message count is one per transfer direction actually used, and never
    less than one; even a do-nothing stage pays one link latency to be
    handed its input.
    """
    messages = (1 if cost.comm_in_per_node > 0 else 0) + \
               (1 if cost.comm_out_per_node > 0 else 0)
    messages = max(1, messages)
    comm = transfer_seconds(cost.comm_in_per_node + cost.comm_out_per_node,
                            link, messages)
    return compute_seconds(cost, device) + comm


def speedup_estimate(work_s: float, n: int, overhead_s: float) -> float:
    """Ideal split of ``work_s`` across n nodes against a fixed overhead."""
    if n < 1 or work_s < 0 or overhead_s < 0:
        raise ValueError("bad speedup inputs")
    return work_s / (work_s / n + overhead_s)


def fit_rates(work: list[tuple[float, float]],
              latencies: list[float]) -> tuple[float, float]:
    """Least-squares device rates from measured layer latencies.

    ``work`` rows are (mults, reductions); returns (elems_per_s_mult,
    elems_per_s_reduce). Two independent measurements pin both rates.
    """
    a = np.asarray(work, dtype=np.float64)
    y = np.asarray(latencies, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] != y.shape[0]:
        raise ValueError("work rows must be (mults, reductions) per latency")
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    coef = np.maximum(coef, 1e-18)
    return float(1.0 / coef[0]), float(1.0 / coef[1])
