"""Split a single layer's work across several nodes and merge the partial results.

Five methods, each exact (the merged result matches the unsplit layer to
float32 rounding):

    dense, by output units:  each node holds a column slice of the weight
        matrix, sees the whole input, emits a slice of the output.
        Partials are concatenated; an activation may run per shard.
    dense, by input units:   each node holds a row slice and sees only its
        slice of the input; every node emits a full-width partial sum.
        Partials are summed; an activation must wait for the merge.
    conv, by filter batches ("channel"): each node holds a contiguous batch
        of filters and the full input, emits a depth slice of the output.
    conv, spatially: each node owns a rectangle of the output grid and
        reads that rectangle of the input grown by a halo of floor(f/2)
        on sides that have a neighbour. Weights are replicated.
    conv, by input-channel batches ("filter"): each node sees a slice of
        the input channels and the matching slice of every filter, emits a
        full-size partial that is summed.

Spatial splitting is restricted to stride-1 convolutions with "same"
padding; other configurations change the output geometry per cell and are
rejected. A run of such conv layers can be split as one unit: the halo
grows to the sum of the per-layer halos and each shard applies the chain
locally before anything is merged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .model_ir import (Conv2D, Conv3D, Dense, LayerSpec, PAD_SAME)
from .reference import (activation_forward, conv2d_edge_padded, layer_forward)


class SplitError(ValueError):
    """Raised when a method does not apply to a layer or its dims."""


# ---------------------------------------------------------------- methods

@dataclass(frozen=True)
class DenseOutputSplit:
    n: int
    tag: str = "output"


@dataclass(frozen=True)
class DenseInputSplit:
    n: int
    tag: str = "input"


@dataclass(frozen=True)
class ConvChannelSplit:
    # filters held per node; ceil(k / k_per_node) nodes
    k_per_node: int
    tag: str = "channel"


@dataclass(frozen=True)
class ConvSpatialSplit:
    parts_y: int
    parts_x: int
    tag: str = "spatial"


@dataclass(frozen=True)
class ConvFilterSplit:
    # input channels held per node; ceil(c_in / c_per_node) nodes
    c_per_node: int
    tag: str = "filter"


SplitMethod = Union[DenseOutputSplit, DenseInputSplit, ConvChannelSplit,
                    ConvSpatialSplit, ConvFilterSplit]


def method_label(method: SplitMethod) -> str:
    """Plan-file spelling of a method, e.g. spatial[2x2] or output[4]."""
    if isinstance(method, DenseOutputSplit):
        return f"output[{method.n}]"
    if isinstance(method, DenseInputSplit):
        return f"input[{method.n}]"
    if isinstance(method, ConvChannelSplit):
        return f"channel[{method.k_per_node}]"
    if isinstance(method, ConvSpatialSplit):
        return f"spatial[{method.parts_y}x{method.parts_x}]"
    if isinstance(method, ConvFilterSplit):
        return f"filter[{method.c_per_node}]"
    raise SplitError(f"unknown method {method!r}")


def parse_method(text: str) -> SplitMethod:
    """Inverse of method_label."""
    name, _, rest = text.partition("[")
    if not rest.endswith("]"):
        raise SplitError(f"bad method spelling {text!r}")
    arg = rest[:-1]
    if name == "output":
        return DenseOutputSplit(int(arg))
    if name == "input":
        return DenseInputSplit(int(arg))
    if name == "channel":
        return ConvChannelSplit(int(arg))
    if name == "filter":
        return ConvFilterSplit(int(arg))
    if name == "spatial":
        py, _, px = arg.partition("x")
        return ConvSpatialSplit(int(py), int(px))
    raise SplitError(f"unknown method {name!r}")


# -------------------------------------------------------------- selectors

@dataclass(frozen=True)
class Full:
    """Shard reads the whole input tensor."""


@dataclass(frozen=True)
class Rows:
    """Contiguous slice [start, stop) of a flat input."""
    start: int
    stop: int


@dataclass(frozen=True)
class ChannelRange:
    """Contiguous slice [start, stop) of the channel (last) axis."""
    start: int
    stop: int


@dataclass(frozen=True)
class SpatialRect:
    """Input rectangle [y0,y1) x [x0,x1), all channels, plus edge pads.

    pads = (top, bottom, left, right) zeros the shard must add before a
    valid convolution; nonzero only on sides that sit on the original
    tensor border (where the parent's "same" padding would apply).
    cell = (cy0, cy1, cx0, cx1) is the output rectangle the shard owns.
    """
    y0: int
    y1: int
    x0: int
    x1: int
    pads: tuple[int, int, int, int]
    cell: tuple[int, int, int, int]


Selector = Union[Full, Rows, ChannelRange, SpatialRect]


def selector_elems(selector: Selector, input_shape: tuple[int, ...]) -> int:
    """How many elements the selector reads from an input of this shape."""
    if isinstance(selector, Full):
        n = 1
        for d in input_shape:
            n *= d
        return n
    if isinstance(selector, Rows):
        return selector.stop - selector.start
    if isinstance(selector, ChannelRange):
        n = selector.stop - selector.start
        for d in input_shape[:-1]:
            n *= d
        return n
    if isinstance(selector, SpatialRect):
        return (selector.y1 - selector.y0) * (selector.x1 - selector.x0) * input_shape[-1]
    raise SplitError(f"unknown selector {selector!r}")


def shard_input(selector: Selector, x: np.ndarray) -> np.ndarray:
    """Slice exactly the elements a shard needs; no padding happens here."""
    if isinstance(selector, Full):
        return x
    if isinstance(selector, Rows):
        if x.ndim != 1:
            raise SplitError(f"row selector needs a flat input, got {x.shape}")
        return x[selector.start:selector.stop]
    if isinstance(selector, ChannelRange):
        return x[..., selector.start:selector.stop]
    if isinstance(selector, SpatialRect):
        if x.ndim != 3:
            raise SplitError(f"rect selector needs HxWxC, got {x.shape}")
        return x[selector.y0:selector.y1, selector.x0:selector.x1, :]
    raise SplitError(f"unknown selector {selector!r}")


# ----------------------------------------------------------------- shards

@dataclass(frozen=True)
class WeightSlice:
    """Index ranges into the parent weights; None means the full axis.

    in_range slices the input axis (dense rows / conv input channels),
    out_range the output axis (dense columns / conv filters). Bias, when
    present, follows out_range.
    """
    in_range: Optional[tuple[int, int]] = None
    out_range: Optional[tuple[int, int]] = None


@dataclass(frozen=True)
class Shard:
    """One node's slice of a split layer."""
    node_index: int
    task: Union[LayerSpec, tuple]       # reduced layer, or conv tuple for chains
    selector: Selector
    weight_slice: WeightSlice


@dataclass(frozen=True)
class MergeOp:
    """How partial outputs become the layer output.

    concat joins slices (axis -1 for feature/depth splits, a grid for
    spatial ones); sum adds full-size partials elementwise. When
    activation_after_merge is set, any activation fused with the layer is
    applied here, never per shard: summing already-activated partials
    would compute the wrong function.
    """
    op: str                              # "concat" | "sum"
    axis: int = -1
    grid: Optional[tuple[int, int]] = None
    activation_after_merge: bool = False
    activation: Optional[str] = None


@dataclass(frozen=True)
class SplitPlan:
    layer: Union[LayerSpec, tuple]
    method: SplitMethod
    shards: tuple[Shard, ...]
    merge: MergeOp


def partition_ranges(total: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous near-even ranges; earlier parts take the ceiling size."""
    if parts < 1 or parts > total:
        raise SplitError(f"cannot cut {total} units into {parts} parts")
    base, extra = divmod(total, parts)
    ranges, at = [], 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        ranges.append((at, at + size))
        at += size
    return ranges


def batch_ranges(total: int, per: int) -> list[tuple[int, int]]:
    """Contiguous batches of ``per`` units; the last batch keeps the remainder."""
    if per < 1 or per > total:
        raise SplitError(f"batch size {per} invalid for {total} units")
    return [(at, min(at + per, total)) for at in range(0, total, per)]


def node_count(layer: LayerSpec, method: SplitMethod) -> int:
    if isinstance(method, (DenseOutputSplit, DenseInputSplit)):
        return method.n
    if isinstance(method, ConvChannelSplit):
        return -(-layer.k // method.k_per_node)
    if isinstance(method, ConvFilterSplit):
        return -(-layer.c_in // method.c_per_node)
    if isinstance(method, ConvSpatialSplit):
        return method.parts_y * method.parts_x
    raise SplitError(f"unknown method {method!r}")


def halo_rect(h: int, w: int, parts_y: int, parts_x: int,
              cell_index: int, halo: int) -> SpatialRect:
    """Input rectangle for one output cell of a spatial grid.

    Cells are indexed row-major. The base rectangle grows by ``halo`` on
    every side that has a neighbour and is clipped to the input bounds;
    the remaining deficit on border sides comes back as zero padding.
    """
    if halo < 0:
        raise SplitError(f"negative halo {halo}")
    rows = partition_ranges(h, parts_y)
    cols = partition_ranges(w, parts_x)
    iy, ix = divmod(cell_index, parts_x)
    cy0, cy1 = rows[iy]
    cx0, cx1 = cols[ix]
    y0, y1 = max(0, cy0 - halo), min(h, cy1 + halo)
    x0, x1 = max(0, cx0 - halo), min(w, cx1 + halo)
    pads = (halo - (cy0 - y0), halo - (y1 - cy1),
            halo - (cx0 - x0), halo - (x1 - cx1))
    return SpatialRect(y0, y1, x0, x1, pads, (cy0, cy1, cx0, cx1))


def _check_spatial_ok(layer: LayerSpec) -> None:
    if layer.kind != "conv2d":
        raise SplitError(f"spatial split needs conv2d, got {layer.kind}")
    if layer.stride != 1 or layer.padding != PAD_SAME:
        raise SplitError(
            "spatial split is limited to stride-1 same-padding convolutions")


def split_layer(layer: LayerSpec, method: SplitMethod) -> SplitPlan:
    """Cut one layer into shards plus the merge that reassembles it."""
    if isinstance(method, DenseOutputSplit):
        if layer.kind != "dense":
            raise SplitError(f"output split needs dense, got {layer.kind}")
        shards = []
        for i, (o0, o1) in enumerate(partition_ranges(layer.d_out, method.n)):
            task = Dense(d_in=layer.d_in, d_out=o1 - o0, bias=layer.bias)
            shards.append(Shard(i, task, Full(), WeightSlice(out_range=(o0, o1))))
        return SplitPlan(layer, method, tuple(shards), MergeOp(op="concat"))

    if isinstance(method, DenseInputSplit):
        if layer.kind != "dense":
            raise SplitError(f"input split needs dense, got {layer.kind}")
        shards = []
        for i, (r0, r1) in enumerate(partition_ranges(layer.d_in, method.n)):
            # bias rides on the first shard so the sum applies it once
            task = Dense(d_in=r1 - r0, d_out=layer.d_out,
                         bias=layer.bias and i == 0)
            shards.append(Shard(i, task, Rows(r0, r1),
                                WeightSlice(in_range=(r0, r1))))
        return SplitPlan(layer, method, tuple(shards),
                         MergeOp(op="sum", activation_after_merge=True))

    if isinstance(method, ConvChannelSplit):
        if layer.kind not in ("conv2d", "conv3d"):
            raise SplitError(f"channel split needs conv, got {layer.kind}")
        shards = []
        for i, (k0, k1) in enumerate(batch_ranges(layer.k, method.k_per_node)):
            task = replace(layer, k=k1 - k0)
            shards.append(Shard(i, task, Full(), WeightSlice(out_range=(k0, k1))))
        return SplitPlan(layer, method, tuple(shards), MergeOp(op="concat"))

    if isinstance(method, ConvFilterSplit):
        if layer.kind not in ("conv2d", "conv3d"):
            raise SplitError(f"filter split needs conv, got {layer.kind}")
        shards = []
        for i, (c0, c1) in enumerate(batch_ranges(layer.c_in, method.c_per_node)):
            task = replace(layer, c_in=c1 - c0, bias=layer.bias and i == 0)
            shards.append(Shard(i, task, ChannelRange(c0, c1),
                                WeightSlice(in_range=(c0, c1))))
        return SplitPlan(layer, method, tuple(shards),
                         MergeOp(op="sum", activation_after_merge=True))

    if isinstance(method, ConvSpatialSplit):
        _check_spatial_ok(layer)
        halo = layer.f // 2
        cells = method.parts_y * method.parts_x
        shards = []
        for i in range(cells):
            rect = halo_rect(layer.h_in, layer.w_in,
                             method.parts_y, method.parts_x, i, halo)
            task = replace(layer, h_in=rect.y1 - rect.y0,
                           w_in=rect.x1 - rect.x0, padding="valid")
            shards.append(Shard(i, task, rect, WeightSlice()))
        return SplitPlan(layer, method, tuple(shards),
                         MergeOp(op="concat",
                                 grid=(method.parts_y, method.parts_x)))

    raise SplitError(f"unknown method {method!r}")


def split_spatial_chain(layers: Sequence[LayerSpec], parts_y: int,
                        parts_x: int) -> SplitPlan:
    """Split a run of stride-1 same-padding convs as one spatial unit.

    The halo is the composed receptive-field reach, the sum of floor(f/2)
    over the chain; each shard runs every layer locally on its rectangle.
    """
    if not layers:
        raise SplitError("empty conv chain")
    for layer in layers:
        _check_spatial_ok(layer)
    for a, b in zip(layers, layers[1:]):
        if a.out_shape() != (b.h_in, b.w_in, b.c_in):
            raise SplitError("chained convs must feed each other directly")
    halo = sum(layer.f // 2 for layer in layers)
    first = layers[0]
    method = ConvSpatialSplit(parts_y, parts_x)
    shards = []
    for i in range(parts_y * parts_x):
        rect = halo_rect(first.h_in, first.w_in, parts_y, parts_x, i, halo)
        shards.append(Shard(i, tuple(layers), rect, WeightSlice()))
    return SplitPlan(tuple(layers), method, tuple(shards),
                     MergeOp(op="concat", grid=(parts_y, parts_x)))


# -------------------------------------------------------------- execution

def slice_weights(shard: Shard, w: np.ndarray,
                  b: Optional[np.ndarray]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply a shard's weight slice to the parent layer's weight tensors.

    Input-axis slices hit axis 0 of a dense matrix and the c_in axis of a
    filter bank; output-axis slices hit the last axis of either.
    """
    ws = shard.weight_slice
    if ws.in_range is not None:
        lo, hi = ws.in_range
        w = w[lo:hi] if w.ndim == 2 else w[..., lo:hi, :]
    if ws.out_range is not None:
        lo, hi = ws.out_range
        w = w[..., lo:hi]
        if b is not None:
            b = b[lo:hi]
    return w, b


def run_shard(shard: Shard, x: np.ndarray, w: Optional[np.ndarray],
              b: Optional[np.ndarray],
              pre_sliced: bool = False) -> np.ndarray:
    """Execute one shard against the parent layer's input and weights.

    With pre_sliced the caller already applied the selector (as a remote
    sender would); otherwise the full parent input is sliced here.
    """
    xs = x if pre_sliced else shard_input(shard.selector, x)
    if isinstance(shard.task, tuple):
        return _run_chain_shard(shard, xs, w)
    if isinstance(shard.selector, SpatialRect):
        task = shard.task
        return conv2d_edge_padded(xs, w, shard.selector.pads,
                                  b if task.bias else None)
    ws, bs = slice_weights(shard, w, b) if w is not None else (None, None)
    return layer_forward(shard.task, xs, (ws, bs))


def _run_chain_shard(shard: Shard, block: np.ndarray,
                     weights: Sequence[tuple]) -> np.ndarray:
    """Run a conv chain on a shard's rectangle, shrinking the halo per layer.

    Interior sides consume floor(f/2) of real halo rows at each layer;
    border sides re-pad with zeros each layer, which is exactly what the
    parent's "same" padding would have produced there.
    """
    layers = shard.task
    rect = shard.selector
    cy0, cy1, cx0, cx1 = rect.cell
    h_full, w_full = layers[0].h_in, layers[0].w_in
    halos = [layer.f // 2 for layer in layers]
    ay0, ay1, ax0, ax1 = rect.y0, rect.y1, rect.x0, rect.x1
    out = block
    remaining = sum(halos)
    for layer, (w, b), h in zip(layers, weights, halos):
        remaining -= h
        ty0, ty1 = max(0, cy0 - remaining), min(h_full, cy1 + remaining)
        tx0, tx1 = max(0, cx0 - remaining), min(w_full, cx1 + remaining)
        pads = (max(0, ay0 - (ty0 - h)), max(0, (ty1 + h) - ay1),
                max(0, ax0 - (tx0 - h)), max(0, (tx1 + h) - ax1))
        out = conv2d_edge_padded(out, w, pads, b if layer.bias else None)
        ay0, ay1, ax0, ax1 = ty0, ty1, tx0, tx1
        h_full, w_full = layer.out_shape()[0], layer.out_shape()[1]
    return out


def merge_outputs(merge: MergeOp, parts: Sequence[np.ndarray]) -> np.ndarray:
    """Reassemble shard outputs, in node-index order."""
    if merge.op == "concat":
        if merge.grid is not None:
            py, px = merge.grid
            if len(parts) != py * px:
                raise SplitError(
                    f"grid {py}x{px} expects {py * px} parts, got {len(parts)}")
            rows = [np.concatenate(parts[r * px:(r + 1) * px], axis=1)
                    for r in range(py)]
            out = np.concatenate(rows, axis=0)
        else:
            out = np.concatenate(parts, axis=merge.axis)
    elif merge.op == "sum":
        acc = np.zeros_like(parts[0], dtype=np.float64)
        for part in parts:
            acc += part
        out = acc.astype(np.float32)
    else:
        raise SplitError(f"unknown merge op {merge.op!r}")
    if merge.activation is not None:
        out = activation_forward(out, merge.activation)
    return out


def weights_elems_per_shard(plan: SplitPlan) -> list[int]:
    """Weight elements each shard holds (replicated filters count fully)."""
    counts = []
    for shard in plan.shards:
        if isinstance(shard.task, tuple):
            counts.append(sum(layer.param_count() for layer in shard.task))
        else:
            counts.append(shard.task.param_count())
    return counts


def verify_split(layer: LayerSpec, method: SplitMethod, trials: int = 3,
                 seed: int = 0) -> float:
    """Max |split - unsplit| over random trials; the unsplit layer is the oracle."""
    plan = split_layer(layer, method)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(_layer_in_shape(layer)).astype(np.float32)
        w, b = _random_layer_weights(layer, rng)
        ref = layer_forward(layer, x, (w, b))
        parts = [run_shard(s, x, w, b) for s in plan.shards]
        got = merge_outputs(plan.merge, parts)
        if got.shape != ref.shape:
            raise SplitError(
                f"merged shape {got.shape} != reference {ref.shape}")
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return worst


def _layer_in_shape(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind == "dense":
        return (layer.d_in,)
    if layer.kind == "conv2d":
        return (layer.h_in, layer.w_in, layer.c_in)
    if layer.kind == "conv3d":
        return (layer.d_in, layer.h_in, layer.w_in, layer.c_in)
    raise SplitError(f"no input shape for {layer.kind}")


def _random_layer_weights(layer: LayerSpec, rng: np.random.Generator):
    if layer.kind == "dense":
        w = rng.standard_normal((layer.d_in, layer.d_out)).astype(np.float32)
        b = rng.standard_normal(layer.d_out).astype(np.float32)
    elif layer.kind == "conv2d":
        w = rng.standard_normal(
            (layer.f, layer.f, layer.c_in, layer.k)).astype(np.float32)
        b = rng.standard_normal(layer.k).astype(np.float32)
    elif layer.kind == "conv3d":
        w = rng.standard_normal(
            (layer.fd, layer.f, layer.f, layer.c_in, layer.k)).astype(np.float32)
        b = rng.standard_normal(layer.k).astype(np.float32)
    else:
        raise SplitError(f"no weights for {layer.kind}")
    return w, b
