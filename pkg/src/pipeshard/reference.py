"""Reference executor: single-node forward passes every other path is checked against.

All tensors are float32, channels last. Inner products accumulate in
float64 and round once to float32 at the end, so results are reproducible
across machines. Throughput is not a goal here; correctness is.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .model_ir import LayerSpec, ModelGraph, pad_amount


def _as_f32(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def dense_forward(x: np.ndarray, weights: np.ndarray,
                  bias: Optional[np.ndarray] = None) -> np.ndarray:
    """out[j] = sum_i x[i] * weights[i, j] (+ bias[j]).

    weights has shape (d_in, d_out); rows follow the input index so the
    weight matrix is laid out exactly as the sum reads.
    """
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[0] != x.shape[0]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {weights.shape}")
    acc = x.astype(np.float64) @ weights.astype(np.float64)
    if bias is not None:
        acc = acc + bias.astype(np.float64)
    return acc.astype(np.float32)


def conv2d_forward(x: np.ndarray, filters: np.ndarray, stride: int = 1,
                   padding="same", bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Square-kernel 2-d convolution (cross-correlation) over an H x W x C input.

    filters has shape (f, f, c_in, k). Padding "same" pads floor(f/2)
    zeros per side; "valid" pads none; an int pads that count.
    """
    if x.ndim != 3 or filters.ndim != 4 or filters.shape[2] != x.shape[2]:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, f {filters.shape}")
    f = filters.shape[0]
    if filters.shape[1] != f:
        raise ValueError("kernel must be square")
    p = pad_amount(padding, f)
    return _conv2d_padded(x, filters, stride, (p, p, p, p), bias)


def conv2d_edge_padded(x: np.ndarray, filters: np.ndarray,
                       pads: tuple[int, int, int, int],
                       bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Stride-1 convolution with explicit per-side zero pads (top, bottom, left, right).

    Spatially split shards use this: sides backed by halo data from a
    neighbour get pad 0, sides on the original tensor border get the
    parent's zero padding.
    """
    return _conv2d_padded(x, filters, 1, pads, bias)


def _conv2d_padded(x, filters, stride, pads, bias):
    top, bottom, left, right = pads
    h, w, c = x.shape
    f, _, _, k = filters.shape
    xp = np.zeros((h + top + bottom, w + left + right, c), dtype=np.float64)
    xp[top:top + h, left:left + w, :] = x
    h_out = (xp.shape[0] - f) // stride + 1
    w_out = (xp.shape[1] - f) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"kernel {f} does not fit padded input {xp.shape[:2]}")
    out = np.zeros((h_out, w_out, k), dtype=np.float64)
    f64 = filters.astype(np.float64)
    for dy in range(f):
        for dx in range(f):
            window = xp[dy:dy + stride * (h_out - 1) + 1:stride,
                        dx:dx + stride * (w_out - 1) + 1:stride, :]
            out += window @ f64[dy, dx]
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(np.float32)


def conv3d_forward(x: np.ndarray, filters: np.ndarray, stride: int = 1,
                   padding="same", bias: Optional[np.ndarray] = None) -> np.ndarray:
    """3-d convolution over a D x H x W x C volume, filters (fd, f, f, c_in, k)."""
    if x.ndim != 4 or filters.ndim != 5 or filters.shape[3] != x.shape[3]:
        raise ValueError(f"conv3d shape mismatch: x {x.shape}, f {filters.shape}")
    fd, f, f2, _, k = filters.shape
    if f != f2:
        raise ValueError("kernel must be square in H and W")
    ps = pad_amount(padding, f)
    pd = pad_amount(padding, fd)
    d, h, w, c = x.shape
    xp = np.zeros((d + 2 * pd, h + 2 * ps, w + 2 * ps, c), dtype=np.float64)
    xp[pd:pd + d, ps:ps + h, ps:ps + w, :] = x
    d_out = (xp.shape[0] - fd) // stride + 1
    h_out = (xp.shape[1] - f) // stride + 1
    w_out = (xp.shape[2] - f) // stride + 1
    out = np.zeros((d_out, h_out, w_out, k), dtype=np.float64)
    f64 = filters.astype(np.float64)
    for dz in range(fd):
        for dy in range(f):
            for dx in range(f):
                window = xp[dz:dz + stride * (d_out - 1) + 1:stride,
                            dy:dy + stride * (h_out - 1) + 1:stride,
                            dx:dx + stride * (w_out - 1) + 1:stride, :]
                out += window @ f64[dz, dy, dx]
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(np.float32)


def pool2d_forward(x: np.ndarray, op: str, window: int, stride: int) -> np.ndarray:
    """Max/average pooling with a square window, no padding."""
    if x.ndim != 3:
        raise ValueError(f"pool2d needs HxWxC, got {x.shape}")
    h, w, c = x.shape
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"pool window {window} does not fit input {h}x{w}")
    if op == "max":
        out = np.full((h_out, w_out, c), -np.inf, dtype=np.float32)
        for wy in range(window):
            for wx in range(window):
                slab = x[wy:wy + stride * (h_out - 1) + 1:stride,
                         wx:wx + stride * (w_out - 1) + 1:stride, :]
                np.maximum(out, slab, out=out)
        return out
    if op == "avg":
        acc = np.zeros((h_out, w_out, c), dtype=np.float64)
        for wy in range(window):
            for wx in range(window):
                acc += x[wy:wy + stride * (h_out - 1) + 1:stride,
                         wx:wx + stride * (w_out - 1) + 1:stride, :]
        return (acc / (window * window)).astype(np.float32)
    raise ValueError(f"unknown pool op {op!r}")


def activation_forward(x: np.ndarray, fn: str) -> np.ndarray:
    if fn == "relu":
        return np.maximum(x, np.float32(0.0))
    if fn == "sigmoid":
        return (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(np.float32)
    if fn == "identity":
        return x
    raise ValueError(f"unknown activation {fn!r}")


def layer_forward(layer: LayerSpec, x: np.ndarray,
                  weights: Optional[tuple] = None) -> np.ndarray:
    """Run one layer. ``weights`` is (w, bias) for dense/conv, else ignored."""
    if layer.kind == "dense":
        w, b = weights
        return dense_forward(x, w, b if layer.bias else None)
    if layer.kind == "conv2d":
        w, b = weights
        return conv2d_forward(x, w, layer.stride, layer.padding,
                              b if layer.bias else None)
    if layer.kind == "conv3d":
        w, b = weights
        return conv3d_forward(x, w, layer.stride, layer.padding,
                              b if layer.bias else None)
    if layer.kind == "pool2d":
        return pool2d_forward(x, layer.op, layer.window, layer.stride)
    if layer.kind == "activation":
        return activation_forward(x, layer.fn)
    if layer.kind == "flatten":
        return np.ascontiguousarray(x).reshape(-1)
    if layer.kind == "opaque":
        # Profiled black box: numerically a pass-through.
        return x
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def synth_layer_weights(layer: LayerSpec, seed: int, index: int):
    """Deterministic weights for layer ``index`` under a model seed.

    Every process that knows (seed, index) synthesizes identical values,
    which stands in for shipping a trained checkpoint to each node.
    """
    if layer.kind not in ("dense", "conv2d", "conv3d"):
        return None
    rng = np.random.default_rng([seed, index])
    scale = np.float32(0.1)
    if layer.kind == "dense":
        w = (rng.standard_normal((layer.d_in, layer.d_out)) * scale).astype(np.float32)
        b = (rng.standard_normal(layer.d_out) * scale).astype(np.float32)
    elif layer.kind == "conv2d":
        w = (rng.standard_normal((layer.f, layer.f, layer.c_in, layer.k))
             * scale).astype(np.float32)
        b = (rng.standard_normal(layer.k) * scale).astype(np.float32)
    else:
        w = (rng.standard_normal((layer.fd, layer.f, layer.f, layer.c_in, layer.k))
             * scale).astype(np.float32)
        b = (rng.standard_normal(layer.k) * scale).astype(np.float32)
    return w, b


def synth_model_weights(graph: ModelGraph, seed: int) -> list:
    """Weights for every layer of the chain (None for weightless layers)."""
    return [synth_layer_weights(layer, seed, i)
            for i, layer in enumerate(graph.layers)]


def model_forward(graph: ModelGraph, x: np.ndarray,
                  weights: Optional[Sequence] = None,
                  seed: Optional[int] = None) -> np.ndarray:
    """Run the whole chain on one input.

    Pass explicit per-layer ``weights`` or a ``seed`` for synthesized ones.
    """
    if tuple(x.shape) != tuple(graph.input_shape):
        raise ValueError(
            f"input shape {x.shape} does not match model {graph.input_shape}")
    if weights is None:
        if seed is None:
            raise ValueError("need weights or a seed")
        weights = synth_model_weights(graph, seed)
    out = _as_f32(x)
    for layer, w in zip(graph.layers, weights):
        out = layer_forward(layer, out, w)
    return out


def synth_input(graph: ModelGraph, seed: int, inference_id: int = 0) -> np.ndarray:
    """Deterministic random input tensor for a model, keyed off the run seed."""
    rng = np.random.default_rng([seed, 0x1417, inference_id])
    return rng.standard_normal(graph.input_shape).astype(np.float32)
