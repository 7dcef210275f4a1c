"""Model description: layer records, the text format, shapes, and parameter counts.

A model is a linear chain of layers applied to a single input tensor.
Branching topologies are out of scope. The on-disk format is line oriented:

    # comment
    model small_cnn
    input 32x32x3
    conv2d k=16 f=3 s=1 pad=same
    relu
    maxpool w=2 s=2
    flatten
    dense out=10

Shapes follow the channels-last convention: conv inputs are H x W x C
(or D x H x W x C for 3-d convolution), dense inputs are flat vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import floor, prod
from typing import Optional, Union


class ModelFormatError(ValueError):
    """Raised for malformed model text or inconsistent layer dimensions."""


# Padding is either a named rule or an explicit per-side count (symmetric).
PAD_SAME = "same"
PAD_VALID = "valid"


def pad_amount(padding: Union[str, int], kernel: int) -> int:
    """Resolve a padding setting to the per-side zero count.

    "same" gives floor(kernel/2), which preserves spatial extent at
    stride 1 and requires an odd kernel; "valid" gives 0.
    """
    if padding == PAD_SAME:
        if kernel % 2 == 0:
            raise ModelFormatError(
                f"same padding needs an odd kernel, got {kernel}")
        return kernel // 2
    if padding == PAD_VALID:
        return 0
    p = int(padding)
    if p < 0:
        raise ModelFormatError(f"negative padding {p}")
    return p


def conv_out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent of a convolution along one axis: floor((i+2p-f)/s)+1."""
    out = floor((extent + 2 * pad - kernel) / stride) + 1
    if out <= 0:
        raise ModelFormatError(
            f"kernel {kernel} (pad {pad}) does not fit input extent {extent}")
    return out


@dataclass(frozen=True)
class Dense:
    """Fully connected layer: out[j] = sum_i in[i] * w[i, j] (+ bias[j])."""
    d_in: int
    d_out: int
    bias: bool = False
    kind: str = field(default="dense", init=False, repr=False)

    def __post_init__(self):
        if self.d_in <= 0 or self.d_out <= 0:
            raise ModelFormatError(
                f"dense dims must be positive, got {self.d_in}x{self.d_out}")

    def out_shape(self) -> tuple[int, ...]:
        return (self.d_out,)

    def param_count(self) -> int:
        return self.d_in * self.d_out + (self.d_out if self.bias else 0)


@dataclass(frozen=True)
class Conv2D:
    """2-d convolution, square kernel, channels-last, weights f x f x c_in x k."""
    h_in: int
    w_in: int
    c_in: int
    k: int                      # number of filters = output channels
    f: int                      # kernel extent per spatial axis
    stride: int = 1
    padding: Union[str, int] = PAD_SAME
    bias: bool = False
    kind: str = field(default="conv2d", init=False, repr=False)

    def __post_init__(self):
        for name, v in (("h_in", self.h_in), ("w_in", self.w_in),
                        ("c_in", self.c_in), ("k", self.k), ("f", self.f)):
            if v <= 0:
                raise ModelFormatError(f"conv2d {name} must be positive, got {v}")
        if self.stride < 1:
            raise ModelFormatError(f"conv2d stride must be >= 1, got {self.stride}")
        pad_amount(self.padding, self.f)  # validates odd-kernel rule for same

    @property
    def pad(self) -> int:
        return pad_amount(self.padding, self.f)

    def out_shape(self) -> tuple[int, ...]:
        return (conv_out_extent(self.h_in, self.f, self.stride, self.pad),
                conv_out_extent(self.w_in, self.f, self.stride, self.pad),
                self.k)

    def param_count(self) -> int:
        return self.k * self.c_in * self.f * self.f + (self.k if self.bias else 0)


@dataclass(frozen=True)
class Conv3D:
    """3-d convolution over D x H x W x C volumes, weights fd x f x f x c_in x k."""
    d_in: int
    h_in: int
    w_in: int
    c_in: int
    k: int
    f: int                      # spatial kernel extent
    fd: int                     # kernel extent along depth
    stride: int = 1
    padding: Union[str, int] = PAD_SAME
    bias: bool = False
    kind: str = field(default="conv3d", init=False, repr=False)

    def __post_init__(self):
        for name, v in (("d_in", self.d_in), ("h_in", self.h_in),
                        ("w_in", self.w_in), ("c_in", self.c_in),
                        ("k", self.k), ("f", self.f), ("fd", self.fd)):
            if v <= 0:
                raise ModelFormatError(f"conv3d {name} must be positive, got {v}")
        if self.stride < 1:
            raise ModelFormatError(f"conv3d stride must be >= 1, got {self.stride}")
        pad_amount(self.padding, self.f)
        pad_amount(self.padding, self.fd)

    def out_shape(self) -> tuple[int, ...]:
        ps = pad_amount(self.padding, self.f)
        pd = pad_amount(self.padding, self.fd)
        return (conv_out_extent(self.d_in, self.fd, self.stride, pd),
                conv_out_extent(self.h_in, self.f, self.stride, ps),
                conv_out_extent(self.w_in, self.f, self.stride, ps),
                self.k)

    def param_count(self) -> int:
        n = self.k * self.c_in * self.f * self.f * self.fd
        return n + (self.k if self.bias else 0)


@dataclass(frozen=True)
class Pool2D:
    """Max or average pooling with a square window, no padding."""
    h_in: int
    w_in: int
    c_in: int
    op: str                     # "max" | "avg"
    window: int
    stride: int
    kind: str = field(default="pool2d", init=False, repr=False)

    def __post_init__(self):
        if self.op not in ("max", "avg"):
            raise ModelFormatError(f"pool op must be max or avg, got {self.op}")
        if self.window <= 0 or self.stride < 1:
            raise ModelFormatError(
                f"pool window/stride must be positive, got w={self.window} s={self.stride}")
        if self.window > self.h_in or self.window > self.w_in:
            raise ModelFormatError(
                f"pool window {self.window} exceeds input {self.h_in}x{self.w_in}")

    def out_shape(self) -> tuple[int, ...]:
        return ((self.h_in - self.window) // self.stride + 1,
                (self.w_in - self.window) // self.stride + 1,
                self.c_in)

    def param_count(self) -> int:
        return 0


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity; shape preserving."""
    fn: str                     # "relu" | "sigmoid" | "identity"
    shape: tuple[int, ...]
    kind: str = field(default="activation", init=False, repr=False)

    def __post_init__(self):
        if self.fn not in ("relu", "sigmoid", "identity"):
            raise ModelFormatError(f"unknown activation {self.fn!r}")

    def out_shape(self) -> tuple[int, ...]:
        return self.shape

    def param_count(self) -> int:
        return 0


@dataclass(frozen=True)
class Flatten:
    """Reshape to a rank-1 vector; no data movement implied."""
    shape: tuple[int, ...]
    kind: str = field(default="flatten", init=False, repr=False)

    def out_shape(self) -> tuple[int, ...]:
        return (prod(self.shape),)

    def param_count(self) -> int:
        return 0


@dataclass(frozen=True)
class OpaqueProfiled:
    """A block we never split or execute numerically, only account for.

    Carries a measured latency and memory footprint; passes its input
    through unchanged when a pipeline runs it.
    """
    shape: tuple[int, ...]
    latency_s: float
    mem_bytes: int
    kind: str = field(default="opaque", init=False, repr=False)

    def __post_init__(self):
        if self.latency_s < 0 or self.mem_bytes < 0:
            raise ModelFormatError("opaque latency/mem must be non-negative")

    def out_shape(self) -> tuple[int, ...]:
        return self.shape

    def param_count(self) -> int:
        return 0


LayerSpec = Union[Dense, Conv2D, Conv3D, Pool2D, Activation, Flatten, OpaqueProfiled]


@dataclass(frozen=True)
class ModelGraph:
    """A named linear chain of layers with a fixed input shape."""
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ModelFormatError("empty model")
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ModelFormatError(f"bad input shape {self.input_shape}")
        if len(self.input_shape) > 5:
            raise ModelFormatError("tensor rank limited to 5")

    def out_shapes(self) -> list[tuple[int, ...]]:
        return [layer.out_shape() for layer in self.layers]

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)


def layer_signature(layer: LayerSpec) -> str:
    """Stable string key for a layer, used by profile tables and reports."""
    if layer.kind == "dense":
        return f"dense:{layer.d_in}x{layer.d_out}" + (":b" if layer.bias else "")
    if layer.kind == "conv2d":
        return (f"conv2d:{layer.h_in}x{layer.w_in}x{layer.c_in}"
                f":k{layer.k}:f{layer.f}:s{layer.stride}:{layer.padding}")
    if layer.kind == "conv3d":
        return (f"conv3d:{layer.d_in}x{layer.h_in}x{layer.w_in}x{layer.c_in}"
                f":k{layer.k}:f{layer.f}x{layer.fd}:s{layer.stride}:{layer.padding}")
    if layer.kind == "pool2d":
        return f"pool2d:{layer.op}:{layer.h_in}x{layer.w_in}x{layer.c_in}:w{layer.window}:s{layer.stride}"
    if layer.kind == "activation":
        return f"act:{layer.fn}:" + "x".join(map(str, layer.shape))
    if layer.kind == "flatten":
        return "flatten:" + "x".join(map(str, layer.shape))
    if layer.kind == "opaque":
        return f"opaque:{layer.latency_s}:{layer.mem_bytes}"
    raise ModelFormatError(f"unknown layer kind {layer.kind!r}")


def _parse_kv(parts: list[str], line_no: int) -> dict[str, str]:
    kv = {}
    for part in parts:
        if "=" not in part:
            raise ModelFormatError(f"line {line_no}: expected key=value, got {part!r}")
        key, _, val = part.partition("=")
        kv[key] = val
    return kv


def _require(kv: dict[str, str], keys: list[str], line_no: int) -> None:
    for key in keys:
        if key not in kv:
            raise ModelFormatError(f"line {line_no}: missing {key}=")


def parse_model(text: str, name_hint: str = "model") -> ModelGraph:
    """Parse the text format into a ModelGraph.

    Layers see the running output shape of the chain, so conv and dense
    lines do not repeat their input dims. Dense requires a rank-1 input;
    insert an explicit ``flatten`` line after spatial layers.
    """
    name = name_hint
    shape: Optional[tuple[int, ...]] = None
    layers: list[LayerSpec] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        word = parts[0]

        if word == "model":
            if len(parts) != 2:
                raise ModelFormatError(f"line {line_no}: model takes one name")
            name = parts[1]
            continue
        if word == "input":
            if len(parts) != 2:
                raise ModelFormatError(f"line {line_no}: input takes one shape")
            try:
                shape = tuple(int(d) for d in parts[1].split("x"))
            except ValueError:
                raise ModelFormatError(f"line {line_no}: bad shape {parts[1]!r}")
            if any(d <= 0 for d in shape):
                raise ModelFormatError(f"line {line_no}: non-positive input dim")
            continue

        if shape is None:
            raise ModelFormatError(f"line {line_no}: layer before input declaration")

        if word == "conv2d":
            kv = _parse_kv(parts[1:], line_no)
            _require(kv, ["k", "f"], line_no)
            if len(shape) != 3:
                raise ModelFormatError(
                    f"line {line_no}: conv2d needs HxWxC input, have {shape}")
            layer = Conv2D(h_in=shape[0], w_in=shape[1], c_in=shape[2],
                           k=int(kv["k"]), f=int(kv["f"]),
                           stride=int(kv.get("s", "1")),
                           padding=kv.get("pad", PAD_SAME),
                           bias=kv.get("bias", "0") == "1")
        elif word == "conv3d":
            kv = _parse_kv(parts[1:], line_no)
            _require(kv, ["k", "f"], line_no)
            if len(shape) != 4:
                raise ModelFormatError(
                    f"line {line_no}: conv3d needs DxHxWxC input, have {shape}")
            f = int(kv["f"])
            layer = Conv3D(d_in=shape[0], h_in=shape[1], w_in=shape[2],
                           c_in=shape[3], k=int(kv["k"]), f=f,
                           fd=int(kv.get("fd", str(f))),
                           stride=int(kv.get("s", "1")),
                           padding=kv.get("pad", PAD_SAME),
                           bias=kv.get("bias", "0") == "1")
        elif word in ("maxpool", "avgpool"):
            kv = _parse_kv(parts[1:], line_no)
            _require(kv, ["w"], line_no)
            if len(shape) != 3:
                raise ModelFormatError(
                    f"line {line_no}: pooling needs HxWxC input, have {shape}")
            w = int(kv["w"])
            layer = Pool2D(h_in=shape[0], w_in=shape[1], c_in=shape[2],
                           op=word[:3], window=w, stride=int(kv.get("s", str(w))))
        elif word == "dense":
            kv = _parse_kv(parts[1:], line_no)
            _require(kv, ["out"], line_no)
            if len(shape) != 1:
                raise ModelFormatError(
                    f"line {line_no}: dense needs a flat input, have {shape} "
                    "(insert flatten)")
            layer = Dense(d_in=shape[0], d_out=int(kv["out"]),
                          bias=kv.get("bias", "0") == "1")
        elif word in ("relu", "sigmoid", "identity"):
            layer = Activation(fn=word, shape=shape)
        elif word == "flatten":
            layer = Flatten(shape=shape)
        elif word == "opaque":
            kv = _parse_kv(parts[1:], line_no)
            _require(kv, ["latency", "mem"], line_no)
            layer = OpaqueProfiled(shape=shape, latency_s=float(kv["latency"]),
                                   mem_bytes=int(kv["mem"]))
        else:
            raise ModelFormatError(f"line {line_no}: unknown layer {word!r}")

        layers.append(layer)
        shape = layer.out_shape()

    if shape is None:
        raise ModelFormatError("missing input declaration")
    first = layers[0] if layers else None
    input_shape = _input_shape_of(first) if first is not None else None
    if not layers:
        raise ModelFormatError("empty model")
    return ModelGraph(name=name, input_shape=input_shape, layers=tuple(layers))


def _input_shape_of(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind == "dense":
        return (layer.d_in,)
    if layer.kind == "conv2d":
        return (layer.h_in, layer.w_in, layer.c_in)
    if layer.kind == "conv3d":
        return (layer.d_in, layer.h_in, layer.w_in, layer.c_in)
    if layer.kind == "pool2d":
        return (layer.h_in, layer.w_in, layer.c_in)
    return tuple(layer.shape)


def load_model(path: str) -> ModelGraph:
    """Read and parse a model file; model name defaults to the file stem."""
    import os
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stem = os.path.splitext(os.path.basename(path))[0]
    return parse_model(text, name_hint=stem)


def format_model(graph: ModelGraph) -> str:
    """Render a ModelGraph back into the text format."""
    lines = [f"model {graph.name}",
             "input " + "x".join(map(str, graph.input_shape))]
    for layer in graph.layers:
        if layer.kind == "dense":
            line = f"dense out={layer.d_out}"
            if layer.bias:
                line += " bias=1"
        elif layer.kind == "conv2d":
            line = f"conv2d k={layer.k} f={layer.f} s={layer.stride} pad={layer.padding}"
            if layer.bias:
                line += " bias=1"
        elif layer.kind == "conv3d":
            line = (f"conv3d k={layer.k} f={layer.f} fd={layer.fd} "
                    f"s={layer.stride} pad={layer.padding}")
            if layer.bias:
                line += " bias=1"
        elif layer.kind == "pool2d":
            line = f"{layer.op}pool w={layer.window} s={layer.stride}"
        elif layer.kind == "activation":
            line = layer.fn
        elif layer.kind == "flatten":
            line = "flatten"
        elif layer.kind == "opaque":
            line = f"opaque latency={layer.latency_s} mem={layer.mem_bytes}"
        else:
            raise ModelFormatError(f"unknown layer kind {layer.kind!r}")
        lines.append(line)
    return "\n".join(lines) + "\n"


def activation_elems(graph: ModelGraph, index: int) -> tuple[int, int]:
    """(input element count, output element count) for layer ``index``."""
    in_shape = graph.input_shape if index == 0 else graph.layers[index - 1].out_shape()
    return prod(in_shape), prod(graph.layers[index].out_shape())
