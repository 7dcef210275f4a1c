"""Framed message protocol used between pipeline nodes.

Every message is one frame:

    magic  "CDNN"   4 bytes
    version         1 byte, currently 1
    kind            1 byte
    payload length  4 bytes, unsigned little endian
    payload         length bytes

Kinds and payloads:

    1  hello     u32 node id + 32 byte digest of the run plan; both ends
                 must agree on the digest before tensors flow
    2  tensor    u32 inference id + i32 sending node id (-1 is the
                 driver) + tensor: rank byte, u32 extent per axis,
                 float32 values little endian in row-major order
    3  stats     UTF-8 JSON, schema owned by the stats reporter
    4  shutdown  empty; forwarded downstream, then the node exits

Anything that does not parse raises WireError; nothing is guessed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CDNN"
VERSION = 1

KIND_HELLO = 1
KIND_TENSOR = 2
KIND_STATS = 3
KIND_SHUTDOWN = 4

HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 1 << 30  # defensive bound, not a protocol constant


class WireError(Exception):
    """Malformed frame, digest mismatch, or truncated stream."""


@dataclass(frozen=True)
class Hello:
    node_id: int
    plan_digest: bytes  # 32 raw sha256 bytes


@dataclass(frozen=True)
class TensorFrame:
    inference_id: int
    src: int            # sending node id; -1 is the driver
    tensor: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, TensorFrame)
                and self.inference_id == other.inference_id
                and self.src == other.src
                and self.tensor.shape == other.tensor.shape
                and np.array_equal(self.tensor, other.tensor))


@dataclass(frozen=True)
class StatsMsg:
    payload: dict


@dataclass(frozen=True)
class Shutdown:
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise WireError(f"tensor rank {arr.ndim} does not fit in one byte")
    head = bytes([arr.ndim]) + b"".join(
        struct.pack("<I", int(d)) for d in arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 1:
        raise WireError("empty tensor payload")
    rank = buf[0]
    need = 1 + 4 * rank
    if len(buf) < need:
        raise WireError("tensor payload shorter than its dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, 1) if rank else ()
    count = 1
    for d in dims:
        count *= d
    if len(buf) != need + 4 * count:
        raise WireError(
            f"tensor payload is {len(buf)} bytes, expected {need + 4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=need)
    return data.reshape(dims).copy()


def encode_message(msg) -> bytes:
    if isinstance(msg, Hello):
        if len(msg.plan_digest) != 32:
            raise WireError("plan digest must be 32 bytes")
        kind, payload = KIND_HELLO, struct.pack("<I", msg.node_id) + msg.plan_digest
    elif isinstance(msg, TensorFrame):
        kind = KIND_TENSOR
        payload = struct.pack("<Ii", msg.inference_id, msg.src) + \
            encode_tensor(msg.tensor)
    elif isinstance(msg, StatsMsg):
        kind, payload = KIND_STATS, json.dumps(
            msg.payload, sort_keys=True).encode("utf-8")
    elif isinstance(msg, Shutdown):
        kind, payload = KIND_SHUTDOWN, b""
    else:
        raise WireError(f"cannot encode {type(msg).__name__}")
    return HEADER.pack(MAGIC, VERSION, kind, len(payload)) + payload


def decode_payload(kind: int, payload: bytes):
    if kind == KIND_HELLO:
        if len(payload) != 36:
            raise WireError(f"hello payload is {len(payload)} bytes, expected 36")
        (node_id,) = struct.unpack_from("<I", payload)
        return Hello(node_id=node_id, plan_digest=payload[4:])
    if kind == KIND_TENSOR:
        if len(payload) < 8:
            raise WireError("tensor frame shorter than its ids")
        inference_id, src = struct.unpack_from("<Ii", payload)
        return TensorFrame(inference_id=inference_id, src=src,
                           tensor=decode_tensor(payload[8:]))
    if kind == KIND_STATS:
        try:
            return StatsMsg(payload=json.loads(payload.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise WireError(f"stats payload is not JSON: {e}") from e
    if kind == KIND_SHUTDOWN:
        if payload:
            raise WireError("shutdown carries no payload")
        return Shutdown()
    raise WireError(f"unknown message kind {kind}")


def decode_message(buf: bytes):
    """Decode one frame from a complete buffer; returns (message, consumed)."""
    if len(buf) < HEADER.size:
        raise WireError("frame shorter than its header")
    magic, version, kind, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise WireError(f"payload length {length} exceeds the {MAX_PAYLOAD} bound")
    end = HEADER.size + length
    if len(buf) < end:
        raise WireError(f"frame truncated: need {end} bytes, have {len(buf)}")
    return decode_payload(kind, buf[HEADER.size:end]), end


def read_exact(stream, n: int) -> bytes:
    """Read exactly n bytes from a socket makefile or file object."""
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise WireError(f"stream closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(stream):
    head = read_exact(stream, HEADER.size)
    magic, version, kind, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise WireError(f"payload length {length} exceeds the {MAX_PAYLOAD} bound")
    payload = read_exact(stream, length) if length else b""
    return decode_payload(kind, payload)


def write_message(stream, msg) -> None:
    stream.write(encode_message(msg))
    stream.flush()
