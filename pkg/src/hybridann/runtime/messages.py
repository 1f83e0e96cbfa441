"""Message envelope, payload codecs and the length-prefixed wire frame.

Frame layout (little-endian)::

    u32 payload length | u8 kind | u32 src | u32 dst | u64 seq | payload

Payloads are encoded once and carried as bytes in both the simulator and the
socket transport, so byte accounting is identical on either substrate.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..errors import FormatError
from ..router import QueryChunk

FRAME_HEADER = struct.Struct("<IBIIQ")
MAX_PAYLOAD = 1 << 30


class Kind(IntEnum):
    QUERY_CHUNK = 1
    PARTIAL_HANDOFF = 2
    THRESHOLD_UPDATE = 3
    TOPK_PARTIAL = 4
    CONTROL = 5


@dataclass(frozen=True)
class Message:
    kind: Kind
    src: int
    dst: int
    payload: bytes
    seq: int = -1

    @property
    def size(self) -> int:
        return len(self.payload)


def encode_frame(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise FormatError("payload too large")
    return FRAME_HEADER.pack(len(msg.payload), int(msg.kind), msg.src, msg.dst, msg.seq) + msg.payload


def decode_frame(buf: bytes) -> Message:
    if len(buf) < FRAME_HEADER.size:
        raise FormatError("truncated frame header")
    length, kind, src, dst, seq = FRAME_HEADER.unpack_from(buf, 0)
    payload = buf[FRAME_HEADER.size :]
    if len(payload) != length:
        raise FormatError(f"frame declares {length} payload bytes, got {len(payload)}")
    try:
        kind = Kind(kind)
    except ValueError as exc:
        raise FormatError(f"unknown message kind {kind}") from exc
    return Message(kind, src, dst, bytes(payload), seq)


def _recv_exact(sock, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> Message | None:
    """Read one frame from a blocking socket; None on clean EOF."""
    header = _recv_exact(sock, FRAME_HEADER.size)
    if header is None:
        return None
    length = FRAME_HEADER.unpack_from(header, 0)[0]
    if length > MAX_PAYLOAD:
        raise FormatError("payload too large")
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise FormatError("connection closed mid-frame")
    return decode_frame(header + payload)


# -- payloads -----------------------------------------------------------------

_CHUNK = struct.Struct("<IHHBBH")  # qid, shard, block, order_index, n_dim, n_probe
_CHUNK_HEAD = struct.Struct("<d")  # tau, first chunk of a chain only
_HANDOFF = struct.Struct("<IHBBdIB")  # qid, shard, order_index, n_dim, tau, count, n_work
_TOPK = struct.Struct("<IHdIB")  # qid, shard, tau, count, n_work
_THRESH = struct.Struct("<Id")
_WORK = np.dtype([("node", "<u4"), ("floats", "<u8")])


def _tau_out(tau: float) -> float:
    return math.inf if tau is None else float(tau)


def encode_chunk(chunk: QueryChunk, tau: float) -> bytes:
    """Query slice for one node. Only the chain head (order_index 0) carries the
    threshold, visit order and probe lists; later slices learn them from the handoff."""
    head = chunk.order_index == 0
    probes = chunk.probe_lists if head else ()
    parts = [_CHUNK.pack(chunk.query_id, chunk.shard_id, chunk.dim_block_id, chunk.order_index, len(chunk.order), len(probes))]
    if head:
        parts += [_CHUNK_HEAD.pack(_tau_out(tau)), bytes(chunk.order), np.asarray(probes, dtype="<u4").tobytes()]
    parts.append(np.asarray(chunk.block_values, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_chunk(payload: bytes) -> tuple[QueryChunk, float]:
    qid, shard, block, pos, n_dim, n_probe = _CHUNK.unpack_from(payload, 0)
    off = _CHUNK.size
    tau, order = math.inf, ()
    if pos == 0:
        (tau,) = _CHUNK_HEAD.unpack_from(payload, off)
        off += _CHUNK_HEAD.size
        order = tuple(payload[off : off + n_dim])
        off += n_dim
    probes = tuple(np.frombuffer(payload, "<u4", n_probe, off).tolist())
    off += 4 * n_probe
    values = np.frombuffer(payload, "<f4", offset=off).astype(np.float32)
    return QueryChunk(qid, shard, block, values, probes, pos, order), tau


@dataclass(frozen=True)
class Handoff:
    query_id: int
    shard: int
    order_index: int  # slice position the receiver processes
    order: tuple[int, ...]
    tau: float
    work: tuple[tuple[int, int], ...]
    rows: np.ndarray
    s_sq: np.ndarray


def _encode_work(work) -> bytes:
    arr = np.array(list(work), dtype=_WORK) if work else np.empty(0, _WORK)
    return arr.tobytes()


def _decode_work(payload: bytes, n: int, off: int) -> tuple[tuple[tuple[int, int], ...], int]:
    arr = np.frombuffer(payload, _WORK, n, off)
    return tuple((int(a), int(b)) for a, b in arr), off + arr.nbytes


def encode_handoff(h: Handoff) -> bytes:
    return b"".join(
        (
            _HANDOFF.pack(h.query_id, h.shard, h.order_index, len(h.order), _tau_out(h.tau), h.rows.size, len(h.work)),
            bytes(h.order),
            _encode_work(h.work),
            np.asarray(h.rows, dtype="<u4").tobytes(),
            np.asarray(h.s_sq, dtype="<f8").tobytes(),
        )
    )


def decode_handoff(payload: bytes) -> Handoff:
    qid, shard, pos, n_dim, tau, count, n_work = _HANDOFF.unpack_from(payload, 0)
    off = _HANDOFF.size
    order = tuple(payload[off : off + n_dim])
    work, off = _decode_work(payload, n_work, off + n_dim)
    rows = np.frombuffer(payload, "<u4", count, off).astype(np.int64)
    off += 4 * count
    s_sq = np.frombuffer(payload, "<f8", count, off).copy()
    return Handoff(qid, shard, pos, order, tau, work, rows, s_sq)


@dataclass(frozen=True)
class TopKPartial:
    query_id: int
    shard: int
    tau: float
    work: tuple[tuple[int, int], ...]
    ids: np.ndarray
    dists: np.ndarray


def encode_topk(t: TopKPartial) -> bytes:
    return b"".join(
        (
            _TOPK.pack(t.query_id, t.shard, _tau_out(t.tau), t.ids.size, len(t.work)),
            _encode_work(t.work),
            np.asarray(t.ids, dtype="<i8").tobytes(),
            np.asarray(t.dists, dtype="<f8").tobytes(),
        )
    )


def decode_topk(payload: bytes) -> TopKPartial:
    qid, shard, tau, count, n_work = _TOPK.unpack_from(payload, 0)
    work, off = _decode_work(payload, n_work, _TOPK.size)
    ids = np.frombuffer(payload, "<i8", count, off).copy()
    off += 8 * count
    dists = np.frombuffer(payload, "<f8", count, off).copy()
    return TopKPartial(qid, shard, tau, work, ids, dists)


def encode_threshold(query_id: int, tau: float) -> bytes:
    return _THRESH.pack(query_id, _tau_out(tau))


def decode_threshold(payload: bytes) -> tuple[int, float]:
    return _THRESH.unpack(payload)
