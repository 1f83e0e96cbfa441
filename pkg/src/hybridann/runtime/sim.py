"""Deterministic discrete-event simulator with per-channel byte accounting.

Channels are FIFO: a message starts serialising once the channel is free,
takes ``bytes / bandwidth`` to put on the wire and arrives ``latency`` later.
Each node is a single FIFO server whose service time is a fixed per-message
overhead plus ``work`` floats at ``us_per_float``. Events are ordered by
``(time, src, seq, dst)``, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..errors import BadParam, Deadlock, UnknownNode
from .messages import Kind, Message
from .nodes import ClientState, node_step


@dataclass(frozen=True)
class SimConfig:
    n_nodes: int
    latency_us: float = 5.0
    bandwidth_bytes_per_us: float = 12500.0  # 12.5 bytes/ns
    seed: int = 0
    us_per_float: float = 0.001
    msg_overhead_us: float = 1.0
    failure_injection: bool = False
    drop_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise BadParam("n_nodes must be >= 1")
        if self.latency_us < 0:
            raise BadParam("latency must be >= 0")
        if not self.bandwidth_bytes_per_us > 0:
            raise BadParam("bandwidth must be > 0")
        if self.us_per_float < 0 or self.msg_overhead_us < 0:
            raise BadParam("service costs must be >= 0")
        if not 0.0 <= self.drop_prob < 1.0:
            raise BadParam("drop_prob must be in [0, 1)")

    def wire_time(self, n_bytes: int) -> float:
        if math.isinf(self.bandwidth_bytes_per_us):
            return 0.0
        return n_bytes / self.bandwidth_bytes_per_us


class TrafficLedger:
    """Cumulative payload bytes and message counts per (src, dst, kind)."""

    def __init__(self) -> None:
        self._bytes: dict[tuple[int, int, int], int] = defaultdict(int)
        self._count: dict[tuple[int, int, int], int] = defaultdict(int)
        self._recorded = 0

    def record(self, msg: Message) -> None:
        key = (msg.src, msg.dst, int(msg.kind))
        self._bytes[key] += msg.size
        self._count[key] += 1
        self._recorded += msg.size

    @property
    def total_bytes(self) -> int:
        return sum(self._bytes.values())

    @property
    def total_messages(self) -> int:
        return sum(self._count.values())

    def consistent(self) -> bool:
        return self.total_bytes == self._recorded

    def bytes_by_kind(self, kind: Kind) -> int:
        return sum(v for (_, _, k), v in self._bytes.items() if k == int(kind))

    def count_by_kind(self, kind: Kind) -> int:
        return sum(v for (_, _, k), v in self._count.items() if k == int(kind))

    def inter_node_bytes(self, exclude: set[int] = frozenset()) -> int:
        """Bytes exchanged between distinct nodes outside ``exclude``."""
        return sum(
            v for (s, d, _), v in self._bytes.items() if s != d and s not in exclude and d not in exclude
        )

    def to_dict(self) -> dict:
        rows = [
            {"src": s, "dst": d, "kind": Kind(k).name, "bytes": self._bytes[(s, d, k)], "count": self._count[(s, d, k)]}
            for (s, d, k) in sorted(self._bytes)
        ]
        return {"total_bytes": self.total_bytes, "total_messages": self.total_messages, "channels": rows}


@dataclass
class SimResult:
    states: dict
    ledger: TrafficLedger
    trace: list[str]
    makespan_us: float
    node_work: dict[int, int] = field(default_factory=dict)
    node_busy_us: dict[int, float] = field(default_factory=dict)

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)


def _all_clients_done(states: dict) -> bool:
    return all(s.complete for s in states.values() if isinstance(s, ClientState))


class Simulator:
    def __init__(self, config: SimConfig, states: dict, step: Callable = node_step):
        self.config = config
        self.states = dict(states)
        self.step = step
        self.ledger = TrafficLedger()
        self.trace: list[str] = []
        self.now = 0.0
        self._queue: list = []
        self._seq: dict[tuple[int, int], int] = defaultdict(int)
        self._channel_free: dict[tuple[int, int], float] = defaultdict(float)
        self._busy_until: dict[int, float] = defaultdict(float)
        self.node_work: dict[int, int] = defaultdict(int)
        self.node_busy: dict[int, float] = defaultdict(float)
        self._rng = np.random.default_rng(config.seed)

    def _emit(self, rec: dict) -> None:
        self.trace.append(json.dumps(rec, sort_keys=True))

    def send(self, msg: Message, at: float | None = None) -> Message:
        """Stamp a channel sequence number, account the bytes and schedule delivery."""
        if msg.dst not in self.states:
            raise UnknownNode(f"no node {msg.dst}")
        at = self.now if at is None else at
        chan = (msg.src, msg.dst)
        seq = self._seq[chan]
        self._seq[chan] = seq + 1
        msg = replace(msg, seq=seq)
        self.ledger.record(msg)
        start = max(at, self._channel_free[chan])
        self._channel_free[chan] = start + self.config.wire_time(msg.size)
        t = self._channel_free[chan] + self.config.latency_us
        if self.config.failure_injection and self._rng.random() < self.config.drop_prob:
            self._emit({"ev": "drop", "t": t, "src": msg.src, "dst": msg.dst, "seq": seq})
            return msg
        heapq.heappush(self._queue, (t, msg.src, seq, msg.dst, msg))
        return msg

    def deliver(self) -> Message | None:
        """Pop the next message and run the destination's transition."""
        if not self._queue:
            return None
        t, _, _, _, msg = heapq.heappop(self._queue)
        self.now = t
        self._emit(
            {"ev": "deliver", "t": t, "src": msg.src, "dst": msg.dst, "kind": msg.kind.name, "seq": msg.seq, "bytes": msg.size}
        )
        node = msg.dst
        start = max(t, self._busy_until[node])
        new_state, outbound, records = self.step(self.states[node], msg)
        self.states[node] = new_state
        work = sum(int(r.get("work", 0)) for r in records)
        finish = start + self.config.msg_overhead_us + work * self.config.us_per_float
        self._busy_until[node] = finish
        self.node_work[node] += work
        self.node_busy[node] += finish - start
        for r in records:
            self._emit(dict(r, t=start, at=node))
        for out in outbound:
            self.send(out, at=finish)
        return msg

    def run(self, done: Callable[[dict], bool] = _all_clients_done, max_events: int | None = None) -> float:
        events = 0
        while self._queue:
            self.deliver()
            events += 1
            if max_events is not None and events >= max_events:
                break
        if not done(self.states):
            raise Deadlock(f"event queue drained at t={self.now:.3f}us with queries incomplete")
        return max([self.now] + list(self._busy_until.values()))


def sim_run(config: SimConfig, topology: dict, script, step: Callable = node_step, done=_all_clients_done) -> SimResult:
    """Run ``topology`` (node id -> initial state) driven by ``script``.

    ``script`` is a sequence of ``(time_us, Message)`` injected before the loop.
    """
    sim = Simulator(config, topology, step)
    for at, msg in script:
        sim.send(msg, at=at)
    makespan = sim.run(done)
    return SimResult(sim.states, sim.ledger, sim.trace, makespan, dict(sim.node_work), dict(sim.node_busy))
