"""Threaded localhost TCP transport running the same node transitions.

Every node gets its own thread, inbox and listening socket; each unordered
node pair shares one TCP connection. Frames are the length-prefixed format from
``messages``. Posted sends complete when ``sendall`` returns and receives are
drained by one reader thread per connection end, mirroring non-blocking
send/receive with completion.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
import time
from collections import defaultdict
from dataclasses import replace
from typing import Callable

from ..errors import Deadlock, UnknownNode
from .messages import FRAME_HEADER, Message, encode_frame, read_frame
from .nodes import ClientState, node_step
from .sim import SimResult, TrafficLedger

_HELLO = FRAME_HEADER  # reuse the header struct for the one-off handshake


class _Endpoint:
    def __init__(self, node_id: int):
        self.node_id = node_id
        self.inbox: queue.Queue = queue.Queue()
        self.peers: dict[int, socket.socket] = {}
        self.seq: dict[int, int] = defaultdict(int)


class SocketCluster:
    def __init__(self, states: dict, step: Callable = node_step, timeout_s: float = 120.0):
        self.states = dict(states)
        self.step = step
        self.timeout_s = timeout_s
        self.ledger = TrafficLedger()
        self.trace: list[dict] = []
        self.node_work: dict[int, int] = defaultdict(int)
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._errors: list[BaseException] = []
        self._eps = {n: _Endpoint(n) for n in self.states}
        self._threads: list[threading.Thread] = []

    # -- wiring ----------------------------------------------------------------

    def _connect_all(self) -> None:
        ids = sorted(self._eps)
        listeners = {}
        for n in ids:
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind(("127.0.0.1", 0))
            srv.listen(len(ids))
            listeners[n] = srv
        for i, a in enumerate(ids):
            for b in ids[i + 1 :]:
                c = socket.create_connection(listeners[b].getsockname())
                c.sendall(_HELLO.pack(0, 0, a, b, 0))
                s, _ = listeners[b].accept()
                hello = s.recv(_HELLO.size, socket.MSG_WAITALL)
                src = _HELLO.unpack(hello)[2]
                for sock in (c, s):
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._eps[a].peers[b] = c
                self._eps[b].peers[src] = s
        for srv in listeners.values():
            srv.close()

    def _reader(self, ep: _Endpoint, sock: socket.socket) -> None:
        try:
            while not self._stop.is_set():
                msg = read_frame(sock)
                if msg is None:
                    return
                ep.inbox.put(msg)
        except OSError:
            return
        except BaseException as exc:  # surfaced by run()
            self._errors.append(exc)
            self._stop.set()

    # -- sending ---------------------------------------------------------------

    def _send(self, msg: Message) -> None:
        if msg.dst not in self._eps:
            raise UnknownNode(f"no node {msg.dst}")
        ep = self._eps[msg.src]
        msg = replace(msg, seq=ep.seq[msg.dst])
        ep.seq[msg.dst] += 1
        with self._lock:
            self.ledger.record(msg)
        if msg.dst == msg.src:
            ep.inbox.put(msg)
        else:
            ep.peers[msg.dst].sendall(encode_frame(msg))

    # -- node loop -------------------------------------------------------------

    def _node_loop(self, node: int) -> None:
        ep = self._eps[node]
        try:
            while not self._stop.is_set():
                try:
                    msg = ep.inbox.get(timeout=0.02)
                except queue.Empty:
                    continue
                state, outbound, records = self.step(self.states[node], msg)
                self.states[node] = state
                with self._lock:
                    for r in records:
                        self.trace.append(dict(r, at=node))
                        self.node_work[node] += int(r.get("work", 0))
                for out in outbound:
                    self._send(out)
                if isinstance(state, ClientState) and state.complete:
                    self._stop.set()
        except BaseException as exc:
            self._errors.append(exc)
            self._stop.set()

    def run(self, script) -> SimResult:
        self._connect_all()
        for ep in self._eps.values():
            for sock in ep.peers.values():
                t = threading.Thread(target=self._reader, args=(ep, sock), daemon=True)
                t.start()
                self._threads.append(t)
        loops = [threading.Thread(target=self._node_loop, args=(n,), daemon=True) for n in sorted(self._eps)]
        t0 = time.perf_counter()
        for t in loops:
            t.start()
        for _, msg in script:
            self._send(msg)
        finished = self._stop.wait(self.timeout_s)
        elapsed_us = (time.perf_counter() - t0) * 1e6
        self._stop.set()
        for t in loops:
            t.join()
        for ep in self._eps.values():
            for sock in ep.peers.values():
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                sock.close()
        if self._errors:
            raise self._errors[0]
        if not finished or not all(s.complete for s in self.states.values() if isinstance(s, ClientState)):
            raise Deadlock("socket cluster timed out with queries incomplete")
        lines = [json.dumps(r, sort_keys=True) for r in self.trace]
        return SimResult(self.states, self.ledger, lines, elapsed_us, dict(self.node_work), {})


def socket_run(topology: dict, script, step: Callable = node_step, timeout_s: float = 120.0) -> SimResult:
    """Run the node states over real sockets; ``makespan_us`` is wall-clock."""
    return SocketCluster(topology, step, timeout_s).run(script)
