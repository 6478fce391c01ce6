"""Message-passing substrates for the collective algorithms.

Algorithms are written once, as generators that yield Send/Recv effects, and
can be driven by two transports satisfying the same contract (reliable,
in-order delivery per directed pair, exact byte counters):

* an in-process simulated network whose scheduler interleaves the per-rank
  coroutines either round-robin (deterministic) or at random (for fuzzing
  that results are schedule-independent), and
* loopback TCP sockets between OS processes.

Byte counters distinguish payload from the zero-padding the algorithms add
to make buffers divisible, so analytic traffic formulas stay exactly
checkable.
"""

from __future__ import annotations

import random
import socket
import struct
from dataclasses import dataclass, field

import multiprocessing as mp

import numpy as np

ELEM_BYTES = 8  # float64 payloads throughout


class TransportError(RuntimeError):
    pass


@dataclass
class Send:
    """Effect: hand `data` to rank `dst` (non-blocking, buffered)."""

    dst: int
    data: np.ndarray
    payload_bytes: int
    padding_bytes: int


@dataclass
class Recv:
    """Effect: block until the next message from rank `src` arrives."""

    src: int


@dataclass
class TrafficReport:
    """Per-server traffic after a collective completes; bytes are exact."""

    p: int
    steps: list = field(default_factory=list)  # send operations per server
    bytes_sent: list = field(default_factory=list)  # payload only
    bytes_received: list = field(default_factory=list)
    padding_sent: list = field(default_factory=list)
    padding_received: list = field(default_factory=list)

    @classmethod
    def empty(cls, p: int) -> "TrafficReport":
        return cls(
            p=p,
            steps=[0] * p,
            bytes_sent=[0] * p,
            bytes_received=[0] * p,
            padding_sent=[0] * p,
            padding_received=[0] * p,
        )

    def record_send(self, rank, payload_bytes, padding_bytes):
        self.steps[rank] += 1
        self.bytes_sent[rank] += payload_bytes
        self.padding_sent[rank] += padding_bytes

    def record_recv(self, rank, payload_bytes, padding_bytes):
        self.bytes_received[rank] += payload_bytes
        self.padding_received[rank] += padding_bytes

    @property
    def total_sent(self) -> int:
        return sum(self.bytes_sent) + sum(self.padding_sent)

    @property
    def total_received(self) -> int:
        return sum(self.bytes_received) + sum(self.padding_received)


# in-process simulated network


class CollectiveTask:
    """One collective instance: p rank coroutines over a private mailbox set.

    Distinct tasks never share queues, which is what lets several allreduce
    runs proceed concurrently without extra synchronization.
    """

    _START, _RESUME, _RECV_WAIT, _DONE = range(4)

    def __init__(self, name: str, generators: list):
        self.name = name
        self.p = len(generators)
        self.generators = generators
        self.queues = {}  # (src, dst) -> list of pending messages
        self.report = TrafficReport.empty(self.p)
        self.results = [None] * self.p
        self.state = [(self._START, None)] * self.p
        self.done = 0

    def finished(self) -> bool:
        return self.done == self.p

    def runnable(self, rank: int) -> bool:
        kind, detail = self.state[rank]
        if kind in (self._START, self._RESUME):
            return True
        if kind == self._RECV_WAIT:
            return bool(self.queues.get((detail, rank)))
        return False

    def advance(self, rank: int) -> None:
        kind, detail = self.state[rank]
        gen = self.generators[rank]
        if kind == self._RECV_WAIT:
            data, payload, padding = self.queues[(detail, rank)].pop(0)
            self.report.record_recv(rank, payload, padding)
            value = data
        else:
            value = None
        try:
            effect = gen.send(value)
        except StopIteration as stop:
            self.results[rank] = stop.value
            self.state[rank] = (self._DONE, None)
            self.done += 1
            return
        if isinstance(effect, Send):
            self.report.record_send(rank, effect.payload_bytes, effect.padding_bytes)
            self.queues.setdefault((rank, effect.dst), []).append(
                (effect.data, effect.payload_bytes, effect.padding_bytes)
            )
            self.state[rank] = (self._RESUME, None)
        elif isinstance(effect, Recv):
            self.state[rank] = (self._RECV_WAIT, effect.src)
        else:
            raise TransportError(f"unknown effect from rank {rank}: {effect!r}")

    def stuck_description(self) -> str:
        waits = [
            f"rank {r} waiting on {d} (after {self.report.steps[r]} sends)"
            for r, (k, d) in enumerate(self.state)
            if k == self._RECV_WAIT
        ]
        return f"collective {self.name!r}: " + "; ".join(waits)


class SimScheduler:
    """Interleaves coroutines of any number of in-flight collectives.

    policy 'round_robin' is fully deterministic; 'random' draws the next
    runnable coroutine from a seeded RNG. Either way results are identical
    because recv is source-addressed and per-pair delivery is FIFO.
    """

    def __init__(self, policy: str = "round_robin", seed: int = 0):
        if policy not in ("round_robin", "random"):
            raise ValueError(f"unknown scheduler policy: {policy!r}")
        self.policy = policy
        self.rng = random.Random(seed)
        self.tasks = []
        self._cursor = 0
        self.on_task_complete = None

    def add(self, task: CollectiveTask) -> None:
        self.tasks.append(task)

    def _runnable(self):
        out = []
        for ti, task in enumerate(self.tasks):
            if task.finished():
                continue
            for rank in range(task.p):
                if task.runnable(rank):
                    out.append((ti, rank))
        return out

    def run(self) -> None:
        while True:
            runnable = self._runnable()
            if not runnable:
                stuck = [t for t in self.tasks if not t.finished()]
                if stuck:
                    raise TransportError(
                        "deadlock: " + " | ".join(t.stuck_description() for t in stuck)
                    )
                return
            if self.policy == "random":
                ti, rank = runnable[self.rng.randrange(len(runnable))]
            else:
                self._cursor += 1
                ti, rank = runnable[self._cursor % len(runnable)]
            task = self.tasks[ti]
            was_finished = task.finished()
            task.advance(rank)
            if task.finished() and not was_finished and self.on_task_complete:
                self.on_task_complete(task)


def run_in_process(
    name: str, generators: list, policy: str = "round_robin", seed: int = 0
) -> tuple[list, TrafficReport]:
    """Drive one collective to completion on the simulated network."""
    task = CollectiveTask(name, generators)
    sched = SimScheduler(policy=policy, seed=seed)
    sched.add(task)
    sched.run()
    return task.results, task.report


# loopback socket transport

_HEADER = struct.Struct("<QQQ")  # data bytes, payload bytes, padding bytes


def _read_exact(conn: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise TransportError("peer closed connection mid-message")
        buf.extend(chunk)
    return bytes(buf)


def _drive_blocking(gen, rank: int, conns: dict, report: TrafficReport):
    """Run one rank's coroutine against blocking socket I/O."""
    value = None
    while True:
        try:
            effect = gen.send(value)
        except StopIteration as stop:
            return stop.value
        if isinstance(effect, Send):
            data = np.ascontiguousarray(effect.data, dtype=np.float64)
            header = _HEADER.pack(data.nbytes, effect.payload_bytes, effect.padding_bytes)
            conns[effect.dst].sendall(header + data.tobytes())
            report.record_send(rank, effect.payload_bytes, effect.padding_bytes)
            value = None
        elif isinstance(effect, Recv):
            header = _read_exact(conns[effect.src], _HEADER.size)
            nbytes, payload, padding = _HEADER.unpack(header)
            raw = _read_exact(conns[effect.src], nbytes)
            report.record_recv(rank, payload, padding)
            value = np.frombuffer(raw, dtype=np.float64).copy()
        else:
            raise TransportError(f"unknown effect: {effect!r}")


def _socket_worker(rank, p, algo_factory, payload, report_q, port_q, portmap_q):
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(p)
    port_q.put((rank, listener.getsockname()[1]))
    ports = portmap_q.get()

    conns = {}
    # Lower ranks connect out, higher ranks accept, so the mesh forms
    # without a rendezvous race.
    for peer in range(rank):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.connect(("127.0.0.1", ports[peer]))
        s.sendall(struct.pack("<Q", rank))
        conns[peer] = s
    for _ in range(p - 1 - rank):
        s, _ = listener.accept()
        (peer,) = struct.unpack("<Q", _read_exact(s, 8))
        conns[peer] = s
    listener.close()

    report = TrafficReport.empty(p)
    gen = algo_factory(rank, payload)
    result = _drive_blocking(gen, rank, conns, report)
    report_q.put(
        (
            rank,
            result,
            report.steps[rank],
            report.bytes_sent[rank],
            report.bytes_received[rank],
            report.padding_sent[rank],
            report.padding_received[rank],
        )
    )
    for s in conns.values():
        s.close()


def run_over_sockets(algo_factory, inputs: list) -> tuple[list, TrafficReport]:
    """Drive one collective with one OS process per rank over loopback TCP.

    algo_factory(rank, payload) must return the effect generator for that
    rank; inputs is the list of per-rank payload arrays.
    """
    p = len(inputs)
    ctx = mp.get_context("fork")
    report_q = ctx.Queue()
    port_q = ctx.Queue()
    portmap_qs = [ctx.Queue() for _ in range(p)]
    procs = [
        ctx.Process(
            target=_socket_worker,
            args=(r, p, algo_factory, inputs[r], report_q, port_q, portmap_qs[r]),
        )
        for r in range(p)
    ]
    for proc in procs:
        proc.start()
    ports = {}
    for _ in range(p):
        rank, port = port_q.get()
        ports[rank] = port
    for q in portmap_qs:
        q.put(ports)
    results = [None] * p
    report = TrafficReport.empty(p)
    for _ in range(p):
        # bounded wait so a crashed worker fails the run instead of hanging it
        rank, result, steps, sent, recvd, pad_s, pad_r = report_q.get(timeout=60)
        results[rank] = result
        report.steps[rank] = steps
        report.bytes_sent[rank] = sent
        report.bytes_received[rank] = recvd
        report.padding_sent[rank] = pad_s
        report.padding_received[rank] = pad_r
    for proc in procs:
        proc.join()
    return results, report


@dataclass
class LinkCostModel:
    """Analytic per-link timing: fixed latency per step plus bytes/bandwidth.

    Crossover between algorithms depends entirely on these two parameters;
    they are knobs, not asserted constants.
    """

    latency_s: float = 5e-6
    bandwidth_bytes_per_s: float = 1.25e9  # 10 Gbit/s

    def collective_seconds(self, report: TrafficReport) -> float:
        worst = 0.0
        for r in range(report.p):
            sent = report.bytes_sent[r] + report.padding_sent[r]
            t = report.steps[r] * self.latency_s + sent / self.bandwidth_bytes_per_s
            worst = max(worst, t)
        return worst
