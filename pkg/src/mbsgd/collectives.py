"""Allreduce algorithms with verifiable traffic accounting.

Three interchangeable interserver algorithms produce the elementwise sum of
all p input buffers on every server:

* ring (bucket): 2(p-1) steps, bandwidth-optimal;
* recursive halving/doubling: reduce-scatter then allgather in 2*log2(p)
  steps, power-of-two server counts only;
* binary blocks: servers partitioned into power-of-two blocks (largest
  first); each block reduce-scatters internally, smaller blocks push their
  partial chunks to the matching ranks of the largest block, the fully
  reduced chunks flow back, and the blocks allgather internally.

Both pairwise algorithms send and receive 2*(p-1)/p * b bytes per server.
Buffers are zero-padded to the chunking granularity; padding traffic is
counted separately so that formula stays exactly checkable.

All algorithms are generators of transport effects; see transport.py for
the drivers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .transport import ELEM_BYTES, Recv, Send, TrafficReport, run_in_process

RING = "ring"
HALVING_DOUBLING = "hd"
BINARY_BLOCKS = "blocks"
ALGORITHMS = (RING, HALVING_DOUBLING, BINARY_BLOCKS)

# Intraserver reductions below this buffer size would use plain memory
# copies rather than a dedicated kernel; at desk scale both are the same
# summation, the threshold only labels the phase.
LOCAL_KERNEL_THRESHOLD_BYTES = 256 * 1024


@dataclass(frozen=True)
class Topology:
    """p servers of g workers each; interserver traffic is what gets counted."""

    servers: int
    gpus_per_server: int = 8

    def __post_init__(self):
        if self.servers < 1 or self.gpus_per_server < 1:
            raise ValueError("servers and gpus_per_server must be >= 1")

    @property
    def workers(self) -> int:
        return self.servers * self.gpus_per_server


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def local_reduce(buffers: list) -> np.ndarray:
    """Sum the per-worker buffers of one server; no network traffic."""
    if not buffers:
        raise ValueError("local_reduce needs at least one buffer")
    first = np.asarray(buffers[0], dtype=np.float64)
    out = first.copy()
    for buf in buffers[1:]:
        buf = np.asarray(buf, dtype=np.float64)
        if buf.shape != first.shape:
            raise ValueError(f"shape mismatch: {buf.shape} vs {first.shape}")
        out += buf
    return out


def local_broadcast(result: np.ndarray, g: int) -> list:
    """g bit-identical copies of the reduced buffer for the server's workers."""
    return [np.array(result, dtype=np.float64, copy=True) for _ in range(g)]


def local_reduce_strategy(buffer_bytes: int, threshold: int = LOCAL_KERNEL_THRESHOLD_BYTES) -> str:
    return "kernel" if buffer_bytes >= threshold else "copy"


def _chunk_send(dst, padded, lo, hi, orig_len):
    """Send effect for padded[lo:hi] with payload/padding split at orig_len."""
    length = hi - lo
    payload = min(max(orig_len - lo, 0), length)
    return Send(
        dst,
        padded[lo:hi].copy(),
        payload_bytes=payload * ELEM_BYTES,
        padding_bytes=(length - payload) * ELEM_BYTES,
    )


def ring_rank(rank: int, p: int, buf: np.ndarray):
    """Effect generator for one server of the ring (bucket) allreduce.

    The buffer is cut into p chunks that travel around the ring twice:
    p-1 reduce steps accumulating partial sums, then p-1 steps circulating
    the finished chunks.
    """
    buf = np.asarray(buf, dtype=np.float64).ravel()
    n = len(buf)
    if p == 1 or n == 0:
        return buf[:n].copy()
    size = -(-n // p)  # chunk length, ceil
    padded = np.zeros(size * p, dtype=np.float64)
    padded[:n] = buf[:n]
    right = (rank + 1) % p
    left = (rank - 1) % p
    for step in range(p - 1):
        si = (rank - step) % p
        yield _chunk_send(right, padded, si * size, (si + 1) * size, n)
        ri = (rank - step - 1) % p
        data = yield Recv(left)
        padded[ri * size : (ri + 1) * size] += data
    for step in range(p - 1):
        si = (rank + 1 - step) % p
        yield _chunk_send(right, padded, si * size, (si + 1) * size, n)
        ri = (rank - step) % p
        data = yield Recv(left)
        padded[ri * size : (ri + 1) * size] = data
    return padded[:n]


def _block_reduce_scatter(local_rank, block_size, block_start, padded, orig_len):
    """Pairwise reduce-scatter within one block over the whole padded buffer.

    Distance doubles each step while the exchanged data halves: local rank 0
    first sends the second half of its buffer to local rank 1 and keeps the
    first. Returns the (lo, hi) region this rank ends up owning fully
    reduced; it is determined by reading the local rank's bits from the
    lowest up, one per split level.
    """
    lo, hi = 0, len(padded)
    d = 1
    while d < block_size:
        peer = block_start + (local_rank ^ d)
        mid = (lo + hi) // 2
        if local_rank & d == 0:
            yield _chunk_send(peer, padded, mid, hi, orig_len)
            data = yield Recv(peer)
            padded[lo:mid] += data
            hi = mid
        else:
            yield _chunk_send(peer, padded, lo, mid, orig_len)
            data = yield Recv(peer)
            padded[mid:hi] += data
            lo = mid
        d *= 2
    return lo, hi


def _block_allgather(local_rank, block_size, block_start, padded, lo, hi, orig_len):
    """Mirror of the reduce-scatter: retraces the pattern in reverse,
    swapping the sent and received portions, concatenating reduced chunks."""
    d = block_size // 2
    while d >= 1:
        peer = block_start + (local_rank ^ d)
        size = hi - lo
        if local_rank & d == 0:
            yield _chunk_send(peer, padded, lo, hi, orig_len)
            data = yield Recv(peer)
            padded[hi : hi + size] = data
            hi = hi + size
        else:
            yield _chunk_send(peer, padded, lo, hi, orig_len)
            data = yield Recv(peer)
            padded[lo - size : lo] = data
            lo = lo - size
        d //= 2
    return lo, hi


def _descent_region(local_rank: int, block_size: int, total_len: int) -> tuple:
    """Region of the padded buffer that `local_rank` owns after reduce-scatter."""
    lo, hi = 0, total_len
    d = 1
    while d < block_size:
        mid = (lo + hi) // 2
        if local_rank & d == 0:
            hi = mid
        else:
            lo = mid
        d *= 2
    return lo, hi


def power_of_two_blocks(p: int) -> list:
    """Decompose p into decreasing powers of two (the binary-blocks layout)."""
    blocks = []
    bit = 1 << (p.bit_length() - 1)
    while bit:
        if p & bit:
            blocks.append(bit)
        bit >>= 1
    return blocks


def binary_blocks_rank(rank: int, p: int, buf: np.ndarray):
    """Effect generator for one server of the binary-blocks allreduce.

    For power-of-two p there is a single block and the message schedule is
    identical to halving/doubling. Otherwise the extra interblock exchange
    steps introduce some load imbalance: a block of size s sends/receives
    its whole reduced region to/from the largest block in b0/s pieces.
    """
    buf = np.asarray(buf, dtype=np.float64).ravel()
    n = len(buf)
    if p == 1 or n == 0:
        return buf.copy()
    blocks = power_of_two_blocks(p)
    b0 = blocks[0]
    starts = [sum(blocks[:i]) for i in range(len(blocks))]
    bi = next(i for i in range(len(blocks)) if starts[i] <= rank < starts[i] + blocks[i])
    block_size, block_start = blocks[bi], starts[bi]
    local = rank - block_start

    unit = -(-n // b0)
    padded = np.zeros(unit * b0, dtype=np.float64)
    padded[:n] = buf

    lo, hi = yield from _block_reduce_scatter(local, block_size, block_start, padded, n)

    if len(blocks) > 1:
        if bi == 0:
            # Collect partial sums for my region from every smaller block.
            for j in range(1, len(blocks)):
                peer = starts[j] + (local % blocks[j])
                data = yield Recv(peer)
                padded[lo:hi] += data
        else:
            # My reduced region spans b0/block_size of the largest block's
            # chunks; their owners are the large-block locals congruent to
            # my local rank modulo my block size.
            for u in range(local, b0, block_size):
                ulo, uhi = _descent_region(u, b0, len(padded))
                yield _chunk_send(u, padded, ulo, uhi, n)
        if bi == 0:
            for j in range(1, len(blocks)):
                peer = starts[j] + (local % blocks[j])
                yield _chunk_send(peer, padded, lo, hi, n)
        else:
            for u in range(local, b0, block_size):
                ulo, uhi = _descent_region(u, b0, len(padded))
                data = yield Recv(u)
                padded[ulo:uhi] = data

    yield from _block_allgather(local, block_size, block_start, padded, lo, hi, n)
    return padded[:n]


def halving_doubling_rank(rank: int, p: int, buf: np.ndarray):
    """Effect generator for one server of recursive halving/doubling.

    Requires a power-of-two server count; the schedule equals a single
    binary block.
    """
    if not is_power_of_two(p):
        raise ValueError(
            f"halving/doubling requires a power-of-two server count, got {p}; "
            "use the binary blocks algorithm instead"
        )
    return binary_blocks_rank(rank, p, buf)


RANK_FACTORIES = {
    RING: ring_rank,
    HALVING_DOUBLING: halving_doubling_rank,
    BINARY_BLOCKS: binary_blocks_rank,
}


def _run(algo: str, buffers: list, policy="round_robin", seed=0):
    p = len(buffers)
    factory = RANK_FACTORIES[algo]
    gens = [factory(r, p, buffers[r]) for r in range(p)]
    return run_in_process(algo, gens, policy=policy, seed=seed)


def allreduce_ring(topology: Topology, buffers: list) -> tuple[list, TrafficReport]:
    """Ring allreduce across the topology's servers; returns (sums, traffic)."""
    _check_inputs(topology, buffers)
    return _run(RING, buffers)


def allreduce_halving_doubling(topology: Topology, buffers: list) -> tuple[list, TrafficReport]:
    _check_inputs(topology, buffers)
    if not is_power_of_two(topology.servers):
        raise ValueError(
            f"halving/doubling requires a power-of-two server count, got "
            f"{topology.servers}; use the binary blocks algorithm instead"
        )
    return _run(HALVING_DOUBLING, buffers)


def allreduce_binary_blocks(topology: Topology, buffers: list) -> tuple[list, TrafficReport]:
    _check_inputs(topology, buffers)
    return _run(BINARY_BLOCKS, buffers)


def allreduce(algo: str, topology: Topology, buffers: list) -> tuple[list, TrafficReport]:
    if algo == RING:
        return allreduce_ring(topology, buffers)
    if algo == HALVING_DOUBLING:
        return allreduce_halving_doubling(topology, buffers)
    if algo == BINARY_BLOCKS:
        return allreduce_binary_blocks(topology, buffers)
    raise ValueError(f"unknown allreduce algorithm: {algo!r}")


def _check_inputs(topology: Topology, buffers: list) -> None:
    if len(buffers) != topology.servers:
        raise ValueError(f"expected {topology.servers} buffers, got {len(buffers)}")
    shapes = {np.asarray(b).shape for b in buffers}
    if len(shapes) > 1:
        raise ValueError(f"buffers must share one shape, got {shapes}")


def direct_sum(buffers: list) -> np.ndarray:
    """Independent oracle: plain sequential elementwise sum."""
    out = np.array(buffers[0], dtype=np.float64, copy=True)
    for buf in buffers[1:]:
        out = out + np.asarray(buf, dtype=np.float64)
    return out


def predict_bytes(p: int, b: int) -> float:
    """Per-server payload bytes sent (= received): 2*(p-1)/p * b."""
    if p < 1 or b < 0:
        raise ValueError("p must be >= 1 and b >= 0")
    return 2.0 * (p - 1) / p * b


def predict_steps(algo: str, p: int) -> int:
    """Per-server communication steps for a p-server allreduce."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if p == 1:
        return 0
    if algo == RING:
        return 2 * (p - 1)
    if algo == HALVING_DOUBLING:
        if not is_power_of_two(p):
            raise ValueError(f"halving/doubling undefined for p={p}")
        return 2 * int(math.log2(p))
    if algo == BINARY_BLOCKS:
        blocks = power_of_two_blocks(p)
        base = 2 * int(math.log2(blocks[0]))
        return base + (2 if len(blocks) > 1 else 0)
    raise ValueError(f"unknown allreduce algorithm: {algo!r}")


def bandwidth_requirement(
    param_count: int, bytes_per_param: int, backprop_seconds: float
) -> float:
    """Peak network rate in bits/second to hide aggregation inside backprop.

    Allreduce moves about twice the buffer size over the wire, so the rate
    is 2 * params * bytes / backprop time, converted to bits.
    """
    if param_count <= 0 or bytes_per_param <= 0 or backprop_seconds <= 0:
        raise ValueError("all inputs must be positive")
    return 2.0 * param_count * bytes_per_param / backprop_seconds * 8.0
