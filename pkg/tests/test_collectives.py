import numpy as np
import pytest

from mbsgd.collectives import (
    ALGORITHMS,
    BINARY_BLOCKS,
    HALVING_DOUBLING,
    RING,
    Topology,
    allreduce,
    allreduce_binary_blocks,
    allreduce_halving_doubling,
    allreduce_ring,
    bandwidth_requirement,
    binary_blocks_rank,
    direct_sum,
    halving_doubling_rank,
    is_power_of_two,
    local_broadcast,
    local_reduce,
    local_reduce_strategy,
    power_of_two_blocks,
    predict_bytes,
    predict_steps,
    ring_rank,
)
from mbsgd.transport import (
    Recv,
    Send,
    TransportError,
    run_in_process,
    run_over_sockets,
)


def integer_buffers(rng, p, length):
    return [rng.integers(-1000, 1000, size=length).astype(float) for _ in range(p)]


def test_local_reduce():
    assert np.array_equal(local_reduce([np.array([1.0, 2.0]), np.array([3.0, 4.0])]), [4.0, 6.0])
    x = np.array([5.0, 6.0])
    assert np.array_equal(local_reduce([x]), x)
    with pytest.raises(ValueError):
        local_reduce([np.zeros(2), np.zeros(3)])


def test_local_reduce_matches_fold():
    rng = np.random.default_rng(0)
    bufs = [rng.standard_normal(64) for _ in range(8)]
    fold = bufs[0].copy()
    for b in bufs[1:]:
        fold = fold + b
    assert np.allclose(local_reduce(bufs), fold, rtol=1e-12)


def test_local_broadcast():
    x = np.array([1.0, 2.0, 3.0])
    copies = local_broadcast(x, 3)
    assert len(copies) == 3
    assert all(np.array_equal(c, x) for c in copies)
    copies[0][0] = 99.0  # copies, not views
    assert x[0] == 1.0


def test_broadcast_of_reduce_scales_by_g():
    x = np.array([2.0, -1.0])
    g = 4
    total = local_reduce([x] * g)
    for c in local_broadcast(total, g):
        assert np.array_equal(c, g * x)


def test_local_reduce_strategy_threshold():
    assert local_reduce_strategy(256 * 1024) == "kernel"
    assert local_reduce_strategy(256 * 1024 - 1) == "copy"


def test_ring_example():
    topo = Topology(4, 1)
    inputs = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0]), np.array([7.0, 8.0])]
    results, report = allreduce_ring(topo, inputs)
    assert all(np.array_equal(r, [16.0, 20.0]) for r in results)
    assert report.steps == [6, 6, 6, 6]


def test_ring_traffic_bytes():
    topo = Topology(4, 1)
    bufs = integer_buffers(np.random.default_rng(1), 4, 128)  # 1024 bytes
    _, report = allreduce_ring(topo, bufs)
    assert report.bytes_sent == [1536] * 4
    assert report.padding_sent == [0] * 4
    assert report.bytes_received == [1536] * 4


def test_halving_doubling_examples():
    results, report = allreduce_halving_doubling(
        Topology(2, 1), [np.array([1.0, 2.0]), np.array([10.0, 20.0])]
    )
    assert all(np.array_equal(r, [11.0, 22.0]) for r in results)
    assert report.steps == [2, 2]

    bufs = integer_buffers(np.random.default_rng(2), 4, 128)
    _, report = allreduce_halving_doubling(Topology(4, 1), bufs)
    assert report.bytes_sent == [1536] * 4
    assert report.steps == [4, 4, 4, 4]


def test_halving_doubling_rejects_non_power_of_two():
    with pytest.raises(ValueError, match="binary blocks"):
        allreduce_halving_doubling(Topology(3, 1), [np.zeros(4)] * 3)


def test_binary_blocks_examples():
    results, _ = allreduce_binary_blocks(
        Topology(3, 1), [np.array([1.0]), np.array([2.0]), np.array([3.0])]
    )
    assert all(np.array_equal(r, [6.0]) for r in results)


def test_blocks_matches_hd_schedule_for_power_of_two():
    # Same effect stream rank by rank, not just the same answer.
    rng = np.random.default_rng(3)
    bufs = integer_buffers(rng, 4, 32)
    for rank in range(4):
        hd = halving_doubling_rank(rank, 4, bufs[rank])
        bb = binary_blocks_rank(rank, 4, bufs[rank])
        feed_hd, feed_bb = None, None
        while True:
            try:
                eff_hd = hd.send(feed_hd)
            except StopIteration as stop:
                with pytest.raises(StopIteration):
                    bb.send(feed_bb)
                break
            eff_bb = bb.send(feed_bb)
            assert type(eff_hd) is type(eff_bb)
            if isinstance(eff_hd, Send):
                assert eff_hd.dst == eff_bb.dst
                assert np.array_equal(eff_hd.data, eff_bb.data)
                feed_hd = feed_bb = None
            else:
                assert eff_hd.src == eff_bb.src
                # feed both the same reduced chunk so they stay in lockstep
                fake = np.zeros(1)
                feed_hd = feed_bb = fake


def test_power_of_two_blocks_decomposition():
    assert power_of_two_blocks(1) == [1]
    assert power_of_two_blocks(4) == [4]
    assert power_of_two_blocks(6) == [4, 2]
    assert power_of_two_blocks(7) == [4, 2, 1]
    assert power_of_two_blocks(9) == [8, 1]


@pytest.mark.parametrize("p", range(1, 10))
def test_all_algorithms_match_direct_sum(p):
    rng = np.random.default_rng(100 + p)
    for length in (p, p + 3, 257, 1024):
        bufs = [rng.standard_normal(length) for _ in range(p)]
        want = direct_sum(bufs)
        for algo in ALGORITHMS:
            if algo == HALVING_DOUBLING and not is_power_of_two(p):
                continue
            results, _ = allreduce(algo, Topology(p, 1), bufs)
            for r in results:
                assert np.allclose(r, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("p", range(2, 10))
def test_algorithms_agree_bitwise_on_integer_data(p):
    rng = np.random.default_rng(200 + p)
    bufs = integer_buffers(rng, p, 64)
    want = direct_sum(bufs)
    for algo in ALGORITHMS:
        if algo == HALVING_DOUBLING and not is_power_of_two(p):
            continue
        results, _ = allreduce(algo, Topology(p, 1), bufs)
        for r in results:
            assert np.array_equal(r, want)


@pytest.mark.parametrize("algo", [RING, HALVING_DOUBLING])
@pytest.mark.parametrize("p", [2, 4, 8])
def test_traffic_matches_predictions_exactly(algo, p):
    rng = np.random.default_rng(17)
    length = 16 * p  # divisible by p: padding-free
    bufs = integer_buffers(rng, p, length)
    _, report = allreduce(algo, Topology(p, 1), bufs)
    b = length * 8
    for rank in range(p):
        assert report.steps[rank] == predict_steps(algo, p)
        assert report.bytes_sent[rank] == predict_bytes(p, b)
        assert report.bytes_received[rank] == predict_bytes(p, b)
        assert report.padding_sent[rank] == 0


@pytest.mark.parametrize("algo", [RING, HALVING_DOUBLING])
def test_padding_counted_separately(algo):
    p = 4
    length = 30  # not divisible by 4: pads to 32
    bufs = integer_buffers(np.random.default_rng(18), p, length)
    results, report = allreduce(algo, Topology(p, 1), bufs)
    want = direct_sum(bufs)
    assert all(np.array_equal(r, want) for r in results)
    padded_b = 32 * 8
    for rank in range(p):
        total = report.bytes_sent[rank] + report.padding_sent[rank]
        assert total == predict_bytes(p, padded_b)
    assert sum(report.padding_sent) > 0


def test_conservation_sent_equals_received():
    for p in (2, 3, 5, 8):
        bufs = integer_buffers(np.random.default_rng(p), p, 41)
        for algo in ALGORITHMS:
            if algo == HALVING_DOUBLING and not is_power_of_two(p):
                continue
            _, report = allreduce(algo, Topology(p, 1), bufs)
            assert report.total_sent == report.total_received


def test_reduce_scatter_intermediate_state():
    # After reduce-scatter every server holds one fully reduced portion;
    # with the distance-doubling pairing, rank r owns the bit-reversed chunk.
    from mbsgd.collectives import _block_reduce_scatter

    p, length = 8, 64
    rng = np.random.default_rng(23)
    bufs = integer_buffers(rng, p, length)
    want = direct_sum(bufs)

    def rs_only(rank, buf):
        padded = buf.copy()
        lo, hi = yield from _block_reduce_scatter(rank, p, 0, padded, length)
        return lo, hi, padded

    results, _ = run_in_process("rs", [rs_only(r, bufs[r]) for r in range(p)])

    def bitrev(x, bits):
        out = 0
        for _ in range(bits):
            out = (out << 1) | (x & 1)
            x >>= 1
        return out

    unit = length // p
    regions = []
    for rank, (lo, hi, padded) in enumerate(results):
        assert hi - lo == unit
        assert lo == bitrev(rank, 3) * unit
        assert np.array_equal(padded[lo:hi], want[lo:hi])
        regions.append((lo, hi))
    assert sorted(regions) == [(i * unit, (i + 1) * unit) for i in range(p)]


def test_single_server_is_identity():
    x = np.array([3.0, 1.0, 4.0])
    for algo in ALGORITHMS:
        results, report = allreduce(algo, Topology(1, 1), [x])
        assert np.array_equal(results[0], x)
        assert report.steps == [0]
        assert report.bytes_sent == [0]


def test_scheduler_policy_does_not_change_results():
    p = 5
    bufs = integer_buffers(np.random.default_rng(31), p, 23)
    base, _ = run_in_process("rr", [ring_rank(r, p, bufs[r]) for r in range(p)])
    for seed in range(20):
        out, _ = run_in_process(
            "rand", [ring_rank(r, p, bufs[r]) for r in range(p)], policy="random", seed=seed
        )
        for a, b in zip(base, out):
            assert np.array_equal(a, b)


def test_deadlock_detection_names_peer():
    def stuck(rank):
        if rank == 0:
            data = yield Recv(1)  # rank 1 never sends
            return data
        return np.zeros(1)

    with pytest.raises(TransportError, match="waiting on 1"):
        run_in_process("stuck", [stuck(0), stuck(1)])


@pytest.mark.parametrize("p", [2, 3, 4])
def test_socket_transport_matches_simulated(p):
    rng = np.random.default_rng(40 + p)
    bufs = integer_buffers(rng, p, 19)
    want = direct_sum(bufs)
    for algo, factory in ((RING, ring_rank), (BINARY_BLOCKS, binary_blocks_rank)):
        sim_results, sim_report = allreduce(algo, Topology(p, 1), bufs)
        sock_results, sock_report = run_over_sockets(
            lambda rank, payload, _f=factory: _f(rank, p, payload), bufs
        )
        for r in sock_results:
            assert np.array_equal(r, want)
        assert sock_report.steps == sim_report.steps
        assert sock_report.bytes_sent == sim_report.bytes_sent
        assert sock_report.bytes_received == sim_report.bytes_received
        assert sock_report.padding_sent == sim_report.padding_sent


def test_predict_bytes_values():
    assert predict_bytes(32, 100_000_000) == 193_750_000.0
    assert predict_bytes(1, 12345) == 0.0
    assert predict_bytes(4, 1024) == 1536.0


def test_predict_steps_values():
    assert predict_steps(RING, 32) == 62
    assert predict_steps(HALVING_DOUBLING, 32) == 10
    assert predict_steps(RING, 1) == 0
    assert predict_steps(BINARY_BLOCKS, 4) == 4
    assert predict_steps(BINARY_BLOCKS, 6) == 2 * 2 + 2
    with pytest.raises(ValueError):
        predict_steps(HALVING_DOUBLING, 6)


def test_bandwidth_requirement_values():
    assert bandwidth_requirement(25_000_000, 4, 0.125) == 12.8e9
    assert bandwidth_requirement(25_000_000, 4, 0.25) == 6.4e9
    with pytest.raises(ValueError):
        bandwidth_requirement(0, 4, 0.1)


def test_topology_workers():
    topo = Topology(4, 8)
    assert topo.workers == 32
    with pytest.raises(ValueError):
        Topology(0, 8)
