import itertools
import math

import numpy as np
import pytest

from models import Batch, ClockEvents, ClusterConfig, ConfigurationError, Dataset, ModelSpec, ParamVector
from services.cluster_service import (
    BITS_MESSAGE_BYTES,
    LOSS_MESSAGE_BYTES,
    ClusterService,
    ClusterSimulation,
    DivergedRunError,
    ProtocolError,
    SimWorker,
)
from services.mdp_controller import MdpController
from services.policies import FixedPolicy, MQGradPolicy
from services.quant_codec import QuantCodecService
from services.tensor_model import TensorModelService
from tests.factories import cluster_with, paper_hyper


def vec(values) -> ParamVector:
    return ParamVector(values=values, shapes=((1, len(values)),))


def test_aggregate_losses():
    assert ClusterService.aggregate_losses([2.0], 1) == 2.0
    assert ClusterService.aggregate_losses([1.0, 2.0, 3.0], 3) == 2.0
    values = [0.1, 1e8, -1e8, 0.7, 3.3]
    means = {ClusterService.aggregate_losses(list(p), 5) for p in itertools.permutations(values)}
    assert len(means) == 1


def test_missing_worker_loss_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        ClusterService.aggregate_losses([1.0, 2.0], 3)


def test_aggregate_gradients():
    assert ClusterService.aggregate_gradients([vec([1, 2]), vec([3, 4])]).values.tolist() == [2.0, 3.0]
    single = vec([0.25, -1.5])
    assert ClusterService.aggregate_gradients([single]).values.tolist() == [0.25, -1.5]


def test_aggregate_gradients_matches_float64_mean():
    rng = np.random.default_rng(9)
    vectors = [vec(rng.normal(size=300).astype(np.float32)) for _ in range(5)]

    mean = ClusterService.aggregate_gradients(vectors).values
    oracle = np.zeros(300)
    for v in vectors:
        oracle += v.values.astype(np.float64)
    oracle /= 5

    assert np.allclose(mean, oracle, rtol=1e-6, atol=1e-7)


def test_aggregate_gradients_rejects_mismatched_lengths():
    with pytest.raises(ProtocolError):
        ClusterService.aggregate_gradients([vec([1, 2]), vec([1, 2, 3])])


def test_comm_time_ms():
    cfg = ClusterConfig(bandwidth=10_000_000.0, latency_ms=1.0)
    assert ClusterService.comm_time_ms(0, cfg) == 1.0
    assert ClusterService.comm_time_ms(1_000_000, cfg) == pytest.approx(101.0)
    double = ClusterService.comm_time_ms(2000, cfg) - 1.0
    assert double == pytest.approx(2 * (ClusterService.comm_time_ms(1000, cfg) - 1.0))


def test_advance_clock_push_and_broadcast():
    cfg = ClusterConfig(num_workers=1, latency_ms=0.0, compute_ms_per_iter=0.0, quantize_ms_per_kelem=0.0)
    events = ClockEvents(push_bytes=(517,), broadcast_bytes=517)

    assert ClusterService.advance_clock(events, cfg) == pytest.approx(0.1034)


def test_advance_clock_bit_ratio():
    cfg = ClusterConfig(num_workers=4, latency_ms=0.0, compute_ms_per_iter=0.0, quantize_ms_per_kelem=0.0)

    def comm(bits):
        size = QuantCodecService.encoded_size_bytes(100_000, bits)
        return ClusterService.advance_clock(ClockEvents(push_bytes=(size,) * 4, broadcast_bytes=size), cfg)

    assert comm(8) / comm(2) == pytest.approx(4.0, rel=1e-3)


@pytest.mark.parametrize("num_workers", [1, 3])
def test_advance_clock_zero_size_messages(num_workers):
    cfg = ClusterConfig(num_workers=num_workers, latency_ms=0.5, compute_ms_per_iter=2.0)
    events = ClockEvents(
        push_bytes=(0,) * num_workers,
        broadcast_bytes=0,
        control_up=(0,) * num_workers,
        control_down=0,
    )

    assert ClusterService.advance_clock(events, cfg) == pytest.approx(2.0 + 2 * (num_workers + 1) * 0.5)


def test_parallel_ingress_charges_the_slowest_push():
    serial = ClusterConfig(latency_ms=0.0, compute_ms_per_iter=0.0)
    parallel = ClusterConfig(latency_ms=0.0, compute_ms_per_iter=0.0, serial_ingress=False)
    events = ClockEvents(push_bytes=(1000, 3000), broadcast_bytes=None)

    assert ClusterService.advance_clock(events, serial) == pytest.approx(0.4)
    assert ClusterService.advance_clock(events, parallel) == pytest.approx(0.3)


def test_shard_is_round_robin():
    train = Batch(inputs=np.arange(7, dtype=np.float32).reshape(7, 1), labels=np.zeros(7))

    shards = ClusterService.shard(train, 3)

    assert [s.inputs[:, 0].tolist() for s in shards] == [[0, 3, 6], [1, 4], [2, 5]]


def test_message_bytes_with_layer_mask():
    assert ClusterService.message_bytes(1000, 0, 4) == 517
    assert ClusterService.message_bytes(1000, 10, 4) == 517 + 40
    assert ClusterService.message_bytes(0, 10, 4) == 40
    assert ClusterService.message_bytes(990, 10, 4, passthrough=True) == 4000


def test_unmasked_blocks_travel_unchanged():
    values = np.linspace(-1, 1, 10, dtype=np.float32)
    mask = np.array([True] * 6 + [False] * 4)

    out = ClusterService._encode_roundtrip(values, mask, 2)

    assert np.array_equal(out[6:], values[6:])
    assert not np.array_equal(out[:6], values[:6])


def test_fix8_single_worker_loss_decreases(small_spec, small_data):
    cluster = cluster_with(num_workers=1, max_iters=10, batch_size=len(small_data.train), shuffle=False, lr=0.1)

    trace = ClusterService.run_training(cluster, small_spec, small_data, FixedPolicy(8), seed=1)

    losses = [r.loss for r in trace]
    assert all(later < earlier for earlier, later in zip(losses[2:], losses[3:]))


def duplicated(data: Dataset) -> Dataset:
    train = data.train
    return Dataset(
        train=Batch(inputs=np.repeat(train.inputs, 2, axis=0), labels=np.repeat(train.labels, 2)),
        test=data.test,
    )


def test_identical_batches_match_a_single_worker_run(small_spec, small_data):
    single = ClusterSimulation(cluster_with(num_workers=1, max_iters=6, shuffle=False), small_spec, small_data, FixedPolicy(8), seed=4)
    pair = ClusterSimulation(
        cluster_with(num_workers=2, max_iters=6, shuffle=False), small_spec, duplicated(small_data), FixedPolicy(8), seed=4
    )

    for m in range(6):
        single.step(m)
        pair.step(m)
        assert np.array_equal(pair.params.values, single.params.values)
        assert np.array_equal(pair.workers[1].params.values, pair.workers[0].params.values)


def test_passthrough_matches_single_process_sgd(small_spec, small_data):
    cluster = cluster_with(num_workers=2, max_iters=12, batch_size=8, shuffle=False, passthrough=True)

    trace = ClusterService.run_training(cluster, small_spec, small_data, FixedPolicy(2), seed=3)

    params = TensorModelService.init_params(small_spec, 3)
    shards = [small_data.train.take(np.arange(p, len(small_data.train), 2)) for p in range(2)]
    cursors = [0, 0]
    for record in trace:
        grads, losses = [], []
        for p, shard in enumerate(shards):
            if cursors[p] + 8 > len(shard):
                cursors[p] = 0
            batch = shard.take(np.arange(cursors[p], cursors[p] + 8))
            cursors[p] += 8
            grad, loss = TensorModelService.compute_grad_loss(params, small_spec, batch)
            grads.append(grad.values.astype(np.float64))
            losses.append(loss)
        assert record.loss == pytest.approx(sum(losses) / 2, rel=1e-6)
        assert record.bits == 32
        mean = ((grads[0] + grads[1]) / 2).astype(np.float32)
        params = params.with_values(params.values - np.float32(cluster.lr) * mean)


def test_bytes_per_iteration_accounting(small_spec, small_data):
    cluster = cluster_with(num_workers=3, max_iters=12)

    trace = ClusterService.run_training(cluster, small_spec, small_data, FixedPolicy(4), seed=0)

    message = QuantCodecService.encoded_size_bytes(small_spec.num_params(), 4)
    expected = 3 * message + message + 3 * LOSS_MESSAGE_BYTES + 3 * BITS_MESSAGE_BYTES
    assert {r.bytes for r in trace} == {expected}
    assert {r.bits for r in trace} == {4}


def test_fix2_payload_is_a_quarter_of_fix8(small_spec, small_data):
    cluster = cluster_with(max_iters=3)
    header = QuantCodecService.HEADER_BYTES
    control = cluster.num_workers * (LOSS_MESSAGE_BYTES + BITS_MESSAGE_BYTES)

    def payload(bits):
        record = ClusterService.run_training(cluster, small_spec, small_data, FixedPolicy(bits), seed=0)[0]
        return record.bytes - control - (cluster.num_workers + 1) * header

    assert payload(8) == pytest.approx(4 * payload(2), abs=4 * (cluster.num_workers + 1))


def test_clock_is_strictly_increasing_and_deterministic(small_spec, small_data, small_cluster):
    first = ClusterService.run_training(small_cluster, small_spec, small_data, FixedPolicy(8), seed=5)
    again = ClusterService.run_training(small_cluster, small_spec, small_data, FixedPolicy(8), seed=5)

    times = [r.sim_time_ms for r in first]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert first == again


def test_mqgrad_runs_keep_bit_invariants(small_spec, small_data):
    hyper = paper_hyper(T=3, epsilon=0.3)
    cluster = cluster_with(max_iters=24, T=3)
    for seed in range(50):
        trace = ClusterService.run_training(
            cluster, small_spec, small_data, MQGradPolicy(hyper, seed), seed=seed
        )
        bits = [r.bits for r in trace]
        assert all(2 <= k <= 8 for k in bits)
        assert all(b >= a for a, b in zip(bits, bits[1:]))
        for record, previous in zip(trace[1:], trace):
            if record.bits != previous.bits:
                assert record.iter % 3 == 0
        for record in trace:
            if record.iter % 3 == 0:
                assert record.mdp_t == record.iter // 3
                assert record.action in (0, 1)
            else:
                assert record.mdp_t is None


def test_mqgrad_rewards_use_the_time_between_consultations(small_spec, small_data):
    hyper = paper_hyper(T=3, epsilon=0.0)
    cluster = cluster_with(max_iters=9, T=3)

    trace = ClusterService.run_training(cluster, small_spec, small_data, MQGradPolicy(hyper, 1), seed=1)

    consulted = [r for r in trace if r.mdp_t is not None]
    assert consulted[0].reward is None
    # losses of iterations 1..3, clock from the first consultation (t=0) to the second
    smoothed = MdpController.smooth_losses([r.loss for r in trace[1:4]], hyper.alpha, trace[0].loss)
    beta, _ = MdpController.fit_slope(smoothed)
    expected = MdpController.reward(beta, trace[2].sim_time_ms, hyper.gamma_scale)
    assert consulted[1].iter == 3
    assert consulted[1].reward == pytest.approx(expected)


def test_divergence_is_recorded_then_raised(small_spec, small_data):
    inputs = small_data.train.inputs.copy()
    inputs[::2] = np.nan
    broken = Dataset(train=Batch(inputs=inputs, labels=small_data.train.labels), test=small_data.test)
    cluster = cluster_with(num_workers=2)

    with pytest.raises(DivergedRunError) as info:
        ClusterService.run_training(cluster, small_spec, broken, FixedPolicy(8), seed=0)

    trace = info.value.trace
    assert info.value.iteration == 0
    assert len(trace) == 1 and trace[0].diverged
    assert math.isnan(trace[0].loss)
    assert trace[0].bits == 8
    assert trace[0].bytes == 2 * LOSS_MESSAGE_BYTES


def test_non_finite_gradients_keep_the_finite_loss(small_spec, small_data, monkeypatch):
    real = SimWorker.compute
    calls = {"n": 0}

    def compute(self, spec):
        grad, loss = real(self, spec)
        calls["n"] += 1
        # both workers of iteration 2
        if calls["n"] > 4:
            grad = grad.with_values(np.full(len(grad), np.nan, dtype=np.float32))
        return grad, loss

    monkeypatch.setattr(SimWorker, "compute", compute)
    cluster = cluster_with(num_workers=2, max_iters=10)

    with pytest.raises(DivergedRunError) as info:
        ClusterService.run_training(cluster, small_spec, small_data, FixedPolicy(4), seed=0)

    last = info.value.trace[-1]
    assert info.value.iteration == 2
    assert math.isfinite(last.loss)
    assert math.isnan(last.grad_rms)
    assert last.diverged
    assert last.bits == 4


def test_divergence_before_any_consultation_records_the_starting_bits(small_spec, small_data):
    inputs = small_data.train.inputs.copy()
    inputs[:] = np.nan
    broken = Dataset(train=Batch(inputs=inputs, labels=small_data.train.labels), test=small_data.test)

    with pytest.raises(DivergedRunError) as info:
        ClusterService.run_training(
            cluster_with(num_workers=2, T=3), small_spec, broken, MQGradPolicy(paper_hyper(T=3), 0), seed=0
        )
    assert info.value.trace[0].bits == 2

    with pytest.raises(DivergedRunError) as info:
        ClusterService.run_training(
            cluster_with(num_workers=2, passthrough=True), small_spec, broken, FixedPolicy(8), seed=0
        )
    assert info.value.trace[0].bits == 32


def test_passthrough_keeps_the_loss_window_bounded(small_spec, small_data):
    sim = ClusterSimulation(
        cluster_with(num_workers=2, max_iters=20, T=3, passthrough=True),
        small_spec, small_data, FixedPolicy(8), seed=0,
    )

    for m in range(20):
        sim.step(m)
        assert len(sim.losses_since) <= 3


def test_periodic_evaluation_fills_accuracy_and_full_loss(small_spec, small_data):
    cluster = cluster_with(max_iters=10)

    trace = ClusterService.run_training(
        cluster, small_spec, small_data, FixedPolicy(8), seed=0, eval_every=4, full_loss_every=5
    )

    assert [r.iter for r in trace if r.accuracy is not None] == [3, 7, 9]
    assert [r.iter for r in trace if r.full_loss is not None] == [4, 9]
    assert all(0.0 <= r.accuracy <= 1.0 for r in trace if r.accuracy is not None)


def test_too_few_examples_for_the_workers(small_spec):
    tiny = Dataset(
        train=Batch(inputs=np.zeros((1, small_spec.input_dim)), labels=[0]),
        test=Batch(inputs=np.zeros((1, small_spec.input_dim)), labels=[0]),
    )
    with pytest.raises(ConfigurationError):
        ClusterService.run_training(cluster_with(num_workers=2), small_spec, tiny, FixedPolicy(8), seed=0)


def test_model_spec_rejects_mismatched_init(small_spec, small_data, small_cluster):
    wrong = TensorModelService.init_params(ModelSpec(layer_sizes=(8, 3)), 0)
    with pytest.raises(ConfigurationError):
        ClusterSimulation(small_cluster, small_spec, small_data, FixedPolicy(8), seed=0, init=wrong)
