"""Cluster service - deterministic simulation of a parameter-server cluster.

One scheduler, P workers and one logical server run a bulk-synchronous
iteration protocol; a virtual clock advances by the communication cost
model instead of wall time.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from models import (
    Batch,
    ClockEvents,
    ClusterConfig,
    ConfigurationError,
    Dataset,
    ModelSpec,
    ParamVector,
    PolicyContext,
    PolicyDecision,
    TraceRecord,
)
from services.quant_codec import QuantCodecService
from services.tensor_model import TensorModelService

if TYPE_CHECKING:
    from services.policies import BitPolicy

logger = logging.getLogger(__name__)

LOSS_MESSAGE_BYTES = 4
BITS_MESSAGE_BYTES = 1
PASSTHROUGH_BITS = 32


class ProtocolError(RuntimeError):
    """Raised when the simulated protocol is violated (a harness bug)."""


class DivergedRunError(RuntimeError):
    """Raised when the global loss becomes non-finite; keeps the partial trace."""

    def __init__(self, iteration: int, trace: list[TraceRecord]):
        self.iteration = iteration
        self.trace = trace
        super().__init__(f"training diverged at iteration {iteration}")


@dataclass
class SimWorker:
    """One worker: a parameter replica and a round-robin shard of the training set."""

    index: int
    params: ParamVector
    shard: Batch
    batch_size: int
    rng: np.random.Generator
    shuffle: bool = True
    cursor: int = 0
    order: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.order = self._new_order()

    def _new_order(self) -> np.ndarray:
        if self.shuffle:
            return self.rng.permutation(len(self.shard))
        return np.arange(len(self.shard))

    def next_batch(self) -> Batch:
        size = min(self.batch_size, len(self.shard))
        if self.cursor + size > len(self.shard):
            self.order = self._new_order()
            self.cursor = 0
        indices = self.order[self.cursor : self.cursor + size]
        self.cursor += size
        return self.shard.take(indices)

    def compute(self, spec: ModelSpec) -> tuple[ParamVector, float]:
        return TensorModelService.compute_grad_loss(self.params, spec, self.next_batch())


class ClusterService:
    """Protocol steps, cost model and the training loop of the simulated cluster."""

    @staticmethod
    def aggregate_losses(local_losses: Sequence[float], num_workers: Optional[int] = None) -> float:
        """Global loss: arithmetic mean of the workers' local losses.

        Raises:
            ProtocolError: If a worker value is missing
        """
        if not local_losses or (num_workers is not None and len(local_losses) != num_workers):
            raise ProtocolError(
                f"expected {num_workers} local losses, received {len(local_losses)}"
            )
        # exactly rounded sum, so the mean does not depend on arrival order
        return math.fsum(float(x) for x in local_losses) / len(local_losses)

    @staticmethod
    def aggregate_gradients(vectors: Sequence[ParamVector]) -> ParamVector:
        """Elementwise mean, accumulated in float64 in worker-index order.

        Raises:
            ProtocolError: If vectors are missing or differ in length
        """
        if not vectors:
            raise ProtocolError("no gradients to aggregate")
        lengths = {len(v) for v in vectors}
        if len(lengths) != 1:
            raise ProtocolError(f"gradient length mismatch: {sorted(lengths)}")
        total = np.zeros(len(vectors[0]), dtype=np.float64)
        for vec in vectors:
            total += vec.values
        return vectors[0].with_values((total / len(vectors)).astype(np.float32))

    @staticmethod
    def comm_time_ms(num_bytes: int, cfg: ClusterConfig) -> float:
        """One message: latency plus serialisation time on the link."""
        if num_bytes < 0:
            raise ConfigurationError("message size must be >= 0")
        return cfg.latency_ms + num_bytes / cfg.bandwidth * 1000.0

    @staticmethod
    def _ingress_ms(sizes: Sequence[int], cfg: ClusterConfig) -> float:
        if not sizes:
            return 0.0
        times = [ClusterService.comm_time_ms(size, cfg) for size in sizes]
        # serial: P pushes queue on the server's one link
        return math.fsum(times) if cfg.serial_ingress else max(times)

    @staticmethod
    def codec_ms(events: ClockEvents, cfg: ClusterConfig) -> float:
        return cfg.quantize_ms_per_kelem * events.codec_elems / 1000.0

    @staticmethod
    def advance_clock(events: ClockEvents, cfg: ClusterConfig) -> float:
        """Simulated milliseconds taken by one iteration's ``events``."""
        delta = cfg.compute_ms_per_iter + ClusterService.codec_ms(events, cfg)
        delta += ClusterService._ingress_ms(events.control_up, cfg)
        if events.control_down is not None:
            delta += ClusterService.comm_time_ms(events.control_down, cfg)
        delta += ClusterService._ingress_ms(events.push_bytes, cfg)
        if events.broadcast_bytes is not None:
            delta += ClusterService.comm_time_ms(events.broadcast_bytes, cfg)
        return delta + events.extra_ms

    @staticmethod
    def message_bytes(num_quantized: int, num_raw: int, bits: int, passthrough: bool = False) -> int:
        """Size of one gradient message (worker push or server broadcast)."""
        if passthrough:
            return QuantCodecService.raw_size_bytes(num_quantized + num_raw)
        size = QuantCodecService.raw_size_bytes(num_raw)
        if num_quantized:
            size += QuantCodecService.encoded_size_bytes(num_quantized, bits)
        return size

    @staticmethod
    def iteration_bytes(message: int, num_workers: int) -> int:
        """P pushes, one broadcast, P loss messages up and P bit messages down."""
        return (
            num_workers * message
            + message
            + num_workers * LOSS_MESSAGE_BYTES
            + num_workers * BITS_MESSAGE_BYTES
        )

    @staticmethod
    def shard(train: Batch, num_workers: int) -> list[Batch]:
        """Round-robin split of the training set by example index."""
        if len(train) < num_workers:
            raise ConfigurationError(
                f"{len(train)} training examples cannot feed {num_workers} workers",
                "cluster.num_workers",
            )
        indices = np.arange(len(train))
        return [train.take(indices[p::num_workers]) for p in range(num_workers)]

    @staticmethod
    def _encode_roundtrip(values: np.ndarray, mask: np.ndarray, bits: int) -> np.ndarray:
        """What the receiver reconstructs from one quantised message."""
        out = values.copy()
        if mask.any():
            qt = QuantCodecService.quantize(values[mask], bits)
            out[mask] = QuantCodecService.dequantize(QuantCodecService.from_wire(qt.to_bytes()))
        return out

    @staticmethod
    def run_training(
        cluster: ClusterConfig,
        model: ModelSpec,
        data: Dataset,
        policy: "BitPolicy",
        seed: int,
        eval_every: int = 0,
        full_loss_every: int = 0,
    ) -> list[TraceRecord]:
        """Run ``cluster.max_iters`` bulk-synchronous iterations.

        Returns:
            One ``TraceRecord`` per iteration

        Raises:
            DivergedRunError: If the global loss turns non-finite (carries the
                partial trace, ending with the diverged row)
            ProtocolError: If worker replicas stop being bit-identical
        """
        sim = ClusterSimulation(
            cluster, model, data, policy, seed,
            eval_every=eval_every, full_loss_every=full_loss_every,
        )
        return sim.run()


class ClusterSimulation:
    """State of one simulated run: worker replicas, clock and trace.

    Per iteration every worker computes its gradient and loss, the server
    forms the global loss and (every T iterations) consults the policy for K,
    workers push K-bit gradients, the server averages and re-quantises with
    the same K and broadcasts, and every worker applies SGD.
    """

    def __init__(
        self,
        cluster: ClusterConfig,
        model: ModelSpec,
        data: Dataset,
        policy: "BitPolicy",
        seed: int,
        eval_every: int = 0,
        full_loss_every: int = 0,
        init: Optional[ParamVector] = None,
    ):
        self.cluster = cluster
        self.model = model
        self.data = data
        self.policy = policy
        self.eval_every = eval_every
        self.full_loss_every = full_loss_every

        init = init if init is not None else TensorModelService.init_params(model, seed)
        model.check_params(init)
        worker_seeds = np.random.SeedSequence(seed).spawn(cluster.num_workers)
        self.workers = [
            SimWorker(
                index=p,
                params=init.copy(),
                shard=shard,
                batch_size=cluster.batch_size,
                rng=np.random.default_rng(worker_seeds[p]),
                shuffle=cluster.shuffle,
            )
            for p, shard in enumerate(ClusterService.shard(data.train, cluster.num_workers))
        ]
        self.mask = init.block_mask(cluster.quantized_layers)
        self.num_quantized = int(self.mask.sum())
        self.num_raw = len(init) - self.num_quantized

        self.trace: list[TraceRecord] = []
        self.clock = 0.0
        self.last_consult_clock = 0.0
        self.losses_since: list[float] = []
        self.bits: Optional[int] = None
        self.prev_rms: Optional[float] = None

    @property
    def params(self) -> ParamVector:
        return self.workers[0].params

    def run(self) -> list[TraceRecord]:
        cluster = self.cluster
        logger.info(
            "Training %d params on %d workers for %d iterations (T=%d, passthrough=%s)",
            len(self.params), cluster.num_workers, cluster.max_iters, cluster.T,
            cluster.passthrough,
        )
        for m in range(cluster.max_iters):
            self.step(m)
        logger.info(
            "Finished %d iterations: final loss %.5f, %.1f simulated ms, %d bytes",
            len(self.trace), self.trace[-1].loss, self.clock,
            sum(r.bytes for r in self.trace),
        )
        return self.trace

    def _bits_in_force(self) -> int:
        if self.cluster.passthrough:
            return PASSTHROUGH_BITS
        return self.bits if self.bits is not None else self.policy.initial_bits

    def _diverged(self, m: int, global_loss: float, grads_finite: bool):
        """Record the diverged row and abort.

        The row keeps the global loss when only the gradients went
        non-finite; ``grad_rms`` is nan in that case.
        """
        num_workers = self.cluster.num_workers
        loss_finite = math.isfinite(global_loss)
        self.clock += ClusterService.advance_clock(
            ClockEvents(
                push_bytes=(),
                broadcast_bytes=None,
                control_up=(LOSS_MESSAGE_BYTES,) * num_workers,
            ),
            self.cluster,
        )
        self.trace.append(
            TraceRecord(
                iter=m,
                sim_time_ms=self.clock,
                loss=global_loss if loss_finite else float("nan"),
                bits=self._bits_in_force(),
                bytes=num_workers * LOSS_MESSAGE_BYTES,
                grad_rms=None if grads_finite else float("nan"),
            )
        )
        logger.warning(
            "Run diverged at iteration %d (loss=%r, finite gradients=%s)", m, global_loss, grads_finite
        )
        raise DivergedRunError(m, self.trace)

    def _consult(self, m: int, grads: list[ParamVector]) -> PolicyDecision:
        rms = self.prev_rms
        if rms is None:
            rms = float(np.mean([TensorModelService.rms(g.values) for g in grads]))
        decision = self.policy.consult(
            PolicyContext(
                iteration=m,
                losses=tuple(self.losses_since),
                cost_ms=self.clock - self.last_consult_clock,
                grad_rms=rms,
            )
        )
        QuantCodecService.check_bits(decision.bits)
        self.losses_since = []
        self.last_consult_clock = self.clock
        return decision

    def _exchange(self, grads: list[ParamVector]) -> ParamVector:
        """Worker push, server average and re-quantise, broadcast decode."""
        if self.cluster.passthrough:
            return ClusterService.aggregate_gradients(grads)
        received = [
            g.with_values(ClusterService._encode_roundtrip(g.values, self.mask, self.bits))
            for g in grads
        ]
        averaged = ClusterService.aggregate_gradients(received)
        return averaged.with_values(
            ClusterService._encode_roundtrip(averaged.values, self.mask, self.bits)
        )

    def step(self, m: int) -> TraceRecord:
        cluster = self.cluster
        num_workers = cluster.num_workers

        results = [worker.compute(self.model) for worker in self.workers]
        grads = [grad for grad, _ in results]
        global_loss = ClusterService.aggregate_losses([loss for _, loss in results], num_workers)
        grads_finite = all(g.is_finite() for g in grads)
        if not math.isfinite(global_loss) or not grads_finite:
            self._diverged(m, global_loss, grads_finite)

        self.losses_since.append(global_loss)
        decision: Optional[PolicyDecision] = None
        if cluster.passthrough:
            self.bits = PASSTHROUGH_BITS
            if m % cluster.T == 0:
                self.losses_since = []
        elif m % cluster.T == 0:
            decision = self._consult(m, grads)
            self.bits = decision.bits

        global_grad = self._exchange(grads)
        for worker in self.workers:
            worker.params = TensorModelService.sgd_step(worker.params, global_grad, cluster.lr)
        reference = self.workers[0].params.values
        if any(not np.array_equal(w.params.values, reference) for w in self.workers[1:]):
            raise ProtocolError(f"worker replicas diverged at iteration {m}")

        message = ClusterService.message_bytes(
            self.num_quantized, self.num_raw, self.bits, cluster.passthrough
        )
        extra_ms = decision.overhead_ms if decision else 0.0
        events = ClockEvents(
            push_bytes=(message,) * num_workers,
            broadcast_bytes=message,
            control_up=(LOSS_MESSAGE_BYTES,) * num_workers,
            control_down=BITS_MESSAGE_BYTES,
            codec_elems=0 if cluster.passthrough else (num_workers + 3) * self.num_quantized,
            extra_ms=extra_ms,
        )
        self.clock += ClusterService.advance_clock(events, cluster)
        self.prev_rms = TensorModelService.rms(global_grad.values)

        last = m == cluster.max_iters - 1
        accuracy = None
        if self.eval_every and ((m + 1) % self.eval_every == 0 or last):
            accuracy = TensorModelService.evaluate_accuracy(self.params, self.model, self.data.test)
            logger.debug("Iteration %d: test accuracy %.4f", m, accuracy)
        full_loss = None
        if self.full_loss_every and ((m + 1) % self.full_loss_every == 0 or last):
            full_loss = TensorModelService.compute_loss(self.params, self.model, self.data.train)

        record = TraceRecord(
            iter=m,
            sim_time_ms=self.clock,
            loss=global_loss,
            bits=self.bits,
            bytes=ClusterService.iteration_bytes(message, num_workers),
            mdp_t=decision.mdp_t if decision else None,
            action=decision.action if decision else None,
            reward=decision.reward if decision else None,
            overhead_ms=ClusterService.codec_ms(events, cluster) + extra_ms,
            grad_rms=self.prev_rms,
            full_loss=full_loss,
            accuracy=accuracy,
        )
        self.trace.append(record)
        return record
