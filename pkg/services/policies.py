"""Bit policies consulted by the server every T iterations."""

import logging
from abc import ABC, abstractmethod
from typing import Optional, Sequence

import numpy as np

from models import (
    BIT_MAX,
    BIT_MIN,
    ConfigurationError,
    MdpHyper,
    PolicyContext,
    PolicyDecision,
    PolicyKind,
    PolicySpec,
    QNetParams,
)
from services.mdp_controller import MdpController

logger = logging.getLogger(__name__)


class BitPolicy(ABC):
    """Chooses K in [bit_min, bit_max] from what the server observed."""

    label = "policy"
    bit_min = BIT_MIN
    bit_max = BIT_MAX

    @property
    def initial_bits(self) -> int:
        """Bits in force before the first consultation."""
        return self.bit_min

    @abstractmethod
    def consult(self, ctx: PolicyContext) -> PolicyDecision:
        """Return the bits for the next T iterations."""


class FixedPolicy(BitPolicy):
    def __init__(self, bits: int):
        if not BIT_MIN <= bits <= BIT_MAX:
            raise ConfigurationError(
                f"{bits} violates the bit range [{BIT_MIN}, {BIT_MAX}]", "policy.bits"
            )
        self.bits = int(bits)
        self.label = f"Fix ({self.bits}-bit)"

    @property
    def initial_bits(self) -> int:
        return self.bits

    def consult(self, ctx: PolicyContext) -> PolicyDecision:
        return PolicyDecision(bits=self.bits)


class AdaptiveNormPolicy(BitPolicy):
    """More bits for larger gradients: K = 2 + #(thresholds below the gradient RMS)."""

    label = "Adaptive"

    def __init__(self, thresholds: Sequence[float]):
        thresholds = tuple(float(x) for x in thresholds)
        if len(thresholds) != BIT_MAX - BIT_MIN:
            raise ConfigurationError(
                f"need exactly {BIT_MAX - BIT_MIN} cut points, got {len(thresholds)}",
                "policy.thresholds",
            )
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigurationError("cut points must be strictly ascending", "policy.thresholds")
        self.thresholds = np.asarray(thresholds, dtype=np.float64)

    def bits_for(self, rms: float) -> int:
        count = int(np.count_nonzero(self.thresholds < rms))
        return min(max(BIT_MIN + count, BIT_MIN), BIT_MAX)

    def consult(self, ctx: PolicyContext) -> PolicyDecision:
        return PolicyDecision(bits=self.bits_for(ctx.grad_rms))


class MQGradPolicy(BitPolicy):
    """Adapter from the policy interface to a stateful ``MdpController``."""

    label = "MQGrad"

    def __init__(self, hyper: MdpHyper, seed: int, params: Optional[QNetParams] = None):
        if hyper.T < 2:
            raise ConfigurationError("the loss-slope reward needs T >= 2", "mdp.T")
        self.hyper = hyper
        self.bit_min, self.bit_max = hyper.bit_min, hyper.bit_max
        self.controller = MdpController(hyper, seed, params)

    @property
    def params(self) -> QNetParams:
        return self.controller.params

    def consult(self, ctx: PolicyContext) -> PolicyDecision:
        t = self.controller.t
        result = self.controller.step(ctx.losses, ctx.cost_ms)
        return PolicyDecision(
            bits=result.bits,
            mdp_t=t,
            action=result.action,
            reward=result.reward,
            overhead_ms=self.hyper.step_cost_ms,
        )


class PolicyService:
    """Builds policies from config and calibrates the Adaptive baseline."""

    @staticmethod
    def fixed_policy(bits: int) -> FixedPolicy:
        return FixedPolicy(bits)

    @staticmethod
    def adaptive_norm_policy(thresholds: Sequence[float]) -> AdaptiveNormPolicy:
        return AdaptiveNormPolicy(thresholds)

    @staticmethod
    def mqgrad_policy(hyper: MdpHyper, seed: int) -> MQGradPolicy:
        return MQGradPolicy(hyper, seed)

    @staticmethod
    def from_spec(
        spec: PolicySpec,
        hyper: MdpHyper,
        seed: int,
        thresholds: Optional[Sequence[float]] = None,
    ) -> BitPolicy:
        """Policy described by ``spec``; ``thresholds`` supplies calibrated cut points."""
        if spec.kind is PolicyKind.FIXED:
            return FixedPolicy(spec.bits)
        if spec.kind is PolicyKind.ADAPTIVE:
            cuts = spec.thresholds or thresholds
            if not cuts:
                raise ConfigurationError(
                    "adaptive policy needs thresholds or a calibration run", "policy.thresholds"
                )
            return AdaptiveNormPolicy(cuts)
        return MQGradPolicy(hyper, seed)

    @staticmethod
    def calibrate_thresholds(rms_values: Sequence[float]) -> tuple[float, ...]:
        """Six ascending cut points at the 1/7 .. 6/7 quantiles of observed gradient RMS.

        Equal quantiles are pushed apart by one float32 step.
        """
        values = np.asarray([x for x in rms_values if x is not None], dtype=np.float64)
        values = values[np.isfinite(values)]
        if values.size == 0:
            raise ConfigurationError("no gradient RMS values to calibrate from")
        count = BIT_MAX - BIT_MIN
        quantiles = np.quantile(values, np.arange(1, count + 1) / (count + 1))
        cuts = [float(np.float32(quantiles[0]))]
        for q in quantiles[1:]:
            q = float(np.float32(q))
            if q <= cuts[-1]:
                q = float(np.nextafter(np.float32(cuts[-1]), np.float32(np.inf)))
            cuts.append(q)
        logger.info("Calibrated adaptive thresholds: %s", ", ".join(f"{c:.6g}" for c in cuts))
        return tuple(cuts)
