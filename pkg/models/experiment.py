from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .base import BaseModel
from .cluster import ClusterConfig
from .mdp import MdpHyper
from .quantized import BIT_MAX, BIT_MIN
from .tensor import DataSpec, ModelSpec


class PolicyKind(Enum):
    FIXED = "fixed"
    ADAPTIVE = "adaptive"
    MQGRAD = "mqgrad"


@dataclass(frozen=True)
class PolicySpec(BaseModel):
    """Tagged bit-policy choice; only the fields of ``kind`` are used."""

    kind: PolicyKind = PolicyKind.MQGRAD
    bits: int = 8
    thresholds: tuple[float, ...] = ()
    calibration_iters: int = 200

    section = "policy"

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        super().__post_init__()

    def validate(self):
        if not BIT_MIN <= self.bits <= BIT_MAX:
            self.fail("bits", f"{self.bits} violates the bit range [{BIT_MIN}, {BIT_MAX}]")
        if self.thresholds:
            if len(self.thresholds) != BIT_MAX - BIT_MIN:
                self.fail("thresholds", f"need exactly {BIT_MAX - BIT_MIN} cut points")
            if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
                self.fail("thresholds", "cut points must be strictly ascending")
        if self.calibration_iters < 1:
            self.fail("calibration_iters", "must be >= 1")
        return True

    @property
    def label(self) -> str:
        if self.kind is PolicyKind.FIXED:
            return f"Fix ({self.bits}-bit)"
        if self.kind is PolicyKind.ADAPTIVE:
            return "Adaptive"
        return "MQGrad"


@dataclass(frozen=True)
class ExperimentConfig(BaseModel):
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    mdp: MdpHyper = field(default_factory=MdpHyper)
    seed: int = 0
    output_dir: str = "runs/default"
    eval_every: int = 100
    full_loss_every: int = 0
    name: Optional[str] = None

    section = "experiment"

    def __post_init__(self):
        if self.data.seed is None:
            object.__setattr__(self, "data", replace(self.data, seed=self.seed))
        super().__post_init__()

    def validate(self):
        if self.mdp.T != self.cluster.T:
            self.fail("T", f"mdp.T={self.mdp.T} differs from cluster.T={self.cluster.T}")
        if self.policy.kind is PolicyKind.MQGRAD and self.mdp.T < 2:
            self.mdp.fail("T", "the loss-slope reward needs T >= 2")
        if self.model.input_dim != self.data.dim:
            self.fail("model", f"input width {self.model.input_dim} != data.dim {self.data.dim}")
        if self.model.num_classes != self.data.classes:
            self.fail("model", f"output width {self.model.num_classes} != data.classes {self.data.classes}")
        if self.eval_every < 0 or self.full_loss_every < 0:
            self.fail("eval_every", "probe intervals must be >= 0")
        return True

    @property
    def label(self) -> str:
        return self.name or self.policy.label
