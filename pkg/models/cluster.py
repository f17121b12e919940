import math
from dataclasses import dataclass, fields
from typing import Optional

from .base import BaseModel


@dataclass(frozen=True)
class ClusterConfig(BaseModel):
    """Simulated parameter-server cluster and its cost model.

    ``bandwidth`` is bytes/second per link; times are in milliseconds.
    ``T`` is the bit-policy cadence in iterations.
    """

    num_workers: int = 8
    bandwidth: float = 10_000_000.0
    latency_ms: float = 0.01
    compute_ms_per_iter: float = 0.25
    quantize_ms_per_kelem: float = 0.005
    max_iters: int = 1000
    T: int = 5
    batch_size: int = 32
    lr: float = 0.2
    serial_ingress: bool = True
    shuffle: bool = True
    passthrough: bool = False
    quantized_layers: Optional[tuple[int, ...]] = None

    section = "cluster"

    def __post_init__(self):
        if self.quantized_layers is not None:
            object.__setattr__(
                self, "quantized_layers", tuple(int(i) for i in self.quantized_layers)
            )
        super().__post_init__()

    def validate(self):
        if self.num_workers < 1:
            self.fail("num_workers", "must be >= 1")
        if not self.bandwidth > 0:
            self.fail("bandwidth", "must be > 0")
        if self.T < 1:
            self.fail("T", "must be >= 1")
        if self.max_iters < 1:
            self.fail("max_iters", "must be >= 1")
        if self.batch_size < 1:
            self.fail("batch_size", "must be >= 1")
        if not self.lr > 0:
            self.fail("lr", "must be > 0")
        for name in ("latency_ms", "compute_ms_per_iter", "quantize_ms_per_kelem"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                self.fail(name, "must be a finite non-negative number")
        if self.quantized_layers is not None and len(set(self.quantized_layers)) != len(
            self.quantized_layers
        ):
            self.fail("quantized_layers", "indices must be unique")
        return True


@dataclass(frozen=True)
class ClockEvents:
    """Messages and work of one iteration, as seen by the cost model."""

    push_bytes: tuple[int, ...]
    broadcast_bytes: int
    control_up: tuple[int, ...] = ()
    control_down: Optional[int] = None
    codec_elems: int = 0
    extra_ms: float = 0.0


# The first eight columns are the mandated trace format; the rest extend it.
TRACE_COLUMNS = (
    "iter",
    "sim_time_ms",
    "loss",
    "bits",
    "bytes",
    "mdp_t",
    "action",
    "reward",
    "overhead_ms",
    "grad_rms",
    "full_loss",
    "accuracy",
)


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    sim_time_ms: float
    loss: float
    bits: int
    bytes: int
    mdp_t: Optional[int] = None
    action: Optional[int] = None
    reward: Optional[float] = None
    overhead_ms: float = 0.0
    grad_rms: Optional[float] = None
    full_loss: Optional[float] = None
    accuracy: Optional[float] = None

    @property
    def diverged(self) -> bool:
        """Non-finite loss, or a finite loss with non-finite gradients (nan ``grad_rms``)."""
        if not math.isfinite(self.loss):
            return True
        return self.grad_rms is not None and not math.isfinite(self.grad_rms)

    def to_row(self) -> list[str]:
        return [_format(getattr(self, name)) for name in TRACE_COLUMNS]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "TraceRecord":
        kwargs = {}
        for f in fields(cls):
            raw = row.get(f.name, "")
            if raw == "":
                kwargs[f.name] = None if f.default is None else f.default
            elif f.name in ("iter", "bits", "bytes", "mdp_t", "action"):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        return cls(**kwargs)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
