from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class PolicyContext:
    """What the server knows when a bit policy is consulted at iteration ``iteration``.

    ``losses`` are the global losses since the previous consultation (just
    the current one at iteration 0); ``cost_ms`` is the simulated time since
    that consultation.
    """

    iteration: int
    losses: tuple[float, ...]
    cost_ms: float
    grad_rms: float


@dataclass(frozen=True)
class PolicyDecision:
    bits: int
    mdp_t: Optional[int] = None
    action: Optional[int] = None
    reward: Optional[float] = None
    overhead_ms: float = 0.0
