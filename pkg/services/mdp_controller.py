"""MDP controller - learns when to raise the quantisation bits.

The state is the current bits plus a window of T smoothed global losses;
actions are keep (0) or increase by one (1). Rewards come from the slope of
the smoothed losses per unit of simulated time, and a small ReLU Q network
is trained on-policy with SARSA.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from models import ConfigurationError, MdpHyper, MdpState, QNetParams

logger = logging.getLogger(__name__)

KEEP = 0
INCREASE = 1


class MdpError(ArithmeticError):
    """Raised when Q activations or the TD error stop being finite."""


@dataclass(frozen=True)
class StepContext:
    """Inputs of one controller step besides the Q network.

    ``prev_state``/``prev_action`` are None at t = 0.
    """

    prev_state: Optional[MdpState]
    prev_action: Optional[int]
    new_raw_losses: tuple[float, ...]
    cost_ms: float
    prev_bits: Optional[int] = None


@dataclass(frozen=True)
class StepResult:
    bits: int
    state: MdpState
    action: int
    reward: Optional[float]
    params: QNetParams


class MdpController:
    """Controller operations as pure functions, plus a stateful owner.

    An instance keeps the state, last action, Q network and RNG between
    consultations; it is owned by the server role and not thread-safe.
    """

    def __init__(self, hyper: MdpHyper, seed: int, params: Optional[QNetParams] = None):
        self.hyper = hyper
        self.rng = np.random.default_rng(seed)
        self.params = params or QNetParams.uniform(
            self.rng, hyper.T, hyper.hidden_units, hyper.num_actions, hyper.init_scale
        )
        self.t = 0
        self.state: Optional[MdpState] = None
        self.action: Optional[int] = None
        self.bits: Optional[int] = None

    def step(self, raw_losses: Sequence[float], cost_ms: float) -> StepResult:
        """Advance one MDP time step and return the bits for the next T iterations."""
        ctx = StepContext(
            prev_state=self.state,
            prev_action=self.action,
            new_raw_losses=tuple(float(x) for x in raw_losses),
            cost_ms=cost_ms,
            prev_bits=self.bits,
        )
        result = MdpController.mdp_step(self.t, ctx, self.params, self.hyper, self.rng)
        logger.debug(
            "MDP t=%d n=%d action=%d reward=%s bits=%d",
            self.t, result.state.n, result.action, result.reward, result.bits,
        )
        self.params = result.params
        self.state = result.state
        self.action = result.action
        self.bits = result.bits
        self.t += 1
        return result

    # Loss window and reward

    @staticmethod
    def smooth_losses(raw: Sequence[float], alpha: float, prev_last: float) -> tuple[float, ...]:
        """Exponential moving average seeded with the previous window's last value."""
        out = []
        previous = float(prev_last)
        for value in raw:
            previous = alpha * float(value) + (1.0 - alpha) * previous
            out.append(previous)
        return tuple(out)

    @staticmethod
    def fit_slope(smoothed: Sequence[float]) -> tuple[float, float]:
        """Least-squares line through (i, smoothed[i-1]) for i = 1..T.

        Returns:
            Tuple of (slope beta, intercept b)
        """
        y = np.asarray(smoothed, dtype=np.float64)
        if y.size < 2:
            raise ConfigurationError("slope needs a window of at least 2 losses", "mdp.T")
        i = np.arange(1, y.size + 1, dtype=np.float64)
        di = i - i.mean()
        beta = float(np.dot(di, y - y.mean()) / np.dot(di, di))
        return beta, float(y.mean() - beta * i.mean())

    @staticmethod
    def reward(beta: float, cost_ms: float, gamma_scale: float) -> float:
        """-beta * gamma_scale / cost_ms: positive while the loss decreases."""
        if not cost_ms > 0:
            raise ConfigurationError(f"cost_ms must be positive, got {cost_ms}")
        return -beta * gamma_scale / cost_ms

    # Q network

    @staticmethod
    def _hidden(v: QNetParams, state: MdpState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = state.features()
        if x.size != v.input_width:
            raise ConfigurationError(
                f"state window has {x.size} losses, Q network expects {v.input_width}"
            )
        pre = x @ v.w1 + v.b1
        return x, pre, np.maximum(pre, 0.0)

    @staticmethod
    def q_forward(v: QNetParams, state: MdpState) -> np.ndarray:
        """Q value of every action at ``state``.

        Raises:
            MdpError: If an activation is not finite
        """
        _, _, hidden = MdpController._hidden(v, state)
        q = hidden @ v.w2 + v.b2
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(hidden)):
            raise MdpError("Q network produced a non-finite activation")
        return q

    @staticmethod
    def q_grad(v: QNetParams, state: MdpState, action: int) -> np.ndarray:
        """dQ(state, action)/dv, flattened in ``QNetParams.as_vector`` order."""
        x, pre, hidden = MdpController._hidden(v, state)
        d_w2 = np.zeros_like(v.w2)
        d_w2[:, action] = hidden
        d_b2 = np.zeros_like(v.b2)
        d_b2[action] = 1.0
        d_pre = v.w2[:, action] * (pre > 0)
        d_w1 = np.outer(x, d_pre)
        return np.concatenate([d_w1.ravel(), d_pre, d_w2.ravel(), d_b2])

    @staticmethod
    def greedy(qvals: Sequence[float]) -> int:
        """Keep unless increasing is strictly better."""
        return KEEP if qvals[KEEP] >= qvals[INCREASE] else INCREASE

    @staticmethod
    def select_action(qvals: Sequence[float], epsilon: float, rng: np.random.Generator) -> int:
        """Epsilon-greedy over the two actions: the other action with probability epsilon."""
        if not 0 <= epsilon <= 1:
            raise ConfigurationError("epsilon must be in [0, 1]", "mdp.epsilon")
        best = MdpController.greedy(qvals)
        return 1 - best if rng.random() < epsilon else best

    @staticmethod
    def transition(
        prev: MdpState,
        new_smoothed: Sequence[float],
        v: QNetParams,
        bit_max: int,
        floor: Optional[int] = None,
    ) -> MdpState:
        """Next state: bits grow by the greedy action at ``prev`` (capped at ``bit_max``).

        ``floor`` keeps n from dropping below bits already broadcast.
        """
        n = min(prev.n + MdpController.greedy(MdpController.q_forward(v, prev)), bit_max)
        if floor is not None:
            n = max(n, min(floor, bit_max))
        return MdpState(n=n, smoothed=tuple(new_smoothed), loss_scale=prev.loss_scale)

    @staticmethod
    def sarsa_update(
        v,
        s_prev: MdpState,
        a_prev: int,
        r: float,
        s_t: MdpState,
        a_t: int,
        eta: float,
        gamma_discount: float,
        q_fn: Callable = None,
        grad_fn: Callable = None,
    ):
        """v + eta * delta * dQ(s_prev, a_prev)/dv with delta = r + gamma Q(s_t, a_t) - Q(s_prev, a_prev).

        ``q_fn``/``grad_fn`` default to the ReLU network; any parameter object
        with ``as_vector``/``from_vector`` works with matching functions.

        Raises:
            MdpError: If the TD error is not finite
        """
        q_fn = q_fn or MdpController.q_forward
        grad_fn = grad_fn or MdpController.q_grad
        delta = r + gamma_discount * q_fn(v, s_t)[a_t] - q_fn(v, s_prev)[a_prev]
        if not math.isfinite(delta):
            raise MdpError(f"non-finite TD error {delta}")
        if delta == 0.0:
            return v
        updated = v.from_vector(v.as_vector() + eta * delta * grad_fn(v, s_prev, a_prev))
        if not np.all(np.isfinite(updated.as_vector())):
            raise MdpError("SARSA update produced non-finite Q-network weights")
        return updated

    @staticmethod
    def clamp_bits(bits: int, hyper: MdpHyper) -> int:
        return int(min(max(bits, hyper.bit_min), hyper.bit_max))

    @staticmethod
    def bootstrap_state(first_loss: float, hyper: MdpHyper) -> MdpState:
        """State at t = 0: n = bit_min, the window filled with the first loss."""
        scale = abs(first_loss) if first_loss and math.isfinite(first_loss) else 1.0
        return MdpState(n=hyper.bit_min, smoothed=(float(first_loss),) * hyper.T, loss_scale=scale)

    @staticmethod
    def mdp_step(
        t: int,
        ctx: StepContext,
        v: QNetParams,
        hyper: MdpHyper,
        rng: np.random.Generator,
    ) -> StepResult:
        """One controller step.

        At t = 0 the state is bootstrapped and a first action drawn with no
        update. Afterwards: transition to s_t, reward the previous pair from
        the slope of s_t's window and ``ctx.cost_ms``, choose a_t, apply the
        SARSA update, and emit K = n_t + a_t within the bit range.
        """
        if t == 0 or ctx.prev_state is None:
            state = MdpController.bootstrap_state(ctx.new_raw_losses[-1], hyper)
            action = MdpController.select_action(MdpController.q_forward(v, state), hyper.epsilon, rng)
            bits = MdpController.clamp_bits(state.n + action, hyper)
            return StepResult(bits=bits, state=state, action=action, reward=None, params=v)

        if len(ctx.new_raw_losses) != hyper.T:
            raise ConfigurationError(
                f"expected {hyper.T} losses since the last step, got {len(ctx.new_raw_losses)}"
            )
        smoothed = MdpController.smooth_losses(
            ctx.new_raw_losses, hyper.alpha, ctx.prev_state.smoothed[-1]
        )
        state = MdpController.transition(
            ctx.prev_state, smoothed, v, hyper.bit_max, floor=ctx.prev_bits
        )
        beta, _ = MdpController.fit_slope(state.smoothed)
        r = MdpController.reward(beta, ctx.cost_ms, hyper.gamma_scale)
        action = MdpController.select_action(MdpController.q_forward(v, state), hyper.epsilon, rng)
        v = MdpController.sarsa_update(
            v, ctx.prev_state, ctx.prev_action, r, state, action,
            hyper.eta_sarsa, hyper.gamma_discount,
        )
        bits = MdpController.clamp_bits(state.n + action, hyper)
        return StepResult(bits=bits, state=state, action=action, reward=r, params=v)
