from dataclasses import dataclass
from typing import Any

import numpy as np

from .base import BaseModel, ConfigurationError
from .quantized import BIT_MAX, BIT_MIN


@dataclass(frozen=True)
class MdpHyper(BaseModel):
    """Controller hyperparameters.

    ``gamma_scale`` scales the reward, ``gamma_discount`` discounts the SARSA
    target; ``eta_sarsa`` is the Q-network step size, distinct from the SGD
    learning rate.
    """

    T: int = 5
    alpha: float = 0.01
    epsilon: float = 0.1
    eta_sarsa: float = 0.1
    gamma_scale: float = 300.0
    gamma_discount: float = 0.9
    bit_min: int = BIT_MIN
    bit_max: int = BIT_MAX
    hidden_units: int = 10
    num_actions: int = 2
    init_scale: float = 0.05
    step_cost_ms: float = 1.0

    section = "mdp"

    def validate(self):
        if self.T < 1:
            self.fail("T", "must be >= 1")
        if not 0 < self.alpha <= 1:
            self.fail("alpha", "must be in (0, 1]")
        if not 0 <= self.epsilon <= 1:
            self.fail("epsilon", "must be in [0, 1]")
        if self.eta_sarsa < 0:
            self.fail("eta_sarsa", "must be >= 0")
        if self.gamma_scale <= 0:
            self.fail("gamma_scale", "must be > 0")
        if not 0 <= self.gamma_discount <= 1:
            self.fail("gamma_discount", "must be in [0, 1]")
        if not BIT_MIN <= self.bit_min <= self.bit_max <= BIT_MAX:
            self.fail("bit_min", f"bit range must satisfy {BIT_MIN} <= bit_min <= bit_max <= {BIT_MAX}")
        if self.hidden_units < 1:
            self.fail("hidden_units", "must be >= 1")
        if self.num_actions != 2:
            # a 7-way bit selector has no defined transition or reward
            self.fail("num_actions", "only the keep/increase action pair is supported")
        if self.init_scale < 0 or self.step_cost_ms < 0:
            self.fail("init_scale", "init_scale and step_cost_ms must be >= 0")
        return True


@dataclass(frozen=True)
class MdpState(BaseModel):
    """Bits ``n`` plus the window of T smoothed losses.

    ``loss_scale`` is the first observed global loss; Q-network inputs are
    the smoothed losses divided by it.
    """

    n: int
    smoothed: tuple[float, ...]
    loss_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "smoothed", tuple(float(x) for x in self.smoothed))
        super().__post_init__()

    def validate(self):
        if not BIT_MIN <= self.n <= BIT_MAX:
            raise ConfigurationError(f"n={self.n} outside [{BIT_MIN}, {BIT_MAX}]")
        if not self.smoothed or not np.all(np.isfinite(self.smoothed)):
            raise ConfigurationError("smoothed losses must be non-empty and finite")
        if not np.isfinite(self.loss_scale) or self.loss_scale <= 0:
            raise ConfigurationError("loss_scale must be a positive real")
        return True

    @property
    def T(self) -> int:
        return len(self.smoothed)

    def features(self) -> np.ndarray:
        return np.asarray(self.smoothed, dtype=np.float64) / self.loss_scale


@dataclass(eq=False)
class QNetParams:
    """Weights of the Q network: T inputs -> ReLU hidden -> one output per action."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1)
        t, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape[0] != h or self.b2.shape != (self.w2.shape[1],):
            raise ConfigurationError(
                f"inconsistent Q-network shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )

    @property
    def input_width(self) -> int:
        return int(self.w1.shape[0])

    @property
    def num_actions(self) -> int:
        return int(self.w2.shape[1])

    @classmethod
    def zeros(cls, inputs: int, hidden: int = 10, actions: int = 2) -> "QNetParams":
        return cls(
            w1=np.zeros((inputs, hidden)),
            b1=np.zeros(hidden),
            w2=np.zeros((hidden, actions)),
            b2=np.zeros(actions),
        )

    @classmethod
    def uniform(
        cls, rng: np.random.Generator, inputs: int, hidden: int = 10, actions: int = 2, scale: float = 0.05
    ) -> "QNetParams":
        return cls(
            w1=rng.uniform(-scale, scale, (inputs, hidden)),
            b1=rng.uniform(-scale, scale, hidden),
            w2=rng.uniform(-scale, scale, (hidden, actions)),
            b2=rng.uniform(-scale, scale, actions),
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def from_vector(self, vec: np.ndarray) -> "QNetParams":
        vec = np.asarray(vec, dtype=np.float64)
        sizes = [self.w1.size, self.b1.size, self.w2.size, self.b2.size]
        if vec.size != sum(sizes):
            raise ConfigurationError(f"expected {sum(sizes)} Q-network weights, got {vec.size}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return QNetParams(
            w1=parts[0].reshape(self.w1.shape),
            b1=parts[1],
            w2=parts[2].reshape(self.w2.shape),
            b2=parts[3],
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_vector())))

    def to_dict(self) -> dict[str, Any]:
        return {
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "QNetParams":
        return cls(w1=data["w1"], b1=data["b1"], w2=data["w2"], b2=data["b2"])

    def __eq__(self, other):
        if not isinstance(other, QNetParams):
            return NotImplemented
        return np.array_equal(self.as_vector(), other.as_vector()) and self.w1.shape == other.w1.shape
