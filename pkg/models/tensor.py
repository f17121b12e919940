from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .base import BaseModel, ConfigurationError

Shape = tuple[int, int]


@dataclass(eq=False)
class ParamVector(BaseModel):
    """Flat float32 parameter (or gradient) vector with its layer shapes."""

    values: np.ndarray
    shapes: tuple[Shape, ...]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        self.shapes = tuple((int(r), int(c)) for r, c in self.shapes)
        super().__post_init__()

    def validate(self):
        expected = sum(r * c for r, c in self.shapes)
        if expected != self.values.size:
            raise ConfigurationError(
                f"shapes describe {expected} elements but values has {self.values.size}"
            )
        return True

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def offsets(self) -> list[int]:
        out = [0]
        for r, c in self.shapes:
            out.append(out[-1] + r * c)
        return out

    def blocks(self) -> list[np.ndarray]:
        """Reshaped views of ``values``, one per layer shape."""
        offs = self.offsets
        return [
            self.values[offs[i] : offs[i + 1]].reshape(shape)
            for i, shape in enumerate(self.shapes)
        ]

    def block_mask(self, indices: Sequence[int] | None) -> np.ndarray:
        """Boolean element mask selecting the blocks in ``indices`` (all if None)."""
        if indices is None:
            return np.ones(self.values.size, dtype=bool)
        mask = np.zeros(self.values.size, dtype=bool)
        offs = self.offsets
        for i in indices:
            if not 0 <= i < len(self.shapes):
                raise ConfigurationError(
                    f"block index {i} outside 0..{len(self.shapes) - 1}",
                    "cluster.quantized_layers",
                )
            mask[offs[i] : offs[i + 1]] = True
        return mask

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> "ParamVector":
        shapes = tuple(tuple(b.shape) for b in blocks)
        flat = np.concatenate([np.asarray(b, dtype=np.float32).reshape(-1) for b in blocks])
        return cls(values=flat, shapes=shapes)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=values, shapes=self.shapes)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def copy(self) -> "ParamVector":
        return ParamVector(values=self.values.copy(), shapes=self.shapes)


@dataclass(eq=False)
class Batch(BaseModel):
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(1, -1)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        super().__post_init__()

    def validate(self):
        if self.inputs.shape[0] != self.labels.size:
            raise ConfigurationError(
                f"{self.inputs.shape[0]} input rows but {self.labels.size} labels"
            )
        return True

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def take(self, indices: np.ndarray) -> "Batch":
        return Batch(inputs=self.inputs[indices], labels=self.labels[indices])


@dataclass(frozen=True)
class ModelSpec(BaseModel):
    """Widths of an MLP (input, hidden..., classes) plus the L2 coefficient.

    Hidden layers use ReLU, the output softmax.
    """

    layer_sizes: tuple[int, ...] = (16, 32, 16, 4)
    l2_coeff: float = 1e-4

    section = "model"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "l2_coeff", float(self.l2_coeff))
        super().__post_init__()

    def validate(self):
        if len(self.layer_sizes) < 2:
            self.fail("layer_sizes", "need at least input and output widths")
        if any(s < 1 for s in self.layer_sizes):
            self.fail("layer_sizes", "all widths must be positive")
        if not np.isfinite(self.l2_coeff) or self.l2_coeff < 0:
            self.fail("l2_coeff", "must be a non-negative real")
        return True

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def param_shapes(self) -> tuple[Shape, ...]:
        """Weight (fan_in, fan_out) then bias (1, fan_out) for every layer."""
        shapes: list[Shape] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append((1, fan_out))
        return tuple(shapes)

    def num_params(self) -> int:
        return sum(r * c for r, c in self.param_shapes())

    def check_params(self, params: ParamVector):
        if params.shapes != self.param_shapes():
            raise ConfigurationError(
                f"parameter shapes {params.shapes} do not match model {self.layer_sizes}"
            )


@dataclass(frozen=True)
class DataSpec(BaseModel):
    """Parameters of the synthetic Gaussian-cluster generator."""

    n: int = 1000
    dim: int = 16
    classes: int = 4
    seed: int | None = None
    separation: float = 3.0
    noise: float = 1.0

    section = "data"

    def validate(self):
        if self.classes < 2:
            self.fail("classes", "need at least 2 classes")
        if self.dim < 1:
            self.fail("dim", "must be >= 1")
        if self.n < self.classes:
            self.fail("n", f"must be >= classes ({self.classes})")
        if self.separation <= 0 or self.noise < 0:
            self.fail("separation", "separation must be > 0 and noise >= 0")
        return True


@dataclass(frozen=True)
class Dataset:
    train: Batch
    test: Batch = field(repr=False)
