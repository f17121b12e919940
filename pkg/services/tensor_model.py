"""Tensor model service - the MLP workload trained by the simulated cluster.

Forward pass, manual backpropagation of softmax cross-entropy with L2,
plain SGD, accuracy and the synthetic Gaussian-cluster dataset.
"""

import logging

import numpy as np

from models import Batch, ConfigurationError, Dataset, DataSpec, ModelSpec, ParamVector

logger = logging.getLogger(__name__)

# sub-streams of one seed; weights and data must not share draws
INIT_STREAM = 2
DATA_STREAM = 3


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


class TensorModelService:
    """Pure functions over ``ParamVector``; all model arithmetic in float32."""

    @staticmethod
    def init_params(spec: ModelSpec, seed: int) -> ParamVector:
        """He-normal weights and zero biases drawn from the init stream of ``seed``."""
        rng = stream_rng(seed, INIT_STREAM)
        blocks = []
        for rows, cols in spec.param_shapes():
            if rows == 1:
                blocks.append(np.zeros((rows, cols), dtype=np.float32))
            else:
                std = np.sqrt(2.0 / rows)
                blocks.append(rng.normal(0.0, std, (rows, cols)).astype(np.float32))
        return ParamVector.from_blocks(blocks)

    @staticmethod
    def _check(params: ParamVector, spec: ModelSpec, batch: Batch):
        spec.check_params(params)
        if len(batch) == 0:
            raise ConfigurationError("batch is empty")
        if batch.dim != spec.input_dim:
            raise ConfigurationError(
                f"batch has {batch.dim} features but model expects {spec.input_dim}"
            )
        if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
            raise ConfigurationError(f"labels must lie in [0, {spec.num_classes})")

    @staticmethod
    def _forward(params: ParamVector, inputs: np.ndarray):
        """Return per-layer activations (input first) and pre-activations."""
        blocks = params.blocks()
        activations = [inputs]
        pre_activations = []
        num_layers = len(blocks) // 2
        a = inputs
        for layer in range(num_layers):
            w, b = blocks[2 * layer], blocks[2 * layer + 1]
            z = a @ w + b
            pre_activations.append(z)
            if layer < num_layers - 1:
                a = np.maximum(z, np.float32(0.0))
                activations.append(a)
        return activations, pre_activations

    @staticmethod
    def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
        shifted = logits - logits.max(axis=1, keepdims=True)
        exps = np.exp(shifted)
        sums = exps.sum(axis=1, keepdims=True)
        probs = exps / sums
        rows = np.arange(labels.size)
        nll = np.log(sums[:, 0]) - shifted[rows, labels]
        return probs, nll

    @staticmethod
    def compute_loss(params: ParamVector, spec: ModelSpec, batch: Batch) -> float:
        """Mean cross-entropy over ``batch`` plus ``l2_coeff * ||w||^2``."""
        TensorModelService._check(params, spec, batch)
        _, pre = TensorModelService._forward(params, batch.inputs)
        _, nll = TensorModelService._softmax_ce(pre[-1], batch.labels)
        l2 = np.float32(spec.l2_coeff) * np.dot(params.values, params.values)
        return float(nll.mean(dtype=np.float32) + l2)

    @staticmethod
    def compute_grad_loss(
        params: ParamVector, spec: ModelSpec, batch: Batch
    ) -> tuple[ParamVector, float]:
        """Gradient and loss of one worker batch.

        Returns:
            Tuple of (gradient with the shapes of ``params``, loss)

        Raises:
            ConfigurationError: If params, spec and batch disagree on shapes
        """
        TensorModelService._check(params, spec, batch)
        blocks = params.blocks()
        activations, pre = TensorModelService._forward(params, batch.inputs)
        probs, nll = TensorModelService._softmax_ce(pre[-1], batch.labels)

        size = np.float32(len(batch))
        delta = probs.copy()
        delta[np.arange(len(batch)), batch.labels] -= np.float32(1.0)
        delta /= size

        grads: list[np.ndarray] = [None] * len(blocks)
        for layer in range(len(blocks) // 2 - 1, -1, -1):
            w = blocks[2 * layer]
            grads[2 * layer] = activations[layer].T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0, keepdims=True)
            if layer > 0:
                delta = (delta @ w.T) * (pre[layer - 1] > 0)

        grad = ParamVector.from_blocks(grads)
        coeff = np.float32(spec.l2_coeff)
        if coeff:
            grad = grad.with_values(grad.values + np.float32(2.0) * coeff * params.values)
        loss = float(nll.mean(dtype=np.float32) + coeff * np.dot(params.values, params.values))
        return grad, loss

    @staticmethod
    def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
        """``w - lr * g`` elementwise."""
        if len(params) != len(grad):
            raise ConfigurationError(
                f"parameter length {len(params)} != gradient length {len(grad)}"
            )
        if not lr > 0:
            raise ConfigurationError("learning rate must be positive")
        return params.with_values(params.values - np.float32(lr) * grad.values)

    @staticmethod
    def predict(params: ParamVector, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
        """Argmax class per row; ties resolve to the lowest class index."""
        _, pre = TensorModelService._forward(params, np.asarray(inputs, dtype=np.float32))
        return np.argmax(pre[-1], axis=1)

    @staticmethod
    def evaluate_accuracy(params: ParamVector, spec: ModelSpec, test: Batch) -> float:
        if len(test) == 0:
            raise ConfigurationError("cannot evaluate accuracy on an empty test set")
        TensorModelService._check(params, spec, test)
        predictions = TensorModelService.predict(params, spec, test.inputs)
        return float(np.count_nonzero(predictions == test.labels)) / len(test)

    @staticmethod
    def rms(values: np.ndarray) -> float:
        values = np.asarray(values, dtype=np.float64)
        return float(np.sqrt(np.mean(values * values))) if values.size else 0.0

    @staticmethod
    def gen_synthetic(
        seed: int,
        n: int,
        dim: int,
        classes: int,
        separation: float = 3.0,
        noise: float = 1.0,
    ) -> Dataset:
        """Gaussian class clusters split 80/20 into train and test.

        Args:
            seed: Generator seed; equal seeds give bitwise-identical data
            n: Total number of examples (>= classes)
            dim: Feature count
            classes: Number of clusters/labels (>= 2)
            separation: Scale of the cluster centres
            noise: Standard deviation around each centre

        Raises:
            ConfigurationError: If the arguments violate the generator's invariants
        """
        DataSpec(n=n, dim=dim, classes=classes, seed=seed, separation=separation, noise=noise)
        rng = stream_rng(seed, DATA_STREAM)
        centers = rng.normal(0.0, separation, (classes, dim))
        labels = rng.permutation(np.arange(n) % classes)
        inputs = centers[labels] + rng.normal(0.0, noise, (n, dim))
        n_train = (n * 4) // 5
        data = Dataset(
            train=Batch(inputs=inputs[:n_train], labels=labels[:n_train]),
            test=Batch(inputs=inputs[n_train:], labels=labels[n_train:]),
        )
        logger.debug(
            "Generated synthetic data seed=%d n=%d dim=%d classes=%d (train=%d test=%d)",
            seed, n, dim, classes, len(data.train), len(data.test),
        )
        return data

    @staticmethod
    def dataset_for(spec: DataSpec) -> Dataset:
        return TensorModelService.gen_synthetic(
            spec.seed, spec.n, spec.dim, spec.classes, spec.separation, spec.noise
        )
