"""Small feed-forward reference network used to produce distillation targets.

The network reuses the CRNN layer notation but runs a single ReLU forward
pass with plain reverse-mode gradients. Exported logits for a tapped layer
are its global-average-pooled output (the output itself for linear layers).
"""

import numpy as np

from src.core.tensor import (
    conv2d,
    conv2d_kernel_grad,
    conv2d_transpose,
    kaiming_uniform,
    maxpool,
    relu,
    relu_mask,
    unpool,
)
from src.helpers.constants import OUTPUT_LOGITS_KEY
from src.helpers.logger import Logger
from src.models.datasets import Dataset
from src.models.gradients import Estimator, GradientEstimate
from src.models.network import FeedForwardSpec, LayerKind
from src.models.runs import TeacherLogits
from src.models.state import WeightSet
from src.models.tensors import PoolIndexCache, Tensor
from src.models.training import TrainConfig
from src.repositories.datasets import iterate_batches
from src.services.losses import kd_view, output_loss
from src.services.optimizer import SGD

logger = Logger(__name__)


class FeedForwardNet:
    def __init__(self, spec: FeedForwardSpec):
        self.spec = spec
        self.network = spec.as_network()
        self.layers = spec.layers

    def init_weights(self, rng: np.random.Generator, dtype: np.dtype) -> WeightSet:
        weights, biases = [], []
        for index, layer in enumerate(self.layers):
            weights.append(
                kaiming_uniform(self.network.weight_shape(index), self.network.fan_in(index), rng, 1.0, dtype)
            )
            biases.append(np.zeros(layer.out, dtype=dtype))
        return WeightSet(weights=weights, biases=biases)

    def forward(
        self, x: Tensor, weights: WeightSet
    ) -> tuple[list[Tensor], list[Tensor], list[PoolIndexCache | None]]:
        """Layer inputs, layer outputs and pooling caches; the last output is the logits."""
        inputs, outputs, caches = [], [], []
        a = x
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            inputs.append(a)
            cache = None
            if layer.kind == LayerKind.CONV:
                z = conv2d(a, weights.weights[index], layer.stride, layer.padding)
                z = z + weights.biases[index][None, :, None, None]
                if layer.pool:
                    z, cache = maxpool(z, layer.pool_window)
            else:
                z = a.reshape(a.shape[0], -1) @ weights.weights[index].T + weights.biases[index]
            a = z if index == last else relu(z)
            outputs.append(a)
            caches.append(cache)
        return inputs, outputs, caches

    def gradients(self, x: Tensor, labels: np.ndarray, weights: WeightSet) -> tuple[float, GradientEstimate, Tensor]:
        inputs, outputs, caches = self.forward(x, weights)
        loss, grad = output_loss(outputs[-1], labels, "mean")
        tensors: dict[str, np.ndarray] = {}
        last = len(self.layers) - 1
        for index in range(last, -1, -1):
            layer = self.layers[index]
            if index != last:
                grad = grad * relu_mask(outputs[index])
            a = inputs[index]
            if layer.kind == LayerKind.CONV:
                signal = unpool(grad, caches[index]) if layer.pool else grad
                tensors[f"layers.{index}.weight"] = conv2d_kernel_grad(
                    a, signal, layer.kernel, layer.stride, layer.padding
                )
                tensors[f"layers.{index}.bias"] = signal.sum(axis=(0, 2, 3))
                if index:
                    grad = conv2d_transpose(
                        signal, weights.weights[index], layer.stride, layer.padding, output_size=a.shape[2:]
                    )
            else:
                flat = a.reshape(a.shape[0], -1)
                tensors[f"layers.{index}.weight"] = grad.T @ flat
                tensors[f"layers.{index}.bias"] = grad.sum(axis=0)
                if index:
                    grad = (grad @ weights.weights[index]).reshape(a.shape)
        estimate = GradientEstimate(tensors=tensors, estimator=Estimator.BPTT, metadata={"steps": 1})
        return loss, estimate, outputs[-1]

    def logits(self, dataset: Dataset, weights: WeightSet, batch_size: int = 256) -> TeacherLogits:
        rows: dict[int, list[np.ndarray]] = {key: [] for key in [*sorted(self.spec.taps), OUTPUT_LOGITS_KEY]}
        for _, images, _ in iterate_batches(dataset, batch_size, shuffle=False):
            _, outputs, _ = self.forward(images.astype(weights.dtype), weights)
            for student, teacher in self.spec.taps.items():
                rows[student].append(kd_view(outputs[teacher]))
            rows[OUTPUT_LOGITS_KEY].append(outputs[-1])
        return TeacherLogits(
            dataset_digest=dataset.digest(),
            layers={key: np.concatenate(blocks).astype(np.float32) for key, blocks in rows.items()},
        )


def train_teacher(
    dataset: Dataset, spec: FeedForwardSpec, config: TrainConfig
) -> tuple[TeacherLogits, WeightSet, float]:
    """Train the reference network with SGD and export logits for every sample of `dataset`.

    Returns the logits, the trained weights and the final train accuracy.
    """
    net = FeedForwardNet(spec)
    dtype = np.dtype("float64" if config.precision == "f64" else "float32")
    weights_rng, order_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    weights = net.init_weights(weights_rng, dtype)
    optimizer = SGD(
        rates=config.layer_learning_rates(),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        scheduler=config.lr_scheduler,
        lr_min=config.lr_min,
        total_epochs=config.epochs,
    )

    best_loss = float("inf")
    accuracy = 0.0
    for epoch in range(config.epochs):
        loss_sum = correct = 0.0
        for _, images, labels in iterate_batches(dataset, config.batch_size, order_rng):
            loss, estimate, logits = net.gradients(images.astype(dtype), labels, weights)
            weights = optimizer.step(weights, estimate, epoch)
            loss_sum += loss * len(labels)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        epoch_loss = loss_sum / len(dataset)
        accuracy = correct / len(dataset)
        logger.info("teacher epoch %d/%d loss=%.4f acc=%.4f", epoch + 1, config.epochs, epoch_loss, accuracy)
        if epoch_loss >= best_loss:
            logger.warning("Teacher loss did not improve in epoch %d (%.4f >= %.4f)", epoch + 1, epoch_loss, best_loss)
        best_loss = min(best_loss, epoch_loss)

    return net.logits(dataset, weights), weights, accuracy
