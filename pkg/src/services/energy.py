"""Scalar primitive function and discrete-time neuron dynamics.

For layer i with input a (x for layer 0, the state of layer i-1 otherwise)
the primitive collects

    conv:   <xi_i, P(w_i * a) + b_i>
    linear: <xi_i, w_i · flatten(a) + b_i>

summed over layers and over the batch. The dynamics are
xi^{t+1} = sigma(dPhi_Aug/dxi) with sigma the layer activation. Max-pool
selections are taken from the current state at every step and the same
selection feeds that step's top-down unpooling.
"""

import numpy as np

from src.core.tensor import (
    ACTIVATIONS,
    conv2d,
    conv2d_kernel_grad,
    conv2d_transpose,
    kaiming_uniform,
    maxpool,
    pool_gather,
    unpool,
)
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError, DivergenceError
from src.models.network import LayerKind, NetworkSpec
from src.models.state import NeuronState, PhaseResult, WeightSet
from src.models.tensors import PoolIndexCache, Tensor
from src.models.training import AugMode, TargetBundle
from src.services.losses import loss_terms

logger = Logger(__name__)


class CRNN:
    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.layers = spec.layers
        self.output = spec.output_index
        shapes = spec.shapes()
        self._state_shapes = [after for _, after in shapes]
        self._conv_shapes = [before for before, _ in shapes]
        self._activations = [ACTIVATIONS[layer.activation.value] for layer in spec.layers]

    # initialisation

    def init_state(self, batch: int, mode: str, rng: np.random.Generator | None, dtype: np.dtype) -> NeuronState:
        layers: list[np.ndarray] = []
        for shape in self._state_shapes:
            if mode == "zeros":
                layers.append(np.zeros((batch, *shape), dtype=dtype))
            elif mode == "uniform":
                if rng is None:
                    raise ConfigurationError("uniform state initialisation needs a random generator")
                layers.append(rng.uniform(0.0, 1.0, size=(batch, *shape)).astype(dtype))
            else:
                raise ConfigurationError(f"unknown state initialisation '{mode}'")
        return NeuronState(layers=layers)

    def init_weights(
        self,
        rng: np.random.Generator,
        dtype: np.dtype,
        scale: float = 1.0,
        mode: AugMode = AugMode.NONE,
        aux_rng: np.random.Generator | None = None,
        teacher_dims: dict[int, int] | None = None,
        mapping_init: str = "kaiming",
        bias: float | None = None,
    ) -> WeightSet:
        """Kaiming-uniform weights scaled by `scale`; with `bias` set every bias starts at that constant."""
        weights: list[np.ndarray] = []
        biases: list[np.ndarray | None] = []
        for index, layer in enumerate(self.layers):
            fan_in = self.spec.fan_in(index)
            weights.append(kaiming_uniform(self.spec.weight_shape(index), fan_in, rng, scale, dtype))
            if self.spec.use_bias:
                bound = scale / np.sqrt(fan_in)
                drawn = rng.uniform(-bound, bound, size=(layer.out,)).astype(dtype)
                # drawn either way so the weights do not depend on `bias`
                biases.append(drawn if bias is None else np.full_like(drawn, bias))
            else:
                biases.append(None)

        aux_rng = aux_rng or rng
        projections: dict[int, np.ndarray] = {}
        mappings: dict[int, np.ndarray] = {}
        if mode == AugMode.LE:
            for index in self.spec.upsilon:
                size = self.spec.flat_size(index)
                projections[index] = kaiming_uniform((self.spec.num_classes, size), size, aux_rng, 1.0, dtype)
        elif mode == AugMode.KDW:
            teacher_dims = teacher_dims or {}
            for index in self.spec.upsilon:
                size = self.spec.kd_size(index)
                out = teacher_dims.get(index, size)
                if mapping_init == "identity":
                    mappings[index] = np.eye(out, size, dtype=dtype)
                else:
                    mappings[index] = kaiming_uniform((out, size), size, aux_rng, 1.0, dtype)
        return WeightSet(weights=weights, biases=biases, projections=projections, mappings=mappings)

    # primitive pieces

    def _input_of(self, index: int, x: Tensor, state: NeuronState) -> Tensor:
        return x if index == 0 else state.layers[index - 1]

    def bottom_up(
        self, index: int, prev: Tensor, weights: WeightSet, cache: PoolIndexCache | None = None
    ) -> tuple[Tensor, PoolIndexCache | None]:
        """Linear drive of layer `index` from its input, without bias.

        With `cache` given, pooling reuses that selection instead of taking
        the maximum of the new drive.
        """
        layer = self.layers[index]
        weight = weights.weights[index]
        if layer.kind == LayerKind.CONV:
            z = conv2d(prev, weight, layer.stride, layer.padding)
            if layer.pool:
                if cache is None:
                    z, cache = maxpool(z, layer.pool_window)
                else:
                    z = pool_gather(z, cache)
            return z, cache
        flat = prev.reshape(prev.shape[0], -1)
        return flat @ weight.T, None

    def top_down(
        self, index: int, upper: Tensor, weights: WeightSet, caches: dict[int, PoolIndexCache]
    ) -> Tensor:
        """Feedback into layer `index` from the state (or adjoint) of layer index+1."""
        above = index + 1
        layer = self.layers[above]
        weight = weights.weights[above]
        target_shape = (upper.shape[0], *self._state_shapes[index])
        if layer.kind == LayerKind.CONV:
            signal = upper
            if layer.pool:
                signal = unpool(upper, caches[above])
            return conv2d_transpose(signal, weight, layer.stride, layer.padding, output_size=target_shape[2:])
        return (upper @ weight).reshape(target_shape)

    def _add_bias(self, index: int, z: Tensor, weights: WeightSet) -> Tensor:
        bias = weights.biases[index]
        if bias is None:
            return z
        if z.ndim == 4:
            return z + bias[None, :, None, None]
        return z + bias[None, :]

    def drives(self, x: Tensor, state: NeuronState, weights: WeightSet) -> tuple[list[Tensor], dict[int, PoolIndexCache]]:
        """Bottom-up drives (bias included) and the pooling caches of `state`."""
        drives: list[Tensor] = []
        caches: dict[int, PoolIndexCache] = {}
        for index in range(len(self.layers)):
            z, cache = self.bottom_up(index, self._input_of(index, x, state), weights)
            if cache is not None:
                caches[index] = cache
            drives.append(self._add_bias(index, z, weights))
        return drives, caches

    def primitive(self, x: Tensor, state: NeuronState, weights: WeightSet, per_sample: bool = False) -> float | Tensor:
        drives, _ = self.drives(x, state, weights)
        return self._phi_from_drives(state, drives, per_sample)

    @staticmethod
    def _phi_from_drives(state: NeuronState, drives: list[Tensor], per_sample: bool = False) -> float | Tensor:
        if per_sample:
            batch = state.batch_size
            total = np.zeros(batch, dtype=np.float64)
            for xi, z in zip(state.layers, drives):
                total += np.sum((xi * z).reshape(batch, -1), axis=1, dtype=np.float64)
            return total
        return float(sum(np.sum(xi * z, dtype=np.float64) for xi, z in zip(state.layers, drives)))

    def _state_gradient(
        self, x: Tensor, state: NeuronState, weights: WeightSet
    ) -> tuple[list[Tensor], dict[int, PoolIndexCache], list[Tensor]]:
        drives, caches = self.drives(x, state, weights)
        grads: list[Tensor] = []
        for index in range(len(self.layers)):
            grad = drives[index]
            if index < self.output:
                grad = grad + self.top_down(index, state.layers[index + 1], weights, caches)
            grads.append(grad)
        return grads, caches, drives

    def d_primitive_d_state(self, x: Tensor, state: NeuronState, weights: WeightSet) -> list[Tensor]:
        grads, _, _ = self._state_gradient(x, state, weights)
        return grads

    def weight_gradients(self, x: Tensor, state: NeuronState, weights: WeightSet) -> dict[str, Tensor]:
        """dPhi/dw for every layer weight and bias, batch-summed."""
        _, caches = self.drives(x, state, weights)
        grads: dict[str, Tensor] = {}
        for index, layer in enumerate(self.layers):
            prev = self._input_of(index, x, state)
            xi = state.layers[index]
            if layer.kind == LayerKind.CONV:
                signal = unpool(xi, caches[index]) if layer.pool else xi
                grads[f"layers.{index}.weight"] = conv2d_kernel_grad(
                    prev, signal, layer.kernel, layer.stride, layer.padding
                )
            else:
                grads[f"layers.{index}.weight"] = xi.T @ prev.reshape(prev.shape[0], -1)
            if weights.biases[index] is not None:
                axes = (0, 2, 3) if xi.ndim == 4 else (0,)
                grads[f"layers.{index}.bias"] = xi.sum(axis=axes)
        return grads

    # augmented primitive and dynamics

    def _check_targets(self, targets: TargetBundle | None, aug_mode: AugMode) -> None:
        if aug_mode in (AugMode.KD, AugMode.KDW) and self.spec.upsilon:
            missing = [i for i in self.spec.upsilon if targets is None or i not in targets.teacher_logits]
            if missing:
                raise ConfigurationError(f"{aug_mode.value} mode needs teacher logits for layers {missing}")

    def augmented_primitive(
        self,
        x: Tensor,
        state: NeuronState,
        weights: WeightSet,
        beta: float,
        kappa: float,
        targets: TargetBundle | None,
        aug_mode: AugMode,
    ) -> float:
        """Phi - beta * L_EP - beta * kappa * sum L_Aug (losses batch-summed)."""
        self._check_targets(targets, aug_mode)
        phi = self.primitive(x, state, weights)
        if beta == 0.0:
            return phi
        terms = loss_terms(state, weights, targets, self.spec.upsilon, kappa, aug_mode, reduction="sum")
        return phi - beta * terms.total

    def _step(
        self,
        x: Tensor,
        state: NeuronState,
        weights: WeightSet,
        beta: float,
        kappa: float,
        targets: TargetBundle | None,
        aug_mode: AugMode,
    ) -> tuple[NeuronState, float]:
        grads, caches, drives = self._state_gradient(x, state, weights)
        phi = self._phi_from_drives(state, drives)
        if beta != 0.0:
            terms = loss_terms(state, weights, targets, self.spec.upsilon, kappa, aug_mode, reduction="sum")
            phi -= beta * terms.total
            for index, grad in terms.state_grads.items():
                grads[index] = grads[index] - beta * grad
        layers = [self._activations[i][0](grad) for i, grad in enumerate(grads)]
        return NeuronState(layers=layers, caches=caches, t=state.t + 1), phi

    def dynamics_step(
        self,
        x: Tensor,
        state: NeuronState,
        weights: WeightSet,
        beta: float = 0.0,
        kappa: float = 0.0,
        targets: TargetBundle | None = None,
        aug_mode: AugMode = AugMode.NONE,
    ) -> NeuronState:
        if beta != 0.0:
            self._check_targets(targets, aug_mode)
        new_state, _ = self._step(x, state, weights, beta, kappa, targets, aug_mode)
        return new_state

    def pre_activations(self, x: Tensor, state: NeuronState, weights: WeightSet) -> tuple[list[Tensor], dict[int, PoolIndexCache]]:
        """Free-phase dPhi/dxi before the activation, with the caches used."""
        grads, caches, _ = self._state_gradient(x, state, weights)
        return grads, caches

    def activation_masks(self, pre: list[Tensor]) -> list[Tensor]:
        return [self._activations[i][1](z) for i, z in enumerate(pre)]

    def run_phase(
        self,
        x: Tensor,
        init: NeuronState,
        weights: WeightSet,
        beta: float = 0.0,
        kappa: float = 0.0,
        targets: TargetBundle | None = None,
        aug_mode: AugMode = AugMode.NONE,
        max_steps: int = 250,
        tol: float = 1e-4,
        phase: str = "free",
    ) -> PhaseResult:
        """Iterate the dynamics until the inf-norm residual drops below `tol`."""
        if max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if beta != 0.0:
            self._check_targets(targets, aug_mode)

        state = init
        energies: list[float] = []
        residuals: list[float] = []
        converged = False
        for step in range(1, max_steps + 1):
            new_state, phi_before = self._step(x, state, weights, beta, kappa, targets, aug_mode)
            if not new_state.is_finite():
                logger.error("Divergence in %s phase at step %d", phase, step)
                raise DivergenceError(phase, step)
            if step > 1:
                energies.append(phi_before)
            residuals.append(new_state.max_abs_diff(state))
            state = new_state
            if residuals[-1] < tol:
                converged = True
                break

        energies.append(self.augmented_primitive(x, state, weights, beta, kappa, targets, aug_mode))
        if not converged:
            logger.debug(
                "%s phase stopped at max_steps=%d with residual %.3e (tol %.1e)",
                phase,
                max_steps,
                residuals[-1],
                tol,
            )
        return PhaseResult(
            state=state,
            energies=energies,
            residuals=residuals,
            steps=len(residuals),
            converged=converged,
            beta=beta,
            phase=phase,
        )

    # adjoint pieces used by reverse-mode unrolling

    def state_vjp(self, weights: WeightSet, caches: dict[int, PoolIndexCache], delta: list[Tensor]) -> list[Tensor]:
        """Hessian of Phi (under fixed pooling selections) applied to `delta`."""
        result: list[Tensor] = []
        for index in range(len(self.layers)):
            total = None
            if index > 0:
                total, _ = self.bottom_up(index, delta[index - 1], weights, caches.get(index))
            if index < self.output:
                feedback = self.top_down(index, delta[index + 1], weights, caches)
                total = feedback if total is None else total + feedback
            result.append(total if total is not None else np.zeros_like(delta[index]))
        return result

    def weight_vjp(
        self,
        x: Tensor,
        state: NeuronState,
        weights: WeightSet,
        caches: dict[int, PoolIndexCache],
        delta: list[Tensor],
    ) -> dict[str, Tensor]:
        """Gradient of <dPhi/dxi(state, w), delta> with respect to every weight and bias."""
        grads: dict[str, Tensor] = {}
        for index, layer in enumerate(self.layers):
            prev = self._input_of(index, x, state)
            xi = state.layers[index]
            d_now = delta[index]
            d_prev = None if index == 0 else delta[index - 1]
            if layer.kind == LayerKind.CONV:
                if layer.pool:
                    d_signal = unpool(d_now, caches[index])
                    xi_signal = unpool(xi, caches[index])
                else:
                    d_signal, xi_signal = d_now, xi
                grad = conv2d_kernel_grad(prev, d_signal, layer.kernel, layer.stride, layer.padding)
                if d_prev is not None:
                    grad = grad + conv2d_kernel_grad(d_prev, xi_signal, layer.kernel, layer.stride, layer.padding)
            else:
                batch = xi.shape[0]
                grad = d_now.T @ prev.reshape(batch, -1)
                if d_prev is not None:
                    grad = grad + xi.T @ d_prev.reshape(batch, -1)
            grads[f"layers.{index}.weight"] = grad
            if weights.biases[index] is not None:
                axes = (0, 2, 3) if d_now.ndim == 4 else (0,)
                grads[f"layers.{index}.bias"] = d_now.sum(axis=axes)
        return grads

    def predict(self, x: Tensor, weights: WeightSet, init: NeuronState, max_steps: int, tol: float) -> tuple[np.ndarray, PhaseResult]:
        result = self.run_phase(x, init, weights, max_steps=max_steps, tol=tol)
        return np.argmax(result.state.output, axis=1), result
