"""Output and intermediate-signal losses.

Each loss returns its value together with the gradients the dynamics and the
updates need. `reduction="mean"` averages over the batch (reported losses,
oracle objectives); `reduction="sum"` matches the batch-summed primitive and is
what the nudged dynamics use.
"""

from typing import Literal

import numpy as np
from pydantic import Field

from src.helpers.model import ConfigurationError, DimensionError
from src.models.state import NeuronState, WeightSet
from src.models.tensors import ArrayModel, Tensor
from src.models.training import AugMode, TargetBundle

Reduction = Literal["mean", "sum"]


def softmax(z: Tensor) -> Tensor:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(z: Tensor) -> Tensor:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def one_hot(labels: np.ndarray, num_classes: int, dtype: np.dtype) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigurationError(f"class index out of range [0, {num_classes})")
    encoded = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def _as_targets(targets: np.ndarray, logits: Tensor) -> Tensor:
    if targets.ndim == 1:
        return one_hot(targets, logits.shape[1], logits.dtype)
    if targets.shape != logits.shape:
        raise DimensionError("loss", "targets", logits.shape, targets.shape)
    return targets.astype(logits.dtype, copy=False)


def _reduce(per_sample: Tensor, grad: Tensor, reduction: Reduction) -> tuple[float, Tensor]:
    if reduction == "mean":
        batch = per_sample.shape[0]
        return float(np.mean(per_sample)), grad / batch
    return float(np.sum(per_sample)), grad


def output_loss(xi_out: Tensor, targets: np.ndarray, reduction: Reduction = "mean") -> tuple[float, Tensor]:
    """Softmax cross-entropy of the output state against labels or one-hot rows."""
    if xi_out.ndim != 2:
        raise DimensionError("output_loss", "rank", 2, xi_out.ndim)
    y = _as_targets(np.asarray(targets), xi_out)
    per_sample = -np.sum(y * log_softmax(xi_out), axis=1)
    return _reduce(per_sample, softmax(xi_out) - y, reduction)


def soft_target_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    tau: float,
    scale_by_temperature: bool = True,
    reduction: Reduction = "mean",
) -> tuple[float, Tensor]:
    """KL(softmax(teacher/tau) || softmax(student/tau)), tau^2-scaled by default.

    Returns the loss and its gradient with respect to the student logits.
    """
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError("soft_target_loss", "logits", teacher_logits.shape, student_logits.shape)
    if tau <= 0.0:
        raise ConfigurationError("temperature tau must be positive")
    teacher_logits = teacher_logits.astype(student_logits.dtype, copy=False)
    p_teacher = softmax(teacher_logits / tau)
    log_teacher = log_softmax(teacher_logits / tau)
    log_student = log_softmax(student_logits / tau)
    scale = tau * tau if scale_by_temperature else 1.0
    per_sample = scale * np.sum(p_teacher * (log_teacher - log_student), axis=1)
    grad = (scale / tau) * (np.exp(log_student) - p_teacher)
    return _reduce(per_sample, grad, reduction)


def kd_view(xi: Tensor) -> Tensor:
    """Logit view of a layer: channel means for conv states, the state itself otherwise."""
    return xi.mean(axis=(2, 3)) if xi.ndim == 4 else xi


def kd_view_adjoint(grad_view: Tensor, shape: tuple[int, ...]) -> Tensor:
    if len(shape) == 4:
        height, width = shape[2], shape[3]
        return np.broadcast_to(grad_view[:, :, None, None] / (height * width), shape).copy()
    return grad_view


def le_loss(
    xi: Tensor,
    projection: Tensor,
    targets: np.ndarray,
    tau: float,
    scale_by_temperature: bool = True,
    reduction: Reduction = "mean",
) -> tuple[float, Tensor, Tensor]:
    """Local-error loss of the readout B_i·flatten(xi) against the labels.

    Returns (loss, d/d xi, d/d B_i).
    """
    batch = xi.shape[0]
    flat = xi.reshape(batch, -1)
    if projection.ndim != 2 or projection.shape[1] != flat.shape[1]:
        raise DimensionError("le_loss", "B.in", flat.shape[1], projection.shape[-1])
    readout = flat @ projection.T
    y = _as_targets(np.asarray(targets), readout)
    loss, grad_readout = soft_target_loss(readout, y, tau, scale_by_temperature, reduction)
    grad_xi = (grad_readout @ projection).reshape(xi.shape)
    grad_projection = grad_readout.T @ flat
    return loss, grad_xi, grad_projection


def kd_loss(
    xi: Tensor,
    teacher_logits: Tensor,
    tau: float,
    scale_by_temperature: bool = True,
    reduction: Reduction = "mean",
) -> tuple[float, Tensor]:
    view = kd_view(xi)
    if view.shape != teacher_logits.shape:
        raise ConfigurationError(
            f"kd_loss: student logits {view.shape} and teacher logits {teacher_logits.shape} "
            "differ in size; use kdw mode to learn a linear mapping"
        )
    loss, grad_view = soft_target_loss(view, teacher_logits, tau, scale_by_temperature, reduction)
    return loss, kd_view_adjoint(grad_view, xi.shape)


def kdw_readout_and_loss(
    xi: Tensor,
    mapping: Tensor,
    teacher_logits: Tensor,
    tau: float,
    scale_by_temperature: bool = True,
    reduction: Reduction = "mean",
) -> tuple[float, Tensor, Tensor]:
    """Distillation through a learned map: loss of w_map·view(xi) against the teacher.

    Returns (loss, d/d xi, d/d w_map).
    """
    view = kd_view(xi)
    if mapping.ndim != 2 or mapping.shape[1] != view.shape[1]:
        raise DimensionError("kdw_readout_and_loss", "w_map.in", view.shape[1], mapping.shape[-1])
    if mapping.shape[0] != teacher_logits.shape[1]:
        raise DimensionError("kdw_readout_and_loss", "w_map.out", teacher_logits.shape[1], mapping.shape[0])
    readout = view @ mapping.T
    loss, grad_readout = soft_target_loss(readout, teacher_logits, tau, scale_by_temperature, reduction)
    grad_view = grad_readout @ mapping
    grad_mapping = grad_readout.T @ view
    return loss, kd_view_adjoint(grad_view, xi.shape), grad_mapping


def aux_parameter_name(mode: AugMode, index: int) -> str | None:
    if mode == AugMode.LE:
        return f"projections.{index}"
    if mode == AugMode.KDW:
        return f"mappings.{index}"
    return None


def aug_loss(
    mode: AugMode,
    index: int,
    xi: Tensor,
    weights: WeightSet,
    targets: TargetBundle,
    reduction: Reduction = "mean",
) -> tuple[float, Tensor, Tensor | None]:
    """L_Aug of layer `index` for the active mode: (loss, d/d xi, d/d aux-matrix or None)."""
    if mode == AugMode.LE:
        if index not in weights.projections:
            raise ConfigurationError(f"le mode needs a projection matrix for layer {index}")
        return le_loss(
            xi, weights.projections[index], targets.labels, targets.tau, targets.scale_by_temperature, reduction
        )
    if index not in targets.teacher_logits:
        raise ConfigurationError(f"{mode.value} mode needs teacher logits for layer {index}")
    teacher = targets.teacher_logits[index]
    if mode == AugMode.KD:
        loss, grad = kd_loss(xi, teacher, targets.tau, targets.scale_by_temperature, reduction)
        return loss, grad, None
    if mode == AugMode.KDW:
        if index not in weights.mappings:
            raise ConfigurationError(f"kdw mode needs a mapping matrix for layer {index}")
        return kdw_readout_and_loss(
            xi, weights.mappings[index], teacher, targets.tau, targets.scale_by_temperature, reduction
        )
    raise ConfigurationError(f"no intermediate loss for mode '{mode.value}'")


class LossTerms(ArrayModel):
    """L_Total split into its parts, with kappa already folded into Υ gradients."""

    ep_loss: float
    aug_losses: dict[int, float] = Field(default_factory=dict)
    kappa: float = 0.0
    state_grads: dict[int, np.ndarray] = Field(default_factory=dict)
    aux_grads: dict[str, np.ndarray] = Field(default_factory=dict)

    @property
    def aug_sum(self) -> float:
        return float(sum(self.aug_losses[i] for i in sorted(self.aug_losses)))

    @property
    def total(self) -> float:
        return self.ep_loss + self.kappa * self.aug_sum


def signal_active(mode: AugMode, upsilon: list[int], kappa: float) -> bool:
    return mode != AugMode.NONE and bool(upsilon) and kappa != 0.0


def loss_terms(
    state: NeuronState,
    weights: WeightSet,
    targets: TargetBundle,
    upsilon: list[int],
    kappa: float,
    mode: AugMode,
    reduction: Reduction = "mean",
) -> LossTerms:
    output = len(state.layers) - 1
    ep_loss, grad_out = output_loss(state.layers[output], targets.labels, reduction)
    terms = LossTerms(ep_loss=ep_loss, kappa=kappa, state_grads={output: grad_out})
    if mode == AugMode.NONE or not upsilon:
        return terms
    for index in upsilon:
        loss, grad_xi, grad_aux = aug_loss(mode, index, state.layers[index], weights, targets, reduction)
        terms.aug_losses[index] = loss
        if kappa != 0.0:
            terms.state_grads[index] = kappa * grad_xi
            name = aux_parameter_name(mode, index)
            if grad_aux is not None and name is not None:
                terms.aux_grads[name] = kappa * grad_aux
    return terms


def total_loss(
    state: NeuronState,
    weights: WeightSet,
    targets: TargetBundle,
    upsilon: list[int],
    kappa: float,
    mode: AugMode,
    reduction: Reduction = "mean",
) -> float:
    """L_EP + kappa * sum over Υ of L_Aug."""
    return loss_terms(state, weights, targets, upsilon, kappa, mode, reduction).total
