"""Reference gradients for checking the EP estimators.

`fd_gradient` perturbs one parameter entry at a time and re-runs the free
phase; `bptt_gradient` unrolls the free-phase dynamics and accumulates the
reverse-mode gradient of the loss at the final step. Both return gradients of
the batch-mean total loss, like the EP estimators.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Literal

import numpy as np
from pydantic import BaseModel

from src.core.config import settings as app_settings
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError, DimensionError, DivergenceError, GuardError
from src.models.diagnostics import BetaSweepRecord
from src.models.gradients import ComparisonReport, Estimator, GradientEstimate, TensorComparison
from src.models.state import NeuronState, WeightSet
from src.models.tensors import Tensor
from src.models.training import TargetBundle
from src.services.energy import CRNN
from src.services.estimators import (
    EPConfig,
    SnapshotLedger,
    effective_kappa,
    ep_phases,
    run_free_phase,
    three_phase_estimate,
)
from src.services.losses import loss_terms

logger = Logger(__name__)

Objective = Literal["total", "ep", "aug"]


def _objective(
    model: CRNN,
    state: NeuronState,
    weights: WeightSet,
    targets: TargetBundle,
    settings: EPConfig,
    objective: Objective,
) -> float:
    terms = loss_terms(
        state, weights, targets, model.spec.upsilon, effective_kappa(model, settings), settings.mode, "mean"
    )
    if objective == "ep":
        return terms.ep_loss
    if objective == "aug":
        return terms.aug_sum
    return terms.total


def fd_gradient(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    eps: float = 1e-4,
    objective: Objective = "total",
    entries: int | None = None,
    seed: int = 0,
    init: NeuronState | None = None,
    workers: int | None = None,
    state_rng: np.random.Generator | None = None,
) -> GradientEstimate:
    """Central differences of the steady-state loss for every (or `entries` sampled) parameter entry.

    Every perturbed free phase starts from the same `init`, drawn once from
    `settings.state_init` when not given.
    """
    if eps <= 0.0:
        raise ConfigurationError("fd_gradient needs eps > 0")
    if weights.dtype != np.float64 or x.dtype != np.float64:
        raise ConfigurationError("fd_gradient runs in 64-bit precision; use precision = f64")
    if entries is None and weights.num_parameters() > app_settings.GRADCHECK_MAX_PARAMETERS:
        raise GuardError(
            f"{weights.num_parameters()} parameters exceed the finite-difference limit of "
            f"{app_settings.GRADCHECK_MAX_PARAMETERS}; sample entries instead"
        )
    if init is None:
        init = model.init_state(x.shape[0], settings.state_init, state_rng, weights.dtype)

    named = weights.named()
    rng = np.random.default_rng(seed)
    tasks: list[tuple[str, int]] = []
    sampled: dict[str, list[int]] = {}
    for name, tensor in named.items():
        if entries is None or entries >= tensor.size:
            picked = range(tensor.size)
        else:
            picked = sorted(int(i) for i in rng.choice(tensor.size, size=entries, replace=False))
            sampled[name] = list(picked)
        tasks.extend((name, index) for index in picked)

    def measure(task: tuple[str, int]) -> tuple[float, bool]:
        name, index = task
        values = []
        converged = True
        for sign in (1.0, -1.0):
            tensor = named[name].copy()
            tensor.flat[index] += sign * eps
            perturbed = weights.with_parameter(name, tensor)
            free = run_free_phase(model, x, perturbed, settings, init=init)
            converged = converged and free.converged
            values.append(_objective(model, free.state, perturbed, targets, settings, objective))
        return (values[0] - values[1]) / (2.0 * eps), converged

    workers = workers or app_settings.FD_WORKERS
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="fd") as pool:
            results = list(pool.map(measure, tasks))
    else:
        results = [measure(task) for task in tasks]

    tensors = {name: np.zeros_like(tensor) for name, tensor in named.items()}
    unconverged: list[str] = []
    for (name, index), (value, converged) in zip(tasks, results):
        tensors[name].flat[index] = value
        if not converged:
            unconverged.append(f"{name}[{index}]")
    if unconverged:
        logger.warning("%d finite-difference entries did not converge", len(unconverged))

    metadata: dict = {"eps": eps, "objective": objective, "unconverged": unconverged}
    if sampled:
        metadata["entries"] = sampled
    return GradientEstimate(tensors=tensors, estimator=Estimator.FD, metadata=metadata)


def bptt_gradient(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    truncate: int | None = None,
    init: NeuronState | None = None,
    ledger: SnapshotLedger | None = None,
    state_rng: np.random.Generator | None = None,
) -> GradientEstimate:
    """Reverse-mode gradient through exactly `settings.t_free` free-phase steps.

    The unroll starts from `init`, or from `settings.state_init` otherwise; a
    uniform start needs `state_rng`. Pass the init the EP free phase used to compare
    both on the same trajectory.

    With `truncate = k` only the last k steps accumulate weight gradients.
    Pooling selections are held fixed per step and the hard-sigmoid
    derivative is 0 outside the open interval (0, 1).
    """
    steps = settings.t_free
    if init is None:
        init = model.init_state(x.shape[0], settings.state_init, state_rng, weights.dtype)
    retained = steps * init.num_elements()
    if retained > app_settings.BPTT_STATE_BUDGET:
        raise GuardError(
            f"unrolling {steps} steps keeps {retained} state elements, above the budget of "
            f"{app_settings.BPTT_STATE_BUDGET}"
        )
    if truncate is not None and not 1 <= truncate <= steps:
        raise ConfigurationError(f"truncate must lie in [1, {steps}]")

    history: list[NeuronState] = []
    state = init
    for _ in range(steps):
        history.append(state)
        state = model.dynamics_step(x, state, weights)
        if not state.is_finite():
            raise DivergenceError("bptt", len(history))
    if ledger is not None:
        ledger.retain(len(history))

    kappa = effective_kappa(model, settings)
    terms = loss_terms(state, weights, targets, model.spec.upsilon, kappa, settings.mode, "mean")
    adjoint = [np.zeros_like(layer) for layer in state.layers]
    for index, grad in terms.state_grads.items():
        adjoint[index] = adjoint[index] + grad

    tensors = {name: np.zeros_like(value) for name, value in weights.named().items() if name.startswith("layers.")}
    first = steps - (truncate or steps)
    for t in range(steps - 1, first - 1, -1):
        previous = history[t]
        pre, caches = model.pre_activations(x, previous, weights)
        delta = [a * mask for a, mask in zip(adjoint, model.activation_masks(pre))]
        for name, grad in model.weight_vjp(x, previous, weights, caches, delta).items():
            tensors[name] += grad
        if t > first:
            adjoint = model.state_vjp(weights, caches, delta)
    tensors.update(terms.aux_grads)

    return GradientEstimate(
        tensors=tensors,
        estimator=Estimator.BPTT,
        metadata={"retained_snapshots": len(history), "steps": steps, "truncate": truncate},
    )


def _flatten(estimate: GradientEstimate, name: str, entries: np.ndarray | None) -> np.ndarray:
    values = estimate.tensors[name].astype(np.float64).ravel()
    return values if entries is None else values[entries]


def _metrics(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 and norm_b == 0.0:
        cosine = 1.0
    elif norm_a == 0.0 or norm_b == 0.0:
        cosine = 0.0
    else:
        cosine = float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))
    scale = max(norm_a, norm_b)
    relative = float(np.linalg.norm(a - b)) / scale if scale > 0.0 else 0.0
    sign = float(np.mean(np.sign(a) == np.sign(b))) if a.size else 1.0
    return cosine, relative, sign


def _shared_entries(a: GradientEstimate, b: GradientEstimate, name: str) -> np.ndarray | None:
    left, right = a.entries(name), b.entries(name)
    if left is None:
        return right
    if right is None:
        return left
    return np.intersect1d(left, right)


def compare(reference: GradientEstimate, candidate: GradientEstimate) -> ComparisonReport:
    """Cosine, relative L2 error and sign agreement per tensor and over all tensors.

    The relative error is ||a - b|| / max(||a||, ||b||). Sampled estimates are
    compared on their measured entries only.
    """
    names = [name for name in reference.tensors if name in candidate.tensors]
    per_tensor: list[TensorComparison] = []
    left_all: list[np.ndarray] = []
    right_all: list[np.ndarray] = []
    for name in names:
        if reference.tensors[name].shape != candidate.tensors[name].shape:
            raise DimensionError("compare", name, reference.tensors[name].shape, candidate.tensors[name].shape)
        entries = _shared_entries(reference, candidate, name)
        left = _flatten(reference, name, entries)
        right = _flatten(candidate, name, entries)
        cosine, relative, sign = _metrics(left, right)
        per_tensor.append(
            TensorComparison(name=name, cosine=cosine, relative_error=relative, sign_agreement=sign, entries=left.size)
        )
        left_all.append(left)
        right_all.append(right)

    left = np.concatenate(left_all) if left_all else np.zeros(0)
    right = np.concatenate(right_all) if right_all else np.zeros(0)
    cosine, relative, sign = _metrics(left, right)
    return ComparisonReport(
        reference=reference.estimator.value,
        candidate=candidate.estimator.value,
        per_tensor=per_tensor,
        cosine=cosine,
        relative_error=relative,
        sign_agreement=sign,
    )


def error_norm(reference: GradientEstimate, candidate: GradientEstimate) -> float:
    """Absolute L2 distance over the shared (measured) entries."""
    total = 0.0
    for name in reference.tensors:
        if name not in candidate.tensors:
            continue
        entries = _shared_entries(reference, candidate, name)
        diff = _flatten(reference, name, entries) - _flatten(candidate, name, entries)
        total += float(np.dot(diff, diff))
    return float(np.sqrt(total))


class BiasOrderFit(BaseModel):
    slope: float
    intercept: float
    ratios: list[float]


def bias_order_fit(betas: list[float], errors: list[float]) -> BiasOrderFit:
    """Least-squares slope of log(error) against log(|beta|)."""
    if len(betas) != len(errors) or len(betas) < 2:
        raise ConfigurationError("bias_order_fit needs at least two (beta, error) pairs")
    if any(e <= 0.0 for e in errors):
        raise ConfigurationError("bias_order_fit needs strictly positive errors")
    order = np.argsort(np.abs(betas))[::-1]
    b = np.log(np.abs(np.asarray(betas, dtype=np.float64)[order]))
    e = np.log(np.asarray(errors, dtype=np.float64)[order])
    slope, intercept = np.polyfit(b, e, 1)
    ordered = np.exp(e)
    ratios = [float(ordered[i] / ordered[i + 1]) for i in range(len(ordered) - 1)]
    return BiasOrderFit(slope=float(slope), intercept=float(intercept), ratios=ratios)


def beta_sweep(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    betas: list[float],
    fd: GradientEstimate,
    bptt: GradientEstimate | None = None,
    init: NeuronState | None = None,
) -> list[BetaSweepRecord]:
    """EP3 at each beta against the finite-difference (and optionally BPTT) reference."""
    free = run_free_phase(model, x, weights, settings, init=init)
    records: list[BetaSweepRecord] = []
    for beta in betas:
        swept = settings.model_copy(update={"beta": beta})
        phases = ep_phases(model, x, targets, weights, swept, free=free)
        ep3 = three_phase_estimate(model, x, targets, weights, phases, swept.mode, swept.aux_update)
        records.append(
            BetaSweepRecord(
                beta=beta,
                error_to_fd=error_norm(fd, ep3),
                cosine_to_fd=compare(fd, ep3).cosine,
                cosine_to_bptt=None if bptt is None else compare(bptt, ep3).cosine,
            )
        )
        logger.debug("beta=%g error_to_fd=%.3e", beta, records[-1].error_to_fd)
    return records


def cosine_beta_sweep(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    betas: list[float],
    bptt: GradientEstimate | None = None,
    init: NeuronState | None = None,
) -> list[tuple[float, float]]:
    """cosine(EP3, BPTT) for each beta, sharing one free phase and one BPTT reference."""
    if bptt is None:
        bptt = bptt_gradient(model, x, targets, weights, settings, init=init)
    free = run_free_phase(model, x, weights, settings, init=init)
    sweep: list[tuple[float, float]] = []
    for beta in betas:
        swept = settings.model_copy(update={"beta": beta})
        phases = ep_phases(model, x, targets, weights, swept, free=free)
        ep3 = three_phase_estimate(model, x, targets, weights, phases, swept.mode, swept.aux_update)
        sweep.append((beta, compare(bptt, ep3).cosine))
    return sweep
