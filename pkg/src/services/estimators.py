"""Equilibrium-propagation gradient estimators.

Every estimate approximates the gradient of the batch-mean total loss, so
descent subtracts it. For a nudged state xi^b and the free state xi*:

    layer weights: -(dPhi/dw(xi^b) - dPhi/dw(xi*)) / (b * N)
    B_i / w_map:   kappa * dL_Aug/dw evaluated at xi^b (mean over the batch)

The three-phase form replaces the free state by the state nudged with -beta.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from src.helpers.logger import Logger
from src.models.gradients import Estimator, GradientEstimate
from src.models.state import NeuronState, PhaseResult, WeightSet
from src.models.tensors import ArrayModel, Tensor
from src.models.training import AugMode, TargetBundle, TrainConfig
from src.services.energy import CRNN
from src.services.losses import loss_terms, signal_active

logger = Logger(__name__)


class SnapshotLedger:
    """Counts full NeuronState snapshots a gradient computation keeps alive."""

    def __init__(self):
        self.retained = 0
        self.peak = 0

    def retain(self, count: int = 1) -> None:
        self.retained += count
        self.peak = max(self.peak, self.retained)

    def reset(self) -> None:
        self.retained = 0


class EPPhases(ArrayModel):
    free: PhaseResult
    plus: PhaseResult | None = None
    minus: PhaseResult | None = None
    beta: float
    kappa: float

    def results(self) -> list[PhaseResult]:
        return [r for r in (self.free, self.plus, self.minus) if r is not None]


class EPConfig(ArrayModel):
    """Phase settings pulled from a TrainConfig, overridable per call."""

    beta: float
    kappa: float
    mode: AugMode
    t_free: int
    t_nudge: int
    tol: float
    state_init: str = "zeros"
    parallel_nudge: bool = False
    aux_update: str = "three_phase"

    @classmethod
    def from_config(cls, config: TrainConfig, kappa: float | None = None, beta: float | None = None) -> "EPConfig":
        return cls(
            beta=config.beta if beta is None else beta,
            kappa=config.kappa if kappa is None else kappa,
            mode=config.mode,
            t_free=config.t_free,
            t_nudge=config.t_nudge,
            tol=config.tol,
            state_init=config.state_init,
            parallel_nudge=config.parallel_nudge,
            aux_update=config.aux_update,
        )


def effective_kappa(model: CRNN, settings: EPConfig) -> float:
    return settings.kappa if signal_active(settings.mode, model.spec.upsilon, settings.kappa) else 0.0


def run_free_phase(
    model: CRNN,
    x: Tensor,
    weights: WeightSet,
    settings: EPConfig,
    rng: np.random.Generator | None = None,
    init: NeuronState | None = None,
) -> PhaseResult:
    if init is None:
        init = model.init_state(x.shape[0], settings.state_init, rng, weights.dtype)
    return model.run_phase(x, init, weights, max_steps=settings.t_free, tol=settings.tol, phase="free")


def run_nudge_phase(
    model: CRNN,
    x: Tensor,
    free: PhaseResult,
    weights: WeightSet,
    beta: float,
    targets: TargetBundle,
    settings: EPConfig,
) -> PhaseResult:
    return model.run_phase(
        x,
        free.state,
        weights,
        beta=beta,
        kappa=effective_kappa(model, settings),
        targets=targets,
        aug_mode=settings.mode,
        max_steps=settings.t_nudge,
        tol=settings.tol,
        phase="nudge+" if beta > 0 else "nudge-",
    )


def ep_phases(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    signs: tuple[int, ...] = (1, -1),
    rng: np.random.Generator | None = None,
    free: PhaseResult | None = None,
    ledger: SnapshotLedger | None = None,
) -> EPPhases:
    """Free phase followed by the nudged phases for `signs`, both started from xi*."""
    if free is None:
        free = run_free_phase(model, x, weights, settings, rng)
    if not free.converged:
        logger.warning("Free phase did not converge (residual %.3e)", free.final_residual)

    def nudge(sign: int) -> PhaseResult:
        return run_nudge_phase(model, x, free, weights, sign * settings.beta, targets, settings)

    if settings.parallel_nudge and len(signs) > 1:
        with ThreadPoolExecutor(max_workers=len(signs), thread_name_prefix="nudge") as pool:
            results = dict(zip(signs, pool.map(nudge, signs)))
    else:
        results = {sign: nudge(sign) for sign in signs}

    if ledger is not None:
        ledger.retain(1 + len(results))
    return EPPhases(
        free=free,
        plus=results.get(1),
        minus=results.get(-1),
        beta=settings.beta,
        kappa=effective_kappa(model, settings),
    )


def _aux_grads(
    model: CRNN, state: NeuronState, weights: WeightSet, targets: TargetBundle, kappa: float, mode: AugMode
) -> dict[str, Tensor]:
    if kappa == 0.0:
        return {}
    return loss_terms(state, weights, targets, model.spec.upsilon, kappa, mode, reduction="mean").aux_grads


def _metadata(phases: EPPhases, sign: int | None = None) -> dict:
    used = [phases.free] if sign is not None else []
    if sign == 1 or sign is None:
        used.append(phases.plus)
    if sign == -1 or sign is None:
        used.append(phases.minus)
    return {
        "warnings": [f"{r.phase} phase did not converge in {r.steps} steps" for r in used if not r.converged],
        "steps": {r.phase: r.steps for r in used},
        "retained_snapshots": len(used) + (1 if sign is None else 0),
    }


def two_phase_estimate(
    model: CRNN, x: Tensor, targets: TargetBundle, weights: WeightSet, phases: EPPhases, sign: int, mode: AugMode
) -> GradientEstimate:
    nudged = phases.plus if sign > 0 else phases.minus
    beta = sign * phases.beta
    batch = x.shape[0]
    at_nudged = model.weight_gradients(x, nudged.state, weights)
    at_free = model.weight_gradients(x, phases.free.state, weights)
    tensors = {name: -(at_nudged[name] - at_free[name]) / (beta * batch) for name in at_nudged}
    tensors.update(_aux_grads(model, nudged.state, weights, targets, phases.kappa, mode))
    return GradientEstimate(
        tensors=tensors,
        estimator=Estimator.EP2_POS if sign > 0 else Estimator.EP2_NEG,
        beta=beta,
        metadata=_metadata(phases, sign),
    )


def three_phase_estimate(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    phases: EPPhases,
    mode: AugMode,
    aux_update: str = "three_phase",
) -> GradientEstimate:
    beta = phases.beta
    batch = x.shape[0]
    at_plus = model.weight_gradients(x, phases.plus.state, weights)
    at_minus = model.weight_gradients(x, phases.minus.state, weights)
    tensors = {name: -(at_plus[name] - at_minus[name]) / (2.0 * beta * batch) for name in at_plus}

    aux_plus = _aux_grads(model, phases.plus.state, weights, targets, phases.kappa, mode)
    if aux_update == "two_phase":
        tensors.update(aux_plus)
    else:
        aux_minus = _aux_grads(model, phases.minus.state, weights, targets, phases.kappa, mode)
        tensors.update({name: 0.5 * (aux_plus[name] + aux_minus[name]) for name in aux_plus})

    metadata = _metadata(phases)
    metadata["free_steps"] = phases.free.steps
    if not phases.free.converged:
        metadata["warnings"].insert(0, f"free phase did not converge in {phases.free.steps} steps")
    return GradientEstimate(tensors=tensors, estimator=Estimator.EP3, beta=beta, metadata=metadata)


def ep_gradient_two_phase(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    sign: int = 1,
    rng: np.random.Generator | None = None,
    free: PhaseResult | None = None,
) -> GradientEstimate:
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    phases = ep_phases(model, x, targets, weights, settings, (sign,), rng, free)
    return two_phase_estimate(model, x, targets, weights, phases, sign, settings.mode)


def ep_gradient_three_phase(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    rng: np.random.Generator | None = None,
    free: PhaseResult | None = None,
    ledger: SnapshotLedger | None = None,
) -> GradientEstimate:
    phases = ep_phases(model, x, targets, weights, settings, (1, -1), rng, free, ledger)
    return three_phase_estimate(model, x, targets, weights, phases, settings.mode, settings.aux_update)
