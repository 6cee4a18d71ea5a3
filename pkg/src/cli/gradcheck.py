"""Gradient check on a small network.

EP2 (both signs) and EP3 are compared with a reverse-mode unroll of the
free phase and with central finite differences of the steady-state loss.
A beta sweep then fits the order of the EP3 bias. The command exits 0 only
when every threshold holds.
"""

import argparse

import numpy as np

from src.cli.common import RunContext, add_run_flags, load_config, load_teacher
from src.core.config import settings as app_settings
from src.helpers.constants import (
    BETA_SWEEP_CSV,
    BIAS_ORDER_RATIO,
    BIAS_ORDER_SLOPE,
    COMPARISONS_CSV,
    EXIT_OK,
    EXIT_PROPERTY_FAILURE,
    GRADCHECK_BETAS,
    GRADCHECK_COSINE,
    GRADCHECK_FD_EPS,
    GRADCHECK_LAYER_COSINE,
)
from src.helpers.logger import Logger
from src.helpers.model import GuardError
from src.models.diagnostics import BetaSweepRecord, ComparisonRecord
from src.models.gradients import ComparisonReport, GradientEstimate
from src.models.training import AugMode
from src.repositories.datasets import DatasetRepository
from src.repositories.records import RecordRepository
from src.services.estimators import (
    EPConfig,
    ep_gradient_three_phase,
    ep_gradient_two_phase,
    run_free_phase,
)
from src.services.oracle import BiasOrderFit, beta_sweep, bias_order_fit, bptt_gradient, compare, fd_gradient
from src.services.trainer import EPTrainer, augmented_gradient_decomposition_check

logger = Logger(__name__)

dataset_repository: DatasetRepository = DatasetRepository()
record_repository: RecordRepository = RecordRepository()


def _betas(value: str) -> list[float]:
    return [float(item) for item in value.split(",") if item.strip()]


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("gradcheck", help="compare EP gradients with BPTT and finite differences")
    add_run_flags(parser, "gradcheck")
    parser.add_argument("--eps", type=float, default=GRADCHECK_FD_EPS, help="finite-difference step")
    parser.add_argument("--entries", type=int, help="sample this many entries per tensor for finite differences")
    parser.add_argument("--betas", type=_betas, default=list(GRADCHECK_BETAS), help="comma separated beta sweep")
    parser.add_argument("--break-estimator", action="store_true", help="negate the EP estimate (negative test)")
    parser.set_defaults(handler=cmd_gradcheck)


def comparison_records(report: ComparisonReport, beta: float | None) -> list[ComparisonRecord]:
    rows = [
        ComparisonRecord(
            reference=report.reference,
            candidate=report.candidate,
            beta=beta,
            tensor=item.name,
            cosine=item.cosine,
            relative_error=item.relative_error,
            sign_agreement=item.sign_agreement,
        )
        for item in report.per_tensor
    ]
    rows.append(
        ComparisonRecord(
            reference=report.reference,
            candidate=report.candidate,
            beta=beta,
            tensor="all",
            cosine=report.cosine,
            relative_error=report.relative_error,
            sign_agreement=report.sign_agreement,
        )
    )
    return rows


def bias_order_checks(fit: BiasOrderFit) -> dict[str, bool]:
    """Slope band of the log-log fit and the band for every successive halving ratio."""
    return {
        "bias_order_slope": BIAS_ORDER_SLOPE[0] <= fit.slope <= BIAS_ORDER_SLOPE[1],
        "bias_order_ratios": bool(fit.ratios)
        and all(BIAS_ORDER_RATIO[0] <= r <= BIAS_ORDER_RATIO[1] for r in fit.ratios),
    }


def cmd_gradcheck(args: argparse.Namespace) -> int:
    with RunContext("gradcheck", args.out) as run:
        config = load_config(args, precision="f64")
        run.bind(config)
        trainer = EPTrainer(config)
        weights = trainer.weights
        if args.entries is None and weights.num_parameters() > app_settings.GRADCHECK_MAX_PARAMETERS:
            raise GuardError(
                f"gradcheck network has {weights.num_parameters()} parameters, above the limit of "
                f"{app_settings.GRADCHECK_MAX_PARAMETERS}; use a smaller config or --entries"
            )

        dataset = dataset_repository.load(config, "train", args.data)
        teacher = load_teacher(config.teacher_logits, dataset)
        index = np.arange(min(config.batch_size, len(dataset)))
        x = dataset.images[index].astype(np.float64)
        settings = EPConfig.from_config(config, kappa=trainer.kappa_for_epoch(0))
        targets = trainer.targets_for(index, dataset.labels[index], settings.kappa, teacher)
        model = trainer.model
        # one start shared by the EP phases and both oracles
        init = model.init_state(len(index), settings.state_init, trainer.rngs["state"], weights.dtype)

        free = run_free_phase(model, x, weights, settings, init=init)
        ep2_pos = ep_gradient_two_phase(model, x, targets, weights, settings, sign=1, free=free)
        ep2_neg = ep_gradient_two_phase(model, x, targets, weights, settings, sign=-1, free=free)
        ep3 = ep_gradient_three_phase(model, x, targets, weights, settings, free=free)
        if args.break_estimator:
            logger.warning("Estimator deliberately broken: EP3 is negated")
            ep3, ep2_pos, ep2_neg = (g.scaled(-1.0) for g in (ep3, ep2_pos, ep2_neg))
        bptt = bptt_gradient(model, x, targets, weights, settings, init=init)
        fd = fd_gradient(
            model, x, targets, weights, settings, args.eps, entries=args.entries, seed=config.seed, init=init
        )

        pairs: list[tuple[GradientEstimate, GradientEstimate, float | None]] = [
            (bptt, ep3, settings.beta),
            (fd, ep3, settings.beta),
            (fd, bptt, None),
            (bptt, ep2_pos, settings.beta),
            (bptt, ep2_neg, -settings.beta),
        ]
        reports = [(compare(reference, candidate), beta) for reference, candidate, beta in pairs]
        comparisons = [row for report, beta in reports for row in comparison_records(report, beta)]
        run.files["comparisons"] = str(
            record_repository.write(run.out_dir / COMPARISONS_CSV, comparisons, ComparisonRecord)
        )

        sweep = beta_sweep(model, x, targets, weights, settings, args.betas, fd, bptt, init=init)
        run.files["beta_sweep"] = str(record_repository.write(run.out_dir / BETA_SWEEP_CSV, sweep, BetaSweepRecord))
        fit = bias_order_fit([r.beta for r in sweep], [max(r.error_to_fd, np.finfo(np.float64).tiny) for r in sweep])

        bptt_ep3, fd_ep3 = reports[0][0], reports[1][0]
        checks = {
            "cosine_bptt_ep3": bptt_ep3.cosine >= GRADCHECK_COSINE,
            "layer_cosine_bptt_ep3": bptt_ep3.min_layer_cosine() >= GRADCHECK_LAYER_COSINE,
            "cosine_fd_ep3": fd_ep3.cosine >= GRADCHECK_COSINE,
            **bias_order_checks(fit),
        }
        run.summary.update(
            cosine_bptt_ep3=bptt_ep3.cosine,
            min_layer_cosine_bptt_ep3=bptt_ep3.min_layer_cosine(),
            cosine_fd_ep3=fd_ep3.cosine,
            cosine_fd_bptt=reports[2][0].cosine,
            bias_order_slope=fit.slope,
            bias_order_ratios=fit.ratios,
            parameters=weights.num_parameters(),
            free_steps=free.steps,
            fd_eps=args.eps,
        )

        if config.mode != AugMode.NONE and settings.kappa > 0.0:
            decomposition = augmented_gradient_decomposition_check(
                model, x, targets, weights, settings, args.eps, args.entries, init=init
            )
            checks["cosine_augmented_decomposition"] = decomposition.cosine >= GRADCHECK_COSINE
            run.summary.update(
                cosine_augmented_decomposition=decomposition.cosine,
                ep_component_norm=decomposition.ep_component_norm,
                aug_component_norm=decomposition.aug_component_norm,
            )

        run.summary["checks"] = checks
        for name, passed in checks.items():
            logger.info("%-32s %s", name, "pass" if passed else "FAIL")
        print(
            f"cosine(BPTT, EP3) {bptt_ep3.cosine:.6f}  cosine(FD, EP3) {fd_ep3.cosine:.6f}  "
            f"bias-order slope {fit.slope:.3f}"
        )
        if not all(checks.values()):
            run.exit_code = EXIT_PROPERTY_FAILURE
    return run.exit_code
