"""Null-calibration and Monte Carlo power study for the GQS test."""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.cone_geometry import HypothesisSpec, check_feasible, order_cone
from app.data_model import make_basis, make_link, simulate_dataset
from app.errors import ConfigError, ConstraintError, DimensionError
from app.models import QuadratureConfig, SimulationConfig, SolverOptions, TestConfig
from app.testing_power import run_test
from app.tube_weights import chibar_tail

logger = logging.getLogger(__name__)

MIN_REPLICATES = 100


class ReplicateOutcome(BaseModel):
    index: int
    s_n: float
    s_n_star: float
    p_value: float
    p_value_star: float
    analytic_tails: list[float]
    projection_diag: float


class CalibrationSummary(BaseModel):
    """Aggregated rejection counts and tail comparisons, independent of worker count."""

    model_config = ConfigDict(frozen=True)

    replicates: int
    n_subjects: int
    effect_scale: float
    rejection_counts: dict[str, int]
    rejection_rates: dict[str, float]
    rejection_rates_star: dict[str, float]
    tail_points: list[float]
    empirical_tails: list[float]
    analytic_tails: list[float]
    max_tail_deviation: float
    median_projection_diag: float


class _Task(BaseModel):
    """Everything a worker needs to run a block of replicates."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: SimulationConfig
    gamma: list[float]
    spec: HypothesisSpec
    solver: SolverOptions
    test: TestConfig
    quadrature: QuadratureConfig
    seed: int
    indices: list[int]


def replicate_seed(seed: int, index: int) -> int:
    """Independent substream per replicate, unaffected by chunking or worker count."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _run_block(task: _Task) -> list[ReplicateOutcome]:
    link = make_link(task.config.link)
    basis = make_basis(task.config.basis, task.config.n_times)
    spec = task.config.model_copy(update={"gamma": task.gamma})
    outcomes = []
    for index in task.indices:
        data = simulate_dataset(spec, replicate_seed(task.seed, index))
        result = run_test(data, link, basis, task.spec, config=task.test, solver=task.solver, quadrature=task.quadrature)
        outcomes.append(
            ReplicateOutcome(
                index=index,
                s_n=result.s_n,
                s_n_star=result.s_n_star,
                p_value=result.p_value,
                p_value_star=result.p_value_star,
                analytic_tails=[chibar_tail(result.weights_used, c) for c in task.config.tail_points],
                projection_diag=result.projection_diag,
            )
        )
    logger.debug(f"Finished replicates {task.indices[0]}..{task.indices[-1]}")
    return outcomes


def simulation_gamma(config: SimulationConfig, spec: HypothesisSpec) -> np.ndarray:
    """gamma0 in V, shifted by P u_star * scale / sqrt(N) when an effect is configured."""
    r = config.n_parameters
    gamma = np.zeros(r) if config.gamma is None else np.asarray(config.gamma, dtype=float)
    if gamma.shape != (r,):
        raise DimensionError(f"simulation gamma has {gamma.size} entries, design has {r}")
    check_feasible(gamma, spec, include_cone=False)
    if config.effect is not None:
        direction = np.asarray(config.effect.direction, dtype=float)
        if direction.shape != (spec.d,):
            raise DimensionError(f"effect direction must be a {spec.d}-vector")
        if not spec.contains_direction(direction):
            raise ConstraintError("effect direction lies outside the cone N", {"direction": direction.tolist()})
        gamma = gamma + spec.constraint_basis @ direction * config.effect.scale / np.sqrt(config.n_subjects)
    return gamma


def calibration_study(
    config: SimulationConfig,
    seed: int = 0,
    jobs: int = 1,
    spec: Optional[HypothesisSpec] = None,
    solver: Optional[SolverOptions] = None,
    test: Optional[TestConfig] = None,
    quadrature: Optional[QuadratureConfig] = None,
) -> CalibrationSummary:
    """Simulate datasets, run the full test on each and compare with the chi-bar tails."""
    if config.replicates < MIN_REPLICATES:
        raise ConfigError(
            f"calibration needs at least {MIN_REPLICATES} replicates, got {config.replicates}",
            detail={"replicates": config.replicates},
        )
    spec = spec or order_cone(config.groups, config.covariates_per_group)
    if spec.r != config.n_parameters:
        raise ConfigError(f"hypothesis has r={spec.r}, simulated design has r={config.n_parameters}")
    test = (test or TestConfig()).model_copy(update={"weight_route": config.weight_route})
    gamma = simulation_gamma(config, spec)

    indices = list(range(config.replicates))
    tasks = [
        _Task(
            config=config,
            gamma=gamma.tolist(),
            spec=spec,
            solver=solver or SolverOptions(),
            test=test,
            quadrature=quadrature or QuadratureConfig(),
            seed=seed,
            indices=indices[start : start + config.chunk_size],
        )
        for start in range(0, config.replicates, config.chunk_size)
    ]
    logger.info(f"Calibration: {config.replicates} replicates, N={config.n_subjects}, {jobs} worker(s)")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            blocks = list(executor.map(_run_block, tasks))
    else:
        blocks = [_run_block(task) for task in tasks]
    outcomes = sorted((outcome for block in blocks for outcome in block), key=lambda outcome: outcome.index)

    s_n = np.array([outcome.s_n for outcome in outcomes])
    p_values = np.array([outcome.p_value for outcome in outcomes])
    p_values_star = np.array([outcome.p_value_star for outcome in outcomes])
    counts = {f"{alpha:g}": int((p_values < alpha).sum()) for alpha in config.alphas}
    empirical = [float((s_n >= c).mean()) for c in config.tail_points]
    analytic = np.mean([outcome.analytic_tails for outcome in outcomes], axis=0).tolist()
    deviation = float(np.max(np.abs(np.array(empirical) - np.array(analytic)))) if empirical else 0.0

    summary = CalibrationSummary(
        replicates=config.replicates,
        n_subjects=config.n_subjects,
        effect_scale=0.0 if config.effect is None else config.effect.scale,
        rejection_counts=counts,
        rejection_rates={key: value / config.replicates for key, value in counts.items()},
        rejection_rates_star={f"{alpha:g}": float((p_values_star < alpha).mean()) for alpha in config.alphas},
        tail_points=list(config.tail_points),
        empirical_tails=empirical,
        analytic_tails=analytic,
        max_tail_deviation=deviation,
        median_projection_diag=float(np.median([outcome.projection_diag for outcome in outcomes])),
    )
    logger.info(f"Calibration rejection rates: {summary.rejection_rates}, max tail deviation {deviation:.4f}")
    return summary
