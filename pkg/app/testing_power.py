"""The generalized quasi-score test and its local power."""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import chi2, norm, poisson

from app.cone_geometry import (
    CanonicalCone,
    HypothesisSpec,
    canonicalize,
    cone_angle,
    project_sum,
)
from app.data_model import CorrelationBasis, LinkFunction, LongitudinalDataset
from app.errors import ConstraintError, DimensionError, DomainError
from app.manifold import MAX_TUBE_DIM, ManifoldGeometry
from app.models import LevelMethod, QuadratureConfig, SolverOptions, TestConfig, WeightRoute
from app.qif_engine import QifFit, fit_all
from app.tube_weights import (
    ChiBarWeights,
    chibar_quantile,
    chibar_tail,
    level_probabilities,
    weights_closed_form_d2,
    weights_monte_carlo,
    weights_tube_for_cone,
)

logger = logging.getLogger(__name__)

POISSON_TAIL_MASS = 1e-12
EMBEDDING_WARNING = 1e-6
PROJECTION_WARNING_RATIO = 0.1

TABLE_DELTAS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
TABLE_B1 = 5.991
TABLE_B2 = 3.820
TABLE_DF = 2


class TestResult(BaseModel):
    """Outcome of one GQS test, with the unrestricted companion statistic."""

    __test__ = False
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    s_n: float = Field(ge=0)
    s_n_star: float = Field(ge=0)
    p_value: float = Field(ge=0, le=1)
    critical_value: float
    p_value_star: float = Field(ge=0, le=1)
    critical_value_star: float
    alpha: float
    weights_used: ChiBarWeights
    fit: QifFit
    projection_diag: float
    projection_warning: bool = False
    embedding_discrepancy: float = 0.0
    s_n_quadratic: float = 0.0
    cone_angle: Optional[float] = None

    @property
    def reject(self) -> bool:
        return self.p_value < self.alpha

    @property
    def reject_star(self) -> bool:
        return self.p_value_star < self.alpha

    def summary(self) -> dict:
        return {
            "s_n": self.s_n,
            "s_n_star": self.s_n_star,
            "p_value": self.p_value,
            "critical_value": self.critical_value,
            "p_value_star": self.p_value_star,
            "critical_value_star": self.critical_value_star,
            "alpha": self.alpha,
            "reject": self.reject,
            "weights_used": self.weights_used.to_dict(),
            "projection_diag": self.projection_diag,
            "projection_warning": self.projection_warning,
            "embedding_discrepancy": self.embedding_discrepancy,
            "s_n_quadratic": self.s_n_quadratic,
            "cone_angle": self.cone_angle,
            "fit": self.fit.summary(),
        }


class PowerSpec(BaseModel):
    """Local alternative gamma0 + P u_star / sqrt(N) and the critical values it is tested at."""

    model_config = ConfigDict(frozen=True)

    delta: float = Field(ge=0)
    df: int = Field(default=TABLE_DF, ge=1)
    b1: float = Field(default=TABLE_B1, gt=0)
    b2: float = Field(default=TABLE_B2, gt=0)
    u_star: Optional[list[float]] = None

    @classmethod
    def from_direction(
        cls, canon: CanonicalCone, u_star: Sequence[float], spec: HypothesisSpec, **critical: float
    ) -> "PowerSpec":
        return cls(delta=noncentrality(canon, np.asarray(u_star), spec), df=spec.d, u_star=list(u_star), **critical)

    def check_delta(self, canon: CanonicalCone, tol: float = 1e-10) -> None:
        if self.u_star is None:
            return
        recomputed = float(np.linalg.norm(canon.embed(np.asarray(self.u_star))))
        if abs(recomputed - self.delta) > tol:
            raise DimensionError(f"stored delta {self.delta} does not match |K u_star| = {recomputed}")

    def restricted_lower_bound(self) -> float:
        return power_lower_bound(self.delta, self.b2)

    def unrestricted_exact(self) -> float:
        return power_unrestricted_exact(self.delta, self.df, self.b1)

    def unrestricted_lower_bound(self) -> float:
        return power_lower_bound(self.delta, self.b1)


class PowerRow(BaseModel):
    delta: float
    s_n_lower: float
    s_n_star_exact: float
    s_n_star_lower: float

    @model_validator(mode="after")
    def check_probabilities(self) -> "PowerRow":
        for value in (self.s_n_lower, self.s_n_star_exact, self.s_n_star_lower):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"power {value} is not a probability")
        return self


def noncentrality(canon: CanonicalCone, u_star: np.ndarray, spec: Optional[HypothesisSpec] = None) -> float:
    """delta = |K u_star|, the drift of the whitened statistic along a direction inside N."""
    u_star = np.asarray(u_star, dtype=float)
    if u_star.shape != (canon.d,):
        raise DimensionError(f"direction must be a {canon.d}-vector")
    if spec is not None and not spec.contains_direction(u_star):
        raise ConstraintError("direction lies outside the cone N", {"u_star": u_star.tolist()})
    return float(np.linalg.norm(canon.embed(u_star)))


def power_lower_bound(delta: float, b: float) -> float:
    """1 - Phi(sqrt(b) - delta)."""
    if b <= 0:
        raise DomainError(f"critical value must be positive, got {b}")
    return float(norm.sf(np.sqrt(b) - delta))


def power_unrestricted_exact(delta: float, df: int, b1: float) -> float:
    """P(chi^2_df(delta^2) >= b1) as a Poisson(delta^2 / 2) mixture of central tails."""
    if df < 1:
        raise DomainError(f"degrees of freedom must be positive, got {df}")
    if b1 <= 0:
        raise DomainError(f"critical value must be positive, got {b1}")
    rate = 0.5 * delta**2
    if rate == 0:
        return float(chi2.sf(b1, df))
    last = int(poisson.isf(POISSON_TAIL_MASS, rate)) + 1
    terms = np.arange(last + 1)
    return float(poisson.pmf(terms, rate) @ chi2.sf(b1, df + 2 * terms))


def reproduce_table1(
    delta_grid: Sequence[float] = TABLE_DELTAS, b1: float = TABLE_B1, b2: float = TABLE_B2, df: int = TABLE_DF
) -> list[PowerRow]:
    """Restricted lower bound, unrestricted exact power and unrestricted lower bound per delta."""
    return [
        PowerRow(
            delta=float(delta),
            s_n_lower=power_lower_bound(delta, b2),
            s_n_star_exact=power_unrestricted_exact(delta, df, b1),
            s_n_star_lower=power_lower_bound(delta, b1),
        )
        for delta in delta_grid
    ]


def resolve_route(route: WeightRoute, spec: HypothesisSpec, canon: CanonicalCone) -> WeightRoute:
    """Cheapest exact route first, Monte Carlo as the universal fallback."""
    if route != WeightRoute.AUTO:
        return route
    generators = spec.cone_generators
    simplicial = generators.shape[0] == spec.d and np.linalg.matrix_rank(generators) == spec.d
    if spec.d == 2 and generators.shape[0] == 2:
        return WeightRoute.CLOSED_FORM
    if spec.order_groups is not None and spec.d <= MAX_TUBE_DIM:
        return WeightRoute.LEVEL_PROB
    if simplicial and spec.d <= MAX_TUBE_DIM:
        return WeightRoute.TUBE
    return WeightRoute.MONTE_CARLO


def _level_covariance(spec: HypothesisSpec, j_hat: np.ndarray) -> np.ndarray:
    m = spec.order_groups
    assert m is not None
    block = np.linalg.inv(j_hat)[:m, :m]
    off_diagonal = np.abs(block - np.diag(np.diag(block))).max()
    if off_diagonal > 1e-8 * np.abs(block).max():
        logger.warning(f"Level-probability route drops off-diagonal mean covariance of size {off_diagonal:.3g}")
    return np.diag(block).copy()


def select_weights(
    route: WeightRoute,
    spec: HypothesisSpec,
    canon: CanonicalCone,
    j_hat: np.ndarray,
    config: Optional[TestConfig] = None,
    quadrature: Optional[QuadratureConfig] = None,
) -> ChiBarWeights:
    """Chi-bar weights for the embedded cone K by the requested route."""
    config = config or TestConfig()
    chosen = resolve_route(route, spec, canon)
    logger.info(f"Weight route: {chosen.value} (requested {route.value}), d={spec.d}")
    match chosen:
        case WeightRoute.CLOSED_FORM:
            return weights_closed_form_d2(cone_angle(canon))
        case WeightRoute.LEVEL_PROB:
            if spec.order_groups is None:
                raise ConstraintError("the level-probability route needs an order-cone hypothesis")
            m = spec.order_groups
            method = LevelMethod.EXACT_SMALL_M if m <= 4 else LevelMethod.MONTE_CARLO
            return level_probabilities(m, _level_covariance(spec, j_hat), method, config.replicates, config.mc_seed)
        case WeightRoute.TUBE:
            try:
                return weights_tube_for_cone(ManifoldGeometry.from_canonical(canon), quadrature)
            except ConstraintError as exc:
                if route != WeightRoute.AUTO:
                    raise
                logger.warning(f"Tube route unavailable ({exc.message}), falling back to Monte Carlo")
                return weights_monte_carlo(canon.intrinsic_cone(), config.replicates, config.mc_seed)
        case WeightRoute.MONTE_CARLO:
            return weights_monte_carlo(canon.intrinsic_cone(), config.replicates, config.mc_seed)
        case _:
            raise DomainError(f"unknown weight route {chosen}")


def run_test(
    data: LongitudinalDataset,
    link: LinkFunction,
    basis: CorrelationBasis,
    spec: HypothesisSpec,
    alpha: Optional[float] = None,
    weight_route: Optional[WeightRoute] = None,
    config: Optional[TestConfig] = None,
    solver: Optional[SolverOptions] = None,
    quadrature: Optional[QuadratureConfig] = None,
) -> TestResult:
    """Fit all three estimators, form S_N and S_N*, and attach weights and p-values."""
    config = config or TestConfig()
    alpha = config.alpha if alpha is None else alpha
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    route = config.weight_route if weight_route is None else weight_route

    qif_fit = fit_all(data, link, basis, spec, solver)
    canon = canonicalize(spec, qif_fit.j_hat)
    weights = select_weights(route, spec, canon, qif_fit.j_hat, config, quadrature)

    q_hat, q_tilde, q_bar = qif_fit.q_values
    s_n = max(0.0, q_bar - q_tilde)
    s_n_star = max(0.0, q_bar - q_hat)
    p_value = min(1.0, max(0.0, chibar_tail(weights, s_n)))

    j_hat = qif_fit.j_hat
    gamma_hat = qif_fit.gamma_hat
    cone_target = project_sum(gamma_hat, spec.null_basis, spec.sum_generators, j_hat)
    null_target = project_sum(gamma_hat, spec.null_basis, None, j_hat)
    projection_diag = float(np.linalg.norm(qif_fit.gamma_tilde - cone_target))
    projection_warning = projection_diag > max(PROJECTION_WARNING_RATIO * float(np.linalg.norm(gamma_hat)), 1e-8)
    if projection_warning:
        logger.warning(f"Cone fit is {projection_diag:.3g} away from the projection of the unrestricted fit")

    def j_norm(vector: np.ndarray) -> float:
        return float(vector @ j_hat @ vector)

    s_n_quadratic = qif_fit.n_subjects * (j_norm(gamma_hat - null_target) - j_norm(gamma_hat - cone_target))

    discrepancy = canon.embedding_discrepancy()
    if discrepancy > EMBEDDING_WARNING:
        logger.warning(f"Nominal H-map generator angles differ from K by {discrepancy:.3g} rad; weights use K")

    angle = cone_angle(canon) if spec.d == 2 and spec.cone_generators.shape[0] == 2 else None
    logger.info(f"S_N={s_n:.4f} (p={p_value:.4g}), S_N*={s_n_star:.4f}")
    return TestResult(
        s_n=s_n,
        s_n_star=s_n_star,
        p_value=p_value,
        critical_value=chibar_quantile(weights, alpha),
        p_value_star=float(chi2.sf(s_n_star, spec.d)),
        critical_value_star=float(chi2.isf(alpha, spec.d)),
        alpha=alpha,
        weights_used=weights,
        fit=qif_fit,
        projection_diag=projection_diag,
        projection_warning=projection_warning,
        embedding_discrepancy=discrepancy,
        s_n_quadratic=float(s_n_quadratic),
        cone_angle=angle,
    )
