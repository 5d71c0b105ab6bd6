"""Extended scores, the quadratic inference function and its three constrained minimizers."""

import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.cone_geometry import HypothesisSpec, check_feasible, project_sum
from app.data_model import CorrelationBasis, LinkFunction, LongitudinalDataset
from app.errors import ConstraintError, ConvergenceError, DimensionError, VarianceError
from app.models import ConstraintKind, SolverOptions

logger = logging.getLogger(__name__)

PINV_CUTOFF = 1e-10
# accept a stalled line search only this close to stationarity
NUMERICAL_FLOOR = 1e-6


class ScoreState(BaseModel):
    """Extended scores and their moments at one gamma."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gamma: np.ndarray
    subject_scores: np.ndarray
    mean_score: np.ndarray
    second_moment: np.ndarray
    mean_score_jacobian: np.ndarray
    marginal_variances: np.ndarray

    @property
    def n_subjects(self) -> int:
        return self.subject_scores.shape[0]


class ConstrainedFit(BaseModel):
    """Minimizer of Q_N over one constraint set."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    constraint: ConstraintKind
    gamma: np.ndarray
    q_value: float
    iterations: int
    stationarity: float
    at_numerical_floor: bool = False


class QifFit(BaseModel):
    """The unrestricted, cone and null fits plus the information matrix at gamma_hat."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gamma_hat: np.ndarray
    gamma_tilde: np.ndarray
    gamma_bar: np.ndarray
    j_hat: np.ndarray
    cov_hat: np.ndarray
    n_subjects: int
    convergence: dict[ConstraintKind, ConstrainedFit]

    @property
    def q_values(self) -> tuple[float, float, float]:
        """Q_N at (gamma_hat, gamma_tilde, gamma_bar)."""
        return (
            self.convergence[ConstraintKind.UNRESTRICTED].q_value,
            self.convergence[ConstraintKind.CONE].q_value,
            self.convergence[ConstraintKind.NULL_SPACE].q_value,
        )

    def summary(self) -> dict:
        return {
            "gamma_hat": self.gamma_hat.tolist(),
            "gamma_tilde": self.gamma_tilde.tolist(),
            "gamma_bar": self.gamma_bar.tolist(),
            "q_values": list(self.q_values),
            "j_hat": self.j_hat.tolist(),
            "cov_hat": self.cov_hat.tolist(),
            "n_subjects": self.n_subjects,
            "iterations": {kind.value: result.iterations for kind, result in self.convergence.items()},
        }


def weight_matrix(second_moment: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Moore-Penrose inverse of C_N (eigenvalues below 1e-10 * max dropped), or (C_N + ridge I)^-1."""
    sym = 0.5 * (second_moment + second_moment.T)
    if ridge > 0:
        return np.linalg.inv(sym + ridge * np.eye(sym.shape[0]))
    eigenvalues, eigenvectors = np.linalg.eigh(sym)
    top = eigenvalues[-1]
    if top <= 0:
        return np.zeros_like(sym)
    keep = eigenvalues > PINV_CUTOFF * top
    return (eigenvectors[:, keep] / eigenvalues[keep]) @ eigenvectors[:, keep].T


class _ScoreModel:
    """Vectorized evaluation of g_i(gamma) and weighted sums of its jacobians."""

    def __init__(self, data: LongitudinalDataset, link: LinkFunction, basis: CorrelationBasis):
        if basis.n_times != data.n_times:
            raise DimensionError(f"basis is {basis.n_times}x{basis.n_times}, data has n={data.n_times}")
        self.x = data.covariates
        self.y = data.responses
        self.m = basis.matrices
        self.link = link
        self.n_subjects = data.n_subjects
        self.r = data.n_covariates

    def _pieces(self, gamma: np.ndarray) -> dict[str, np.ndarray]:
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape != (self.r,):
            raise DimensionError(f"gamma has shape {gamma.shape}, expected ({self.r},)")
        eta = self.x @ gamma
        mu = self.link.evaluate(eta)
        variances = self.link.variance(mu)
        bad = ~np.isfinite(variances) | (variances <= 0)
        if bad.any():
            subject, time = (int(v) for v in np.argwhere(bad)[0])
            raise VarianceError(
                f"marginal variance is not positive at subject {subject}, time {time}",
                {"subject": subject, "time": time, "gamma": gamma.tolist()},
            )
        scale = variances**-0.5
        dh = self.link.derivative(eta)
        residual = self.y - mu
        return {
            "eta": eta,
            "mu": mu,
            "v": variances,
            "a": scale,
            "dh": dh,
            "u": dh * scale,
            "b": scale * residual,
            "residual": residual,
        }

    def scores(self, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Subject scores (N x s*r), stacked block by block, and the marginal variances."""
        parts = self._pieces(gamma)
        mb = np.einsum("lnk,ik->iln", self.m, parts["b"])
        g = np.einsum("inr,in,iln->ilr", self.x, parts["u"], mb, optimize=True)
        return g.reshape(self.n_subjects, -1), parts["v"]

    def weighted_jacobian(self, gamma: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """sum_i weights_i * d g_i / d gamma, shape (s*r, r)."""
        parts = self._pieces(gamma)
        a, dh = parts["a"], parts["dh"]
        dv = self.link.variance_derivative(parts["mu"])
        d2h = self.link.second_derivative(parts["eta"])
        du = d2h * a - 0.5 * dh**2 * dv * a**3
        db = -0.5 * a**3 * dv * dh * parts["residual"] - a * dh

        mb = np.einsum("lnk,ik->iln", self.m, parts["b"])
        outer = np.einsum("i,inr,in,iln,inq->lrq", weights, self.x, du, mb, self.x, optimize=True)
        mxb = np.einsum("lnk,ik,ikq->ilnq", self.m, db, self.x, optimize=True)
        inner = np.einsum("i,inr,in,ilnq->lrq", weights, self.x, parts["u"], mxb, optimize=True)
        return (outer + inner).reshape(-1, self.r)


def extended_scores(
    gamma: np.ndarray, data: LongitudinalDataset, link: LinkFunction, basis: CorrelationBasis
) -> ScoreState:
    model = _ScoreModel(data, link, basis)
    scores, variances = model.scores(gamma)
    n = model.n_subjects
    return ScoreState(
        gamma=np.asarray(gamma, dtype=float),
        subject_scores=scores,
        mean_score=scores.mean(axis=0),
        second_moment=scores.T @ scores / n,
        mean_score_jacobian=model.weighted_jacobian(gamma, np.full(n, 1.0 / n)),
        marginal_variances=variances,
    )


def qif_value(
    gamma: np.ndarray,
    data: LongitudinalDataset,
    link: LinkFunction,
    basis: CorrelationBasis,
    ridge: float = 0.0,
) -> float:
    """Q_N(gamma) = N gbar^T C_N^- gbar."""
    scores, _ = _ScoreModel(data, link, basis).scores(gamma)
    mean = scores.mean(axis=0)
    weight = weight_matrix(scores.T @ scores / scores.shape[0], ridge)
    return float(scores.shape[0] * mean @ weight @ mean)


class _Objective:
    def __init__(self, model: _ScoreModel, ridge: float):
        self.model = model
        self.ridge = ridge

    def value(self, gamma: np.ndarray) -> float:
        scores, _ = self.model.scores(gamma)
        mean = scores.mean(axis=0)
        return float(scores.shape[0] * mean @ weight_matrix(scores.T @ scores / scores.shape[0], self.ridge) @ mean)

    def local_model(self, gamma: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        """Q, the half-gradient (grad Q) / 2N and the Gauss-Newton metric D^T W D."""
        scores, _ = self.model.scores(gamma)
        n = scores.shape[0]
        mean = scores.mean(axis=0)
        weight = weight_matrix(scores.T @ scores / n, self.ridge)
        w = weight @ mean
        loadings = scores @ w
        jacobian = self.model.weighted_jacobian(gamma, np.full(n, 1.0 / n))
        # the weight matrix depends on gamma through C_N
        correction = self.model.weighted_jacobian(gamma, loadings / n)
        half_gradient = jacobian.T @ w - correction.T @ w
        metric = jacobian.T @ weight @ jacobian
        return float(n * mean @ w), half_gradient, 0.5 * (metric + metric.T)


def _projector(
    constraint: ConstraintKind, hypothesis: Optional[HypothesisSpec]
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    match constraint:
        case ConstraintKind.UNRESTRICTED:
            return lambda z, metric: z
        case ConstraintKind.NULL_SPACE:
            assert hypothesis is not None
            return lambda z, metric: project_sum(z, hypothesis.null_basis, None, metric)
        case ConstraintKind.CONE:
            assert hypothesis is not None
            return lambda z, metric: project_sum(z, hypothesis.null_basis, hypothesis.sum_generators, metric)


def least_squares_start(
    data: LongitudinalDataset, link: LinkFunction, hypothesis: Optional[HypothesisSpec] = None
) -> np.ndarray:
    """Independence least squares of g(y) on X B over the null space V (or all of R^r)."""
    basis = np.eye(data.n_covariates) if hypothesis is None else hypothesis.null_basis
    design = (data.covariates @ basis).reshape(-1, basis.shape[1])
    target = link.link(data.responses).reshape(-1)
    if basis.shape[1] == 0:
        return np.zeros(data.n_covariates)
    coefficients = np.linalg.lstsq(design, target, rcond=None)[0]
    return basis @ coefficients


def _solve_metric(metric: np.ndarray, vector: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(metric, vector)
    except np.linalg.LinAlgError:
        logger.warning("Gauss-Newton metric is singular, using its pseudo-inverse")
        return np.linalg.pinv(metric) @ vector


def fit(
    data: LongitudinalDataset,
    link: LinkFunction,
    basis: CorrelationBasis,
    constraint: ConstraintKind,
    options: Optional[SolverOptions] = None,
    hypothesis: Optional[HypothesisSpec] = None,
    start: Optional[np.ndarray] = None,
) -> ConstrainedFit:
    """Minimize Q_N over R^r, V or V + C by projected Gauss-Newton with step halving."""
    options = options or SolverOptions()
    r = data.n_covariates
    if constraint != ConstraintKind.UNRESTRICTED:
        if hypothesis is None:
            raise ConstraintError(f"constraint '{constraint.value}' needs a hypothesis")
        if hypothesis.r != r:
            raise ConstraintError(
                f"hypothesis is posed in R^{hypothesis.r}, the design has r={r}",
                {"hypothesis_r": hypothesis.r, "design_r": r},
            )

    if start is None and options.start is not None:
        start = np.asarray(options.start, dtype=float)
    if start is None:
        gamma = least_squares_start(data, link, hypothesis if constraint != ConstraintKind.UNRESTRICTED else None)
    else:
        gamma = np.asarray(start, dtype=float).copy()
        if gamma.shape != (r,):
            raise DimensionError(f"start has shape {gamma.shape}, expected ({r},)")
        if constraint == ConstraintKind.NULL_SPACE:
            assert hypothesis is not None
            check_feasible(gamma, hypothesis, include_cone=False)
        elif constraint == ConstraintKind.CONE:
            assert hypothesis is not None
            check_feasible(gamma, hypothesis)

    objective = _Objective(_ScoreModel(data, link, basis), options.ridge)
    project = _projector(constraint, hypothesis)
    q = objective.value(gamma)
    stationarity = np.inf
    for iteration in range(options.max_iter):
        q, half_gradient, metric = objective.local_model(gamma)
        metric = metric + options.ridge * np.eye(r)
        target = project(gamma - _solve_metric(metric, half_gradient), metric)
        step = target - gamma
        stationarity = float(np.linalg.norm(metric @ step))
        if stationarity <= options.tol:
            logger.debug(f"{constraint.value} fit converged after {iteration} iterations, Q={q:.6g}")
            return ConstrainedFit(
                constraint=constraint, gamma=gamma, q_value=q, iterations=iteration, stationarity=stationarity
            )

        scale = 1.0
        accepted = False
        for _ in range(options.max_halvings + 1):
            candidate = gamma + scale * step
            try:
                candidate_q = objective.value(candidate)
            except VarianceError as exc:
                logger.debug(f"Step rejected, variance breakdown: {exc.message}")
                candidate_q = np.inf
            if candidate_q <= q:
                gamma, q, accepted = candidate, candidate_q, True
                break
            scale *= 0.5

        if not accepted:
            if stationarity <= NUMERICAL_FLOOR:
                logger.warning(
                    f"{constraint.value} fit stopped at the numerical floor, stationarity {stationarity:.3g}"
                )
                return ConstrainedFit(
                    constraint=constraint,
                    gamma=gamma,
                    q_value=q,
                    iterations=iteration,
                    stationarity=stationarity,
                    at_numerical_floor=True,
                )
            logger.error(f"{constraint.value} fit: line search failed at iteration {iteration}")
            raise ConvergenceError(
                f"line search failed in the {constraint.value} fit", gamma.tolist(), q, iteration
            )

    logger.error(f"{constraint.value} fit did not converge in {options.max_iter} iterations")
    raise ConvergenceError(
        f"{constraint.value} fit did not converge in {options.max_iter} iterations",
        gamma.tolist(),
        q,
        options.max_iter,
    )


def information_matrix(
    gamma: np.ndarray, data: LongitudinalDataset, link: LinkFunction, basis: CorrelationBasis, ridge: float = 0.0
) -> np.ndarray:
    """J_N = D^T C_N^- D at gamma."""
    state = extended_scores(gamma, data, link, basis)
    jacobian = state.mean_score_jacobian
    j_hat = jacobian.T @ weight_matrix(state.second_moment, ridge) @ jacobian
    return 0.5 * (j_hat + j_hat.T)


def _covariance(j_hat: np.ndarray, n_subjects: int) -> np.ndarray:
    eigenvalues = np.linalg.eigvalsh(j_hat)
    if eigenvalues[-1] > 0 and eigenvalues[0] > 1e-12 * eigenvalues[-1]:
        return np.linalg.inv(n_subjects * j_hat)
    logger.warning("Information matrix is singular, covariance uses the pseudo-inverse")
    return np.linalg.pinv(n_subjects * j_hat)


def fit_all(
    data: LongitudinalDataset,
    link: LinkFunction,
    basis: CorrelationBasis,
    hypothesis: HypothesisSpec,
    options: Optional[SolverOptions] = None,
) -> QifFit:
    """Null, cone and unrestricted fits, each started from the previous minimizer.

    Nested starts keep Q(gamma_bar) >= Q(gamma_tilde) >= Q(gamma_hat). The unrestricted
    fit is also run from the least-squares start and the lower objective wins.
    """
    options = options or SolverOptions()
    null_fit = fit(data, link, basis, ConstraintKind.NULL_SPACE, options, hypothesis)
    cone_fit = fit(data, link, basis, ConstraintKind.CONE, options, hypothesis, start=null_fit.gamma)
    free_options = options.model_copy(update={"start": None})
    unrestricted = fit(data, link, basis, ConstraintKind.UNRESTRICTED, free_options, start=cone_fit.gamma)
    try:
        restart = fit(data, link, basis, ConstraintKind.UNRESTRICTED, free_options)
        if restart.q_value < unrestricted.q_value:
            unrestricted = restart
    except ConvergenceError as exc:
        logger.info(f"Least-squares restart of the unrestricted fit did not converge: {exc.message}")

    j_hat = information_matrix(unrestricted.gamma, data, link, basis, options.ridge)
    logger.info(
        f"QIF fits: Q_hat={unrestricted.q_value:.4f}, Q_tilde={cone_fit.q_value:.4f}, Q_bar={null_fit.q_value:.4f}"
    )
    return QifFit(
        gamma_hat=unrestricted.gamma,
        gamma_tilde=cone_fit.gamma,
        gamma_bar=null_fit.gamma,
        j_hat=j_hat,
        cov_hat=_covariance(j_hat, data.n_subjects),
        n_subjects=data.n_subjects,
        convergence={
            ConstraintKind.UNRESTRICTED: unrestricted,
            ConstraintKind.CONE: cone_fit,
            ConstraintKind.NULL_SPACE: null_fit,
        },
    )


def quadratic_approx_residual(
    qif_fit: QifFit,
    gamma: np.ndarray,
    data: LongitudinalDataset,
    link: LinkFunction,
    basis: CorrelationBasis,
    frozen_weight: bool = False,
) -> float:
    """Q_N(gamma) - Q_N(gamma_hat) - N (gamma - gamma_hat)^T J_hat (gamma - gamma_hat).

    With ``frozen_weight`` the weight matrix stays at its value at gamma_hat, which makes the
    identity-link objective an exact quadratic.
    """
    gamma = np.asarray(gamma, dtype=float)
    delta = gamma - qif_fit.gamma_hat
    n = qif_fit.n_subjects
    if frozen_weight:
        model = _ScoreModel(data, link, basis)
        hat_scores, _ = model.scores(qif_fit.gamma_hat)
        weight = weight_matrix(hat_scores.T @ hat_scores / n)
        hat_mean = hat_scores.mean(axis=0)
        mean = model.scores(gamma)[0].mean(axis=0)
        q_gamma = float(n * mean @ weight @ mean)
        q_hat = float(n * hat_mean @ weight @ hat_mean)
    else:
        q_gamma = qif_value(gamma, data, link, basis)
        q_hat = qif_fit.q_values[0]
    return q_gamma - q_hat - float(n * delta @ qif_fit.j_hat @ delta)
