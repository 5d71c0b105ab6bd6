"""Chi-bar-squared mixing weights and the mixture's tail and quantile.

``ChiBarWeights.weights[k]`` is the weight on chi^2_k, k = 0..d.
"""

import itertools
import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.stats import chi2

from app.cone_geometry import PolyhedralCone, project_cone
from app.errors import ConstraintError, DimensionError, DomainError, MatrixError, NonConvexManifoldError, WeightError
from app.manifold import MAX_TUBE_DIM, GeometricConstants, ManifoldGeometry, geometric_constants, omega
from app.models import LevelMethod, QuadratureConfig, WeightRoute

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-6
NEGATIVE_TOL = 1e-8
ACTIVITY_THRESHOLD = 1e-9
MC_CHUNK = 100_000
MAX_BATCHED_LEVELS = 8


class ChiBarWeights(BaseModel):
    """Probability vector over chi^2_0..chi^2_d."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    weights: np.ndarray
    source: WeightRoute
    mc_stderr: Optional[np.ndarray] = None
    constants: Optional[GeometricConstants] = None
    critical_radius_convex: bool = True

    @field_validator("weights", "mc_stderr", mode="before")
    @classmethod
    def coerce_vector(cls, value: object) -> object:
        if value is None:
            return None
        vector = np.array(value, dtype=float)
        vector.setflags(write=False)
        return vector

    @model_validator(mode="after")
    def check_probability(self) -> "ChiBarWeights":
        weights = self.weights
        if weights.ndim != 1 or weights.size < 2:
            raise WeightError("weights need at least the chi^2_0 and chi^2_1 entries")
        if (weights < -NEGATIVE_TOL).any() or abs(weights.sum() - 1.0) > NORMALIZATION_TOL:
            raise WeightError(
                f"weights do not form a probability vector (sum {weights.sum():.8f})",
                {"weights": weights.tolist()},
            )
        return self

    @property
    def d(self) -> int:
        return self.weights.size - 1

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "source": self.source.value,
            "weights": self.weights.tolist(),
            "stderr": None if self.mc_stderr is None else self.mc_stderr.tolist(),
            "constants": None if self.constants is None else self.constants.model_dump(),
            "critical_radius_convex": self.critical_radius_convex,
        }


def weights_closed_form_d2(phi: float) -> ChiBarWeights:
    """d = 2: (pi - phi, pi, phi) / 2 pi for a cone of opening angle phi."""
    if not 0.0 <= phi <= np.pi:
        raise DomainError(f"cone angle must lie in [0, pi], got {phi}")
    return ChiBarWeights(
        weights=np.array([(np.pi - phi) / (2 * np.pi), 0.5, phi / (2 * np.pi)]),
        source=WeightRoute.CLOSED_FORM,
    )


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _vertex_angle(apex: np.ndarray, left: np.ndarray, right: np.ndarray) -> float:
    u = left - (apex @ left) * apex
    v = right - (apex @ right) * apex
    return float(np.arccos(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1.0, 1.0)))


def spherical_weights(generators: np.ndarray, source: WeightRoute = WeightRoute.LEVEL_PROB) -> ChiBarWeights:
    """Exact weights of a simplicial cone with d <= 3 from spherical trigonometry.

    Generators are rows and may live in any ambient space of dimension >= d.
    """
    rows = _unit_rows(np.asarray(generators, dtype=float))
    d = rows.shape[0]
    if np.linalg.matrix_rank(rows) != d:
        raise ConstraintError("spherical weights need linearly independent generators")
    match d:
        case 1:
            weights = np.array([0.5, 0.5])
        case 2:
            phi = float(np.arccos(np.clip(rows[0] @ rows[1], -1.0, 1.0)))
            weights = weights_closed_form_d2(phi).weights
        case 3:
            corners = np.array([_vertex_angle(rows[i], rows[(i + 1) % 3], rows[(i + 2) % 3]) for i in range(3)])
            sides = sum(float(np.arccos(np.clip(rows[i] @ rows[j], -1.0, 1.0))) for i, j in ((0, 1), (1, 2), (0, 2)))
            top = (corners.sum() - np.pi) / (4 * np.pi)
            middle = sides / (4 * np.pi)
            low = (np.pi - corners).sum() / (4 * np.pi)
            weights = np.array([1.0 - top - middle - low, low, middle, top])
        case _:
            raise DimensionError(f"spherical weights are available for d <= 3, got d = {d}")
    return ChiBarWeights(weights=weights, source=source)


def isotonic_regression(y: np.ndarray, weights: Optional[np.ndarray] = None, decreasing: bool = True) -> np.ndarray:
    """Weighted least-squares monotone fit by pool-adjacent-violators."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if y.shape != w.shape or y.ndim != 1:
        raise DimensionError("isotonic regression needs matching 1-d values and weights")
    if (w <= 0).any():
        raise DomainError("isotonic regression weights must be positive")
    values = -y if decreasing else y

    means: list[float] = []
    totals: list[float] = []
    sizes: list[int] = []
    for value, weight in zip(values, w):
        means.append(float(value))
        totals.append(float(weight))
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            weight_sum = totals[-2] + totals[-1]
            pooled = (means[-2] * totals[-2] + means[-1] * totals[-1]) / weight_sum
            size = sizes[-2] + sizes[-1]
            del means[-1], totals[-1], sizes[-1]
            means[-1], totals[-1], sizes[-1] = pooled, weight_sum, size
    fitted = np.repeat(means, sizes)
    return -fitted if decreasing else fitted


def _batched_decreasing_fit(samples: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """min over s <= i of max over t >= i of the weighted block average Av(s, t)."""
    m = samples.shape[1]
    cum_wy = np.concatenate([np.zeros((samples.shape[0], 1)), np.cumsum(samples * weights, axis=1)], axis=1)
    cum_w = np.concatenate([[0.0], np.cumsum(weights)])
    starts, ends = np.triu_indices(m)
    averages = np.full((samples.shape[0], m, m), np.nan)
    averages[:, starts, ends] = (cum_wy[:, ends + 1] - cum_wy[:, starts]) / (cum_w[ends + 1] - cum_w[starts])
    fitted = np.empty_like(samples)
    for i in range(m):
        block = averages[:, : i + 1, i:]
        fitted[:, i] = np.nanmin(np.nanmax(block, axis=2), axis=1)
    return fitted


def _count_levels(fitted: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.abs(fitted).max(axis=1, keepdims=True))
    jumps = np.abs(np.diff(fitted, axis=1)) > ACTIVITY_THRESHOLD * scale
    return 1 + jumps.sum(axis=1)


def _order_generators(q: np.ndarray) -> np.ndarray:
    """Whitened step generators of the simple order modulo the common level."""
    m = q.size
    root = np.sqrt(1.0 / q)
    ones = root / np.linalg.norm(root)
    rows = []
    for j in range(1, m):
        step = root * (np.arange(m) < j)
        rows.append(step - (ones @ step) * ones)
    return np.array(rows)


def level_probabilities(
    m: int,
    q: np.ndarray,
    method: LevelMethod = LevelMethod.EXACT_SMALL_M,
    replicates: int = 100_000,
    seed: int = 0,
) -> ChiBarWeights:
    """P(the decreasing fit of N(0, Q) has L levels), stored at index L - 1."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 2:
        if q.shape != (m, m) or np.abs(q - np.diag(np.diag(q))).max() > 0:
            raise MatrixError("level probabilities need a diagonal covariance")
        q = np.diag(q).copy()
    if q.shape != (m,):
        raise DimensionError(f"covariance diagonal must have {m} entries")
    if (q <= 0).any() or not np.isfinite(q).all():
        raise MatrixError("covariance diagonal must be positive")

    match method:
        case LevelMethod.EXACT_SMALL_M:
            if m > 4:
                raise DimensionError(f"exact level probabilities are available for m <= 4, got m = {m}")
            return spherical_weights(_order_generators(q), WeightRoute.LEVEL_PROB)
        case LevelMethod.MONTE_CARLO:
            rng = np.random.default_rng(seed)
            precision = 1.0 / q
            counts = np.zeros(m, dtype=np.int64)
            for start in range(0, replicates, MC_CHUNK):
                size = min(MC_CHUNK, replicates - start)
                samples = rng.standard_normal((size, m)) * np.sqrt(q)
                if m <= MAX_BATCHED_LEVELS:
                    fitted = _batched_decreasing_fit(samples, precision)
                else:
                    fitted = np.array([isotonic_regression(row, precision) for row in samples])
                counts += np.bincount(_count_levels(fitted) - 1, minlength=m)
            estimates = counts / replicates
            return ChiBarWeights(
                weights=estimates,
                source=WeightRoute.LEVEL_PROB,
                mc_stderr=np.sqrt(estimates * (1.0 - estimates) / replicates),
            )


def _subsets_by_size(count: int) -> list[tuple[int, ...]]:
    return [members for size in range(count + 1) for members in itertools.combinations(range(count), size)]


def face_dimensions(samples: np.ndarray, cone: PolyhedralCone) -> np.ndarray:
    """Dimension of the face of the cone that each sample projects onto.

    Faces are scanned by generator subsets in order of size; the first subset meeting
    the optimality conditions wins.
    """
    generators = cone.generator_rows
    count = generators.shape[0]
    scale = np.maximum(1.0, np.linalg.norm(samples, axis=1))
    result = np.full(samples.shape[0], -1, dtype=np.int64)
    for members in _subsets_by_size(count):
        pending = np.flatnonzero(result < 0)
        if pending.size == 0:
            break
        chosen = generators[list(members)]
        if len(members) and np.linalg.matrix_rank(chosen) < len(members):
            continue
        block = samples[pending]
        if len(members):
            coefficients = np.linalg.lstsq(chosen.T, block.T, rcond=None)[0].T
            residual = block - coefficients @ chosen
            feasible = (coefficients > ACTIVITY_THRESHOLD * scale[pending, None]).all(axis=1)
        else:
            residual = block
            feasible = np.ones(pending.size, dtype=bool)
        dual = residual @ generators.T
        feasible &= (dual <= ACTIVITY_THRESHOLD * scale[pending, None]).all(axis=1)
        result[pending[feasible]] = len(members)

    leftover = np.flatnonzero(result < 0)
    for index in leftover:
        projected = project_cone(samples[index], cone)
        weights = np.linalg.lstsq(generators.T, projected, rcond=None)[0]
        result[index] = int(np.linalg.matrix_rank(generators[weights > ACTIVITY_THRESHOLD]))
    if leftover.size:
        logger.debug(f"{leftover.size} samples needed the active-set fallback")
    return result


def weights_monte_carlo(
    cone: PolyhedralCone, replicates: int = 100_000, seed: int = 0, chunk_size: int = MC_CHUNK
) -> ChiBarWeights:
    """Frequencies of projected face dimensions for standard normal samples in R^d."""
    if replicates < 1:
        raise DomainError("replicates must be positive")
    d = cone.dim
    counts = np.zeros(d + 1, dtype=np.int64)
    for chunk, start in enumerate(range(0, replicates, chunk_size)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, chunk]))
        samples = rng.standard_normal((min(chunk_size, replicates - start), d))
        counts += np.bincount(face_dimensions(samples, cone), minlength=d + 1)
    estimates = counts / replicates
    logger.info(f"Monte Carlo weights from {replicates} replicates: {np.round(estimates, 4).tolist()}")
    return ChiBarWeights(
        weights=estimates,
        source=WeightRoute.MONTE_CARLO,
        mc_stderr=np.sqrt(estimates * (1.0 - estimates) / replicates),
    )


def weights_tube(constants: GeometricConstants, d: int) -> ChiBarWeights:
    """Weights read off the tube-volume expansion of M = K intersect S^(d-1)."""
    if d > MAX_TUBE_DIM:
        raise DimensionError(f"the tube route is implemented for d <= {MAX_TUBE_DIM}, got d = {d}")
    if constants.d != d:
        raise DimensionError(f"constants describe d = {constants.d}, weights requested for d = {d}")
    terms = {d: constants.kappa0 / omega(d - 1)}
    if d - 1 >= 1:
        terms[d - 1] = constants.ell0 / (2.0 * omega(d - 2))
    if d - 2 >= 1:
        terms[d - 2] = (constants.kappa2 + constants.ell1 + constants.upsilon0) / (2.0 * np.pi * omega(d - 3))
    if d - 3 >= 1:
        terms[d - 3] = (constants.ell2 + constants.upsilon1 + constants.tau) / (4.0 * np.pi * omega(d - 4))

    negative = {df: value for df, value in terms.items() if value < -NEGATIVE_TOL}
    if negative:
        logger.error(f"Tube coefficients are negative: {negative}")
        raise NonConvexManifoldError(
            "tube coefficients are negative, the critical radius is below pi/2",
            {"coefficients": {str(df): value for df, value in negative.items()}},
        )
    weights = np.zeros(d + 1)
    for df, value in terms.items():
        weights[df] = max(value, 0.0)
    weights[0] = 1.0 - weights[1:].sum()
    if weights[0] < -NEGATIVE_TOL:
        raise NonConvexManifoldError("tube coefficients exceed one", {"weights": weights.tolist()})
    weights[0] = max(weights[0], 0.0)
    return ChiBarWeights(weights=weights, source=WeightRoute.TUBE, constants=constants)


def weights_tube_for_cone(
    cone: PolyhedralCone | ManifoldGeometry, quadrature: Optional[QuadratureConfig] = None
) -> ChiBarWeights:
    geom = cone if isinstance(cone, ManifoldGeometry) else ManifoldGeometry.from_cone(cone)
    return weights_tube(geometric_constants(geom, quadrature), geom.d)


def _as_weights(weights: ChiBarWeights | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(weights, ChiBarWeights):
        return weights.weights
    values = np.asarray(weights, dtype=float)
    if values.ndim != 1 or (values < -NEGATIVE_TOL).any() or abs(values.sum() - 1.0) > NORMALIZATION_TOL:
        raise WeightError("weights do not form a probability vector", {"weights": values.tolist()})
    return values


def chibar_tail(weights: ChiBarWeights | Sequence[float] | np.ndarray, c: float) -> float:
    """P(chi-bar^2 >= c) with chi^2_0 a point mass at zero."""
    values = _as_weights(weights)
    tail = float(values[0]) if c <= 0 else 0.0
    for df in range(1, values.size):
        tail += float(values[df] * chi2.sf(c, df))
    return tail


def chibar_quantile(
    weights: ChiBarWeights | Sequence[float] | np.ndarray, alpha: float, tol: float = 1e-8
) -> float:
    """Smallest c with P(chi-bar^2 >= c) <= alpha, by bisection."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    values = _as_weights(weights)
    if 1.0 - values[0] <= alpha:
        return 0.0
    high = 1.0
    while chibar_tail(values, high) > alpha:
        high *= 2.0
    low = 0.0
    while high - low > tol:
        middle = 0.5 * (low + high)
        if chibar_tail(values, middle) > alpha:
            low = middle
        else:
            high = middle
    return 0.5 * (low + high)
