"""Hypotheses, the canonical transformation and projections onto polyhedral cones.

Conventions: generators and halfspace normals are stored as rows. A halfspace row
``a`` describes ``{x: a . x >= 0}`` (inward normal).
"""

import itertools
import json
import logging
from functools import cached_property
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.linalg import null_space, solve_triangular
from scipy.optimize import linprog

from app.errors import ConstraintError, DimensionError, MatrixError, ProjectionError

logger = logging.getLogger(__name__)

RAY_TOL = 1e-10


def _as_rows(values: Any, dim: Optional[int] = None) -> Optional[np.ndarray]:
    if values is None:
        return None
    rows = np.array(values, dtype=float)
    if rows.ndim == 1:
        rows = rows.reshape(-1, dim) if dim else rows.reshape(1, -1)
    rows.setflags(write=False)
    return rows


def _extreme_rays(normals: np.ndarray, dim: int) -> np.ndarray:
    """Generators of {x: A x >= 0} by enumerating (dim-1)-subsets of normals.

    A lineality space is returned as a +/- pair per basis vector.
    """
    normals = np.asarray(normals, dtype=float).reshape(-1, dim)
    lineality = null_space(normals) if normals.size else np.eye(dim)
    rays: list[np.ndarray] = [sign * column for column in lineality.T for sign in (1.0, -1.0)]

    complement = null_space(lineality.T) if lineality.size else np.eye(dim)
    reduced = normals @ complement
    rank = complement.shape[1]
    if rank == 0:
        return np.array(rays).reshape(-1, dim)

    scale = max(1.0, float(np.abs(reduced).max(initial=0.0)))
    candidates: list[np.ndarray] = []
    if rank == 1:
        candidates = [np.array([1.0])]
    else:
        for rows in itertools.combinations(range(reduced.shape[0]), rank - 1):
            kernel = null_space(reduced[list(rows)])
            if kernel.shape[1] == 1:
                candidates.append(kernel[:, 0])

    found: list[np.ndarray] = []
    for direction in candidates:
        for sign in (1.0, -1.0):
            ray = sign * direction
            if (reduced @ ray >= -RAY_TOL * scale).all():
                ray = complement @ ray
                ray = ray / np.linalg.norm(ray)
                if not any(np.allclose(ray, other, atol=1e-9) for other in found):
                    found.append(ray)
    rays.extend(found)
    return np.array(rays).reshape(-1, dim)


class PolyhedralCone(BaseModel):
    """Finitely generated cone with a lazily completed double description."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, ignored_types=(cached_property,))

    dim: int
    generators: Optional[np.ndarray] = None
    halfspaces: Optional[np.ndarray] = None

    @model_validator(mode="before")
    @classmethod
    def coerce_rows(cls, values: dict) -> dict:
        values = dict(values)
        dim = int(values["dim"])
        values["generators"] = _as_rows(values.get("generators"), dim)
        values["halfspaces"] = _as_rows(values.get("halfspaces"), dim)
        return values

    @model_validator(mode="after")
    def check_description(self) -> "PolyhedralCone":
        if self.generators is None and self.halfspaces is None:
            raise DimensionError("cone needs generators or halfspaces")
        for name in ("generators", "halfspaces"):
            rows = getattr(self, name)
            if rows is not None and rows.shape[1] != self.dim:
                raise DimensionError(f"{name} have width {rows.shape[1]}, cone dimension is {self.dim}")
        return self

    @classmethod
    def from_json(cls, source: Path | str | dict) -> "PolyhedralCone":
        """Read the {dim, generators, halfspaces} cone description."""
        if isinstance(source, dict):
            payload = source
        else:
            payload = json.loads(Path(source).read_text(encoding="utf-8"))
        return cls(dim=payload["dim"], generators=payload.get("generators"), halfspaces=payload.get("halfspaces"))

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "generators": self.generator_rows.tolist(),
            "halfspaces": self.halfspace_rows.tolist(),
        }

    @cached_property
    def generator_rows(self) -> np.ndarray:
        if self.generators is not None:
            return self.generators
        if self.dim > 6:
            raise DimensionError("vertex enumeration is limited to dimension 6")
        assert self.halfspaces is not None
        return _extreme_rays(self.halfspaces, self.dim)

    @cached_property
    def halfspace_rows(self) -> np.ndarray:
        if self.halfspaces is not None:
            return self.halfspaces
        if self.dim > 6:
            raise DimensionError("facet enumeration is limited to dimension 6")
        return _extreme_rays(self.generator_rows, self.dim)

    @property
    def n_generators(self) -> int:
        return self.generator_rows.shape[0]

    @property
    def is_simplicial(self) -> bool:
        rows = self.generator_rows
        return rows.shape[0] == self.dim and np.linalg.matrix_rank(rows) == self.dim

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        scale = max(1.0, float(np.linalg.norm(x)))
        return bool((self.halfspace_rows @ x >= -tol * scale).all())

    def is_pointed(self) -> bool:
        """No nonzero nonnegative combination of generators vanishes."""
        rows = self.generator_rows
        count = rows.shape[0]
        result = linprog(
            -np.ones(count), A_eq=rows.T, b_eq=np.zeros(self.dim), bounds=[(0.0, 1.0)] * count, method="highs"
        )
        return bool(result.status == 0 and -result.fun < 1e-9)


class HypothesisSpec(BaseModel):
    """H0: gamma in V against H1: gamma in V + C, with C = {P u: u in N}."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    r: int
    null_basis: np.ndarray
    constraint_basis: np.ndarray
    cone_generators: np.ndarray
    order_groups: Optional[int] = None

    @model_validator(mode="after")
    def check_bases(self) -> "HypothesisSpec":
        p, b, g = self.constraint_basis, self.null_basis, self.cone_generators
        if p.ndim != 2 or p.shape[0] != self.r or b.ndim != 2 or b.shape[0] != self.r:
            raise DimensionError(f"bases must have {self.r} rows")
        if np.linalg.matrix_rank(p) != p.shape[1]:
            raise DimensionError("constraint basis must have full column rank")
        if b.shape[1] + p.shape[1] != self.r:
            raise DimensionError("null basis and constraint basis must together span the parameter space")
        if b.shape[1] and np.abs(p.T @ b).max() > 1e-10 * max(1.0, np.abs(p).max() * np.abs(b).max()):
            raise DimensionError("constraint basis is not orthogonal to the null basis")
        if g.ndim != 2 or g.shape[1] != p.shape[1]:
            raise DimensionError(f"cone generators must be {p.shape[1]}-vectors")
        for array in (p, b, g):
            array.setflags(write=False)
        return self

    @property
    def d(self) -> int:
        return self.constraint_basis.shape[1]

    @property
    def cone(self) -> PolyhedralCone:
        """The cone N in u-coordinates."""
        return PolyhedralCone(dim=self.d, generators=self.cone_generators)

    @property
    def sum_generators(self) -> np.ndarray:
        """Generators of C in gamma-space, as columns (P v)."""
        return self.constraint_basis @ self.cone_generators.T

    def contains_direction(self, u: np.ndarray, tol: float = 1e-9) -> bool:
        return self.cone.contains(np.asarray(u, dtype=float), tol)


def order_cone(m: int, covariates_per_group: int = 1) -> HypothesisSpec:
    """Equal means against mu_1 >= ... >= mu_m, one regression block per group."""
    if m < 2:
        raise DimensionError(f"order cone needs m >= 2 groups, got {m}")
    r = m * (1 + covariates_per_group)
    d = m - 1

    contrasts = np.zeros((m, d))
    for k in range(d):
        contrasts[: k + 1, k] = 1.0
        contrasts[k + 1, k] = -(k + 1.0)
    constraint_basis = np.zeros((r, d))
    constraint_basis[:m] = contrasts

    null_basis = np.zeros((r, r - d))
    null_basis[:m, 0] = 1.0
    null_basis[m:, 1:] = np.eye(r - m)

    # centered step vectors generate {mu_1 >= ... >= mu_m} modulo the common mean
    gram = contrasts.T @ contrasts
    generators = []
    for j in range(1, m):
        step = np.where(np.arange(m) < j, 1.0, 0.0) - j / m
        u = np.linalg.solve(gram, contrasts.T @ step)
        generators.append(u / np.abs(u).max())

    return HypothesisSpec(
        r=r,
        null_basis=null_basis,
        constraint_basis=constraint_basis,
        cone_generators=np.array(generators),
        order_groups=m,
    )


def hypothesis_from_matrices(
    constraint_basis: Any, cone_generators: Any, null_basis: Optional[Any] = None
) -> HypothesisSpec:
    """Explicit hypothesis; V defaults to the orthogonal complement of col(P)."""
    p = np.array(constraint_basis, dtype=float)
    if p.ndim != 2:
        raise DimensionError("constraint basis must be a matrix")
    b = null_space(p.T) if null_basis is None else np.array(null_basis, dtype=float).reshape(p.shape[0], -1)
    return HypothesisSpec(
        r=p.shape[0], null_basis=b, constraint_basis=p, cone_generators=np.array(cone_generators, dtype=float)
    )


def orthant_cone(d: int) -> PolyhedralCone:
    return PolyhedralCone(dim=d, generators=np.eye(d), halfspaces=np.eye(d))


class CanonicalCone(BaseModel):
    """Canonical form of a hypothesis under the information matrix J.

    ``h_matrix`` is the nominal map P* [P^T J P]^-1 P^T P. ``projection_map`` sends u to
    the component of L P u orthogonal to V* = L V, which is where the limit of S_N lives;
    the cone K used for weights, angles and noncentralities is its image of N. The two
    maps agree when J = I.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    l_factor: np.ndarray
    p_star: np.ndarray
    h_matrix: np.ndarray
    projection_map: np.ndarray
    omega: np.ndarray
    generators_embedded: np.ndarray
    projection_generators: np.ndarray

    @property
    def d(self) -> int:
        return self.projection_map.shape[1]

    @property
    def r(self) -> int:
        return self.projection_map.shape[0]

    def embed(self, u: np.ndarray) -> np.ndarray:
        return self.projection_map @ np.asarray(u, dtype=float)

    def intrinsic_cone(self) -> PolyhedralCone:
        """K in orthonormal coordinates of its linear span."""
        basis, _ = np.linalg.qr(self.projection_map)
        return PolyhedralCone(dim=self.d, generators=self.projection_generators @ basis)

    def embedding_discrepancy(self) -> float:
        """Largest gap in pairwise generator angles between the nominal H-map and K."""

        def angles(rows: np.ndarray) -> np.ndarray:
            unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            return np.arccos(np.clip(unit @ unit.T, -1.0, 1.0))

        if self.generators_embedded.shape[0] < 2:
            return 0.0
        return float(np.abs(angles(self.generators_embedded) - angles(self.projection_generators)).max())


def canonicalize(spec: HypothesisSpec, j_hat: np.ndarray) -> CanonicalCone:
    """L, P*, H and Omega for the hypothesis at information matrix j_hat."""
    j_hat = np.asarray(j_hat, dtype=float)
    if j_hat.shape != (spec.r, spec.r):
        raise DimensionError(f"information matrix must be {spec.r}x{spec.r}")
    if np.abs(j_hat - j_hat.T).max() > 1e-10 * max(1.0, np.abs(j_hat).max()):
        raise MatrixError("information matrix is not symmetric")
    j_hat = 0.5 * (j_hat + j_hat.T)
    eigenvalues = np.linalg.eigvalsh(j_hat)
    if eigenvalues[0] < 1e-12 * eigenvalues[-1] or eigenvalues[-1] <= 0:
        raise MatrixError(
            "information matrix is not positive definite",
            {"min_eigenvalue": float(eigenvalues[0]), "max_eigenvalue": float(eigenvalues[-1])},
        )

    l_factor = np.linalg.cholesky(j_hat).T
    p = spec.constraint_basis
    p_star = solve_triangular(l_factor, p, trans="T", lower=False)
    ptp = p.T @ p
    h_matrix = p_star @ np.linalg.solve(p.T @ j_hat @ p, ptp)
    omega = p_star.T @ p_star
    projection_map = l_factor @ p
    star_null = l_factor @ spec.null_basis
    if star_null.shape[1]:
        q, _ = np.linalg.qr(star_null)
        projection_map = projection_map - q @ (q.T @ projection_map)
    generators = spec.cone_generators
    return CanonicalCone(
        l_factor=l_factor,
        p_star=p_star,
        h_matrix=h_matrix,
        projection_map=projection_map,
        omega=omega,
        generators_embedded=generators @ h_matrix.T,
        projection_generators=generators @ projection_map.T,
    )


def cone_angle(canon: CanonicalCone) -> float:
    """Angle between the two generators of the planar cone K."""
    if canon.d != 2 or canon.projection_generators.shape[0] != 2:
        raise DimensionError(f"cone angle needs d = 2 with two generators, got d = {canon.d}")
    first, second = canon.projection_generators
    cosine = first @ second / (np.linalg.norm(first) * np.linalg.norm(second))
    return float(np.arccos(np.clip(cosine, -1.0, 1.0)))


def decompose(z: np.ndarray, canon: CanonicalCone, spec: HypothesisSpec) -> tuple[np.ndarray, np.ndarray]:
    """Split z into its V* = L V component and the orthogonal remainder."""
    z = np.asarray(z, dtype=float)
    star_basis = canon.l_factor @ spec.null_basis
    if star_basis.shape[1] == 0:
        return np.zeros_like(z), z.copy()
    q, _ = np.linalg.qr(star_basis)
    v_component = q @ (q.T @ z)
    return v_component, z - v_component


def nnls(a: np.ndarray, b: np.ndarray, max_pivots: Optional[int] = None) -> np.ndarray:
    """Lawson-Hanson active-set solution of min ||a x - b|| subject to x >= 0.

    Entering columns are chosen by the largest positive dual, first index on ties;
    a column with zero dual never enters.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[1]
    max_pivots = max_pivots if max_pivots is not None else 50 * max(a.shape[0], 1)
    eps = np.finfo(float).eps
    tol = 10.0 * eps * max(a.shape) * max(1.0, float(np.abs(a).max(initial=0.0))) * max(1.0, float(np.abs(b).max()))

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    residual = b.copy()
    objective = float(residual @ residual)
    dual = a.T @ residual
    pivots = 0
    while True:
        entering = np.where(~passive & (dual > tol), dual, -np.inf)
        if not np.isfinite(entering).any():
            break
        if pivots >= max_pivots:
            raise ProjectionError(f"active-set projection exceeded {max_pivots} pivots", {"pivots": pivots})
        passive[int(np.argmax(entering))] = True
        pivots += 1

        while True:
            trial = np.zeros(n)
            if passive.any():
                trial[passive] = np.linalg.lstsq(a[:, passive], b, rcond=None)[0]
            blocking = passive & (trial <= 0.0)
            if not blocking.any():
                break
            if pivots >= max_pivots:
                raise ProjectionError(f"active-set projection exceeded {max_pivots} pivots", {"pivots": pivots})
            pivots += 1
            ratio = x[blocking] / (x[blocking] - trial[blocking])
            x = x + float(ratio.min()) * (trial - x)
            passive &= x > tol
            x[~passive] = 0.0
        x = trial
        residual = b - a @ x
        updated = float(residual @ residual)
        if updated >= objective * (1.0 - 1e-14):
            break
        objective = updated
        dual = a.T @ residual
    return x


def _metric_root(metric: Optional[np.ndarray], dim: int) -> np.ndarray:
    """Upper factor R with R^T R = metric."""
    if metric is None:
        return np.eye(dim)
    try:
        return np.linalg.cholesky(0.5 * (metric + metric.T)).T
    except np.linalg.LinAlgError as exc:
        logger.error(f"Projection metric is not positive definite: {exc}")
        raise MatrixError("projection metric is not positive definite") from exc


def project_sum(
    z: np.ndarray,
    subspace_basis: Optional[np.ndarray],
    generators: Optional[np.ndarray],
    metric: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Metric projection of z onto span(subspace_basis) + cone(generators).

    Both bases are given as columns.
    """
    z = np.asarray(z, dtype=float)
    dim = z.shape[0]
    root = _metric_root(metric, dim)
    basis = np.zeros((dim, 0)) if subspace_basis is None else np.asarray(subspace_basis, dtype=float)
    rays = np.zeros((dim, 0)) if generators is None else np.asarray(generators, dtype=float)

    target = root @ z
    free = root @ basis
    cone = root @ rays
    if free.shape[1]:
        q, _ = np.linalg.qr(free)
        target_res = target - q @ (q.T @ target)
        cone_res = cone - q @ (q.T @ cone)
    else:
        target_res, cone_res = target, cone

    weights = nnls(cone_res, target_res, max_pivots=50 * dim) if cone.shape[1] else np.zeros(0)
    point = rays @ weights
    if free.shape[1]:
        coefficients = np.linalg.lstsq(free, target - cone @ weights, rcond=None)[0]
        point = point + basis @ coefficients
    return point


def project_cone(z: np.ndarray, cone: PolyhedralCone, metric: Optional[np.ndarray] = None) -> np.ndarray:
    """argmin over the cone of (z - x)^T M (z - x)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (cone.dim,):
        raise DimensionError(f"point has shape {z.shape}, cone dimension is {cone.dim}")
    return project_sum(z, None, cone.generator_rows.T, metric)


def polar_cone(cone: PolyhedralCone) -> PolyhedralCone:
    """{y: <y, g> <= 0 for every generator g}."""
    normals = -cone.generator_rows
    if cone.dim <= 3:
        return PolyhedralCone(dim=cone.dim, generators=_extreme_rays(normals, cone.dim), halfspaces=normals)
    return PolyhedralCone(dim=cone.dim, halfspaces=normals)


def dykstra_projection(
    points: np.ndarray, halfspaces: np.ndarray, max_cycles: int = 50_000, tol: float = 1e-13
) -> np.ndarray:
    """Euclidean projection onto {x: A x >= 0} by Dykstra's cyclic projections.

    Vectorized over a batch of points (rows). Used as an independent check of the
    active-set projector.
    """
    x = np.array(points, dtype=float, ndmin=2)
    normals = np.asarray(halfspaces, dtype=float)
    norms = (normals**2).sum(axis=1)
    increments = np.zeros((normals.shape[0],) + x.shape)
    for cycle in range(max_cycles):
        previous = x.copy()
        for index, normal in enumerate(normals):
            shifted = x + increments[index]
            violation = np.minimum(shifted @ normal, 0.0)
            x = shifted - np.outer(violation / norms[index], normal)
            increments[index] = shifted - x
        if np.abs(x - previous).max() < tol:
            logger.debug(f"Dykstra converged after {cycle + 1} cycles")
            break
    return x


def check_feasible(point: np.ndarray, spec: HypothesisSpec, include_cone: bool = True, tol: float = 1e-8) -> None:
    """Raise ConstraintError unless gamma lies in V + C (or in V alone)."""
    projected = project_sum(point, spec.null_basis, spec.sum_generators if include_cone else None)
    gap = float(np.linalg.norm(projected - point))
    if gap > tol * max(1.0, float(np.linalg.norm(point))):
        raise ConstraintError("point lies outside the constraint set", {"distance": gap})
