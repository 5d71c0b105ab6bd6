"""Geometry of M = K intersect the unit sphere for simplicial cones K.

Faces of M come from generator subsets; each face is parametrized over a simplex by
T(rho) = y / |y| with y the convex combination of the subset's unit generators.
Integrals use collapsed Gauss-Legendre rules on the simplex.
"""

import itertools
import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import gammaln

from app.cone_geometry import CanonicalCone, PolyhedralCone
from app.errors import ConstraintError, DimensionError, DomainError, QuadratureError
from app.models import QuadratureConfig

logger = logging.getLogger(__name__)

CHUNK_POINTS = 32_768
MAX_TUBE_DIM = 4

Integrand = Callable[["FaceFrame"], np.ndarray]


def omega(k: int) -> float:
    """Surface area of the unit sphere S^k in R^(k+1)."""
    if k < 0:
        raise DomainError(f"sphere dimension must be >= 0, got {k}")
    return float(2.0 * np.exp(0.5 * (k + 1) * np.log(np.pi) - gammaln(0.5 * (k + 1))))


class FaceFrame(BaseModel):
    """Position, tangents, second derivatives and metric of a face at a batch of points."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    position: np.ndarray  # (P, r)
    tangents: np.ndarray  # (P, f, r)
    second: np.ndarray  # (P, f, f, r)
    metric: np.ndarray  # (P, f, f)

    @property
    def volume(self) -> np.ndarray:
        if self.metric.shape[1] == 0:
            return np.ones(self.position.shape[0])
        return np.sqrt(np.clip(np.linalg.det(self.metric), 0.0, None))

    @property
    def inverse_metric(self) -> np.ndarray:
        return np.linalg.inv(self.metric) if self.metric.shape[1] else self.metric


def face_frame(vertices: np.ndarray, rho: np.ndarray) -> FaceFrame:
    """Frame of the face spanned by ``vertices`` (rows) at simplex points ``rho``."""
    vertices = np.asarray(vertices, dtype=float)
    f = vertices.shape[0] - 1
    mix = np.concatenate([rho, 1.0 - rho.sum(axis=1, keepdims=True)], axis=1)
    y = mix @ vertices
    norm = np.linalg.norm(y, axis=1)
    position = y / norm[:, None]

    directions = vertices[:f] - vertices[f]
    along = position @ directions.T  # (P, f): T . y_k
    tangents = (directions[None, :, :] - position[:, None, :] * along[:, :, None]) / norm[:, None, None]
    cross = np.einsum("pld,kd->plk", tangents, directions)
    second = -(
        tangents[:, :, None, :] * along[:, None, :, None]
        + position[:, None, None, :] * cross[..., None]
        + tangents[:, None, :, :] * along[:, :, None, None]
    ) / norm[:, None, None, None]
    metric = np.einsum("pkd,pld->pkl", tangents, tangents)
    return FaceFrame(position=position, tangents=tangents, second=second, metric=metric)


class ManifoldGeometry(BaseModel):
    """M parametrized over the generator simplex, with its boundary faces."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    generators: np.ndarray  # (d, r) unit rows
    euler_characteristic: int = 1

    @field_validator("generators", mode="before")
    @classmethod
    def normalize_rows(cls, value: object) -> np.ndarray:
        rows = np.array(value, dtype=float, ndmin=2)
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        rows.setflags(write=False)
        return rows

    @model_validator(mode="after")
    def check_simplicial(self) -> "ManifoldGeometry":
        count, ambient = self.generators.shape
        if count > ambient or np.linalg.matrix_rank(self.generators) != count:
            raise ConstraintError("manifold geometry needs a simplicial cone with linearly independent generators")
        return self

    @classmethod
    def from_cone(cls, cone: PolyhedralCone) -> "ManifoldGeometry":
        if not cone.is_simplicial:
            raise ConstraintError(
                f"cone has {cone.n_generators} generators in dimension {cone.dim}; the tube route needs a simplicial cone"
            )
        return cls(generators=cone.generator_rows)

    @classmethod
    def from_canonical(cls, canon: CanonicalCone) -> "ManifoldGeometry":
        """Unit-norm cross-section of K, kept in R^r."""
        return cls(generators=canon.projection_generators)

    @property
    def d(self) -> int:
        return self.generators.shape[0]

    @property
    def domain(self) -> str:
        return f"simplex of dimension {self.d - 1}"

    def parametrization(self, rho: np.ndarray) -> np.ndarray:
        return face_frame(self.generators, np.atleast_2d(rho)).position

    def jacobian(self, rho: np.ndarray) -> np.ndarray:
        """S(rho) with columns T_1..T_(d-1), shape (P, r, d-1)."""
        return np.swapaxes(face_frame(self.generators, np.atleast_2d(rho)).tangents, 1, 2)

    def faces(self, size: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Generator subsets of the given size, each with the omitted generators."""
        indices = range(self.d)
        return [
            (members, tuple(i for i in indices if i not in members))
            for members in itertools.combinations(indices, size)
        ]

    def vertices(self, members: tuple[int, ...]) -> np.ndarray:
        return self.generators[list(members)]


class GeometricConstants(BaseModel):
    """Invariants of M entering the four-term tube expansion."""

    d: int
    kappa0: float
    kappa2: float = 0.0
    ell0: float = 0.0
    ell1: float = 0.0
    ell2: float = 0.0
    upsilon0: float = 0.0
    upsilon1: float = 0.0
    tau: float = 0.0

    @property
    def omega(self) -> list[float]:
        return [omega(k) for k in range(self.d)]


def simplex_rule(dim: int, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed tensor Gauss-Legendre rule on {rho >= 0, sum rho <= 1}."""
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    abscissae, weights = np.polynomial.legendre.leggauss(nodes)
    abscissae = 0.5 * (abscissae + 1.0)
    weights = 0.5 * weights
    grid = np.stack(np.meshgrid(*([abscissae] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    product = np.prod(np.stack(np.meshgrid(*([weights] * dim), indexing="ij"), axis=-1).reshape(-1, dim), axis=1)

    points = np.empty_like(grid)
    remaining = np.ones(grid.shape[0])
    jacobian = np.ones(grid.shape[0])
    for axis in range(dim):
        points[:, axis] = remaining * grid[:, axis]
        jacobian *= remaining
        remaining = remaining * (1.0 - grid[:, axis])
    return points, product * jacobian


def integrate_face(vertices: np.ndarray, integrand: Integrand, nodes: int) -> float:
    """Integral of ``integrand * dvol`` over one face."""
    f = np.asarray(vertices).shape[0] - 1
    points, weights = simplex_rule(f, nodes)
    total = 0.0
    for start in range(0, points.shape[0], CHUNK_POINTS):
        frame = face_frame(vertices, points[start : start + CHUNK_POINTS])
        values = integrand(frame) * frame.volume
        total += float(weights[start : start + CHUNK_POINTS] @ values)
    return total


def _checked(label: str, faces: list[tuple[np.ndarray, Integrand]], config: QuadratureConfig) -> float:
    fine = sum(integrate_face(vertices, integrand, config.nodes) for vertices, integrand in faces)
    coarse = sum(integrate_face(vertices, integrand, config.check_nodes) for vertices, integrand in faces)
    change = abs(fine - coarse)
    logger.debug(f"{label}: {fine:.10g} (refinement change {change:.3g})")
    if change > config.rel_tol * max(1.0, abs(fine)):
        logger.error(f"Quadrature for {label} moved by {change:.3g} under refinement")
        raise QuadratureError(
            f"quadrature for {label} is not converged",
            {"constant": label, "fine": fine, "coarse": coarse, "nodes": config.nodes},
        )
    return fine


def inward_normal(face: np.ndarray, omitted: np.ndarray) -> np.ndarray:
    """Unit normal to span(face), pointing toward the omitted generator."""
    q, _ = np.linalg.qr(face.T)
    normal = omitted - q @ (q.T @ omitted)
    return normal / np.linalg.norm(normal)


def spherical_triangle_area(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    """Angle excess of the spherical triangle with unit vertices a, b, c."""

    def corner(apex: np.ndarray, left: np.ndarray, right: np.ndarray) -> float:
        u = left - (apex @ left) * apex
        v = right - (apex @ right) * apex
        return float(np.arccos(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1.0, 1.0)))

    return corner(a, b, c) + corner(b, c, a) + corner(c, a, b) - np.pi


def _ones(frame: FaceFrame) -> np.ndarray:
    return np.ones(frame.position.shape[0])


def _curvature_integrand(frame: FaceFrame) -> np.ndarray:
    """Upsilon = |H|^2 - |II|^2 with II the part of d_k T_l normal to M inside the sphere."""
    p, f, r = frame.tangents.shape
    if f == 0:
        return np.zeros(p)
    inverse = frame.inverse_metric
    tangent_projector = np.einsum("pkd,pkl,ple->pde", frame.tangents, inverse, frame.tangents)
    radial = np.einsum("pd,pe->pde", frame.position, frame.position)
    normal_projector = np.eye(r)[None] - tangent_projector - radial
    form = np.einsum("pde,pkle->pkld", normal_projector, frame.second)
    mean = np.einsum("pkl,pkld->pd", inverse, form)
    squared = np.einsum("pka,plb,pkld,pabd->p", inverse, inverse, form, form)
    return (mean**2).sum(axis=1) - squared


def _shape_operator(frame: FaceFrame, normal: np.ndarray) -> np.ndarray:
    """G^-1 <d_k T_l, B> for a face with unit normal field B."""
    form = np.einsum("pkld,d->pkl", frame.second, normal)
    return np.einsum("pka,pal->pkl", frame.inverse_metric, form)


def _boundary_rotation(normal: np.ndarray) -> Integrand:
    def integrand(frame: FaceFrame) -> np.ndarray:
        return -np.trace(_shape_operator(frame, normal), axis1=1, axis2=2)

    return integrand


def _boundary_curvature(normal: np.ndarray) -> Integrand:
    def integrand(frame: FaceFrame) -> np.ndarray:
        shape = _shape_operator(frame, normal)
        trace = np.trace(shape, axis1=1, axis2=2)
        return 0.5 * (trace**2 - np.einsum("pkl,plk->p", shape, shape))

    return integrand


def _constant(value: float) -> Integrand:
    def integrand(frame: FaceFrame) -> np.ndarray:
        return np.full(frame.position.shape[0], value)

    return integrand


def _edge_rotation(angle: float, bisector: np.ndarray) -> Integrand:
    def integrand(frame: FaceFrame) -> np.ndarray:
        if frame.tangents.shape[1] == 0:
            return np.zeros(frame.position.shape[0])
        return -angle * np.einsum("pkl,pkld,d->p", frame.inverse_metric, frame.second, bisector)

    return integrand


def geometric_constants(geom: ManifoldGeometry, quadrature: Optional[QuadratureConfig] = None) -> GeometricConstants:
    """kappa0, kappa2 over M; ell0..ell2 over facets; upsilon0, upsilon1 over edges; tau at corners.

    The normal field B on a facet is the unit normal to the facet's span pointing
    toward the omitted generator; it is constant on each facet of a polyhedral M.
    """
    config = quadrature or QuadratureConfig()
    d = geom.d
    if d > MAX_TUBE_DIM:
        raise DimensionError(f"geometric constants are implemented for d <= {MAX_TUBE_DIM}, got d = {d}")
    if d == 1:
        return GeometricConstants(d=1, kappa0=1.0)

    interior = geom.generators
    kappa0 = _checked("kappa0", [(interior, _ones)], config)
    kappa2 = _checked("kappa2", [(interior, _curvature_integrand)], config) if d >= 3 else 0.0

    facets = []
    rotations = []
    curvatures = []
    for members, (omitted,) in geom.faces(d - 1):
        vertices = geom.vertices(members)
        normal = inward_normal(vertices, geom.generators[omitted])
        facets.append((vertices, _ones))
        rotations.append((vertices, _boundary_rotation(normal)))
        curvatures.append((vertices, _boundary_curvature(normal)))
    ell0 = _checked("ell0", facets, config)
    ell1 = _checked("ell1", rotations, config) if d >= 3 else 0.0
    ell2 = _checked("ell2", curvatures, config) if d >= 4 else 0.0

    upsilon0 = upsilon1 = tau = 0.0
    if d >= 3:
        angles = []
        edge_rotations = []
        for members, (first, second) in geom.faces(d - 2):
            vertices = geom.vertices(members)
            normal_a = inward_normal(geom.vertices(members + (second,)), geom.generators[first])
            normal_b = inward_normal(geom.vertices(members + (first,)), geom.generators[second])
            angle = float(np.arccos(np.clip(normal_a @ normal_b, -1.0, 1.0)))
            bisector = (normal_a + normal_b) / np.linalg.norm(normal_a + normal_b)
            angles.append((vertices, _constant(angle)))
            edge_rotations.append((vertices, _edge_rotation(angle, bisector)))
        upsilon0 = _checked("upsilon0", angles, config)
        upsilon1 = _checked("upsilon1", edge_rotations, config) if d >= 4 else 0.0

    if d >= 4:
        for members, others in geom.faces(d - 3):
            normals = [
                inward_normal(geom.vertices(members + tuple(o for o in others if o != omitted)), geom.generators[omitted])
                for omitted in others
            ]
            tau += spherical_triangle_area(*normals)

    constants = GeometricConstants(
        d=d,
        kappa0=kappa0,
        kappa2=kappa2,
        ell0=ell0,
        ell1=ell1,
        ell2=ell2,
        upsilon0=upsilon0,
        upsilon1=upsilon1,
        tau=tau,
    )
    logger.debug(f"Geometric constants for d={d}: {constants.model_dump()}")
    return constants
