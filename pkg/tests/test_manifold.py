"""Tests for the spherical-section geometry and its tube constants."""

import numpy as np
import pytest

from app.cone_geometry import PolyhedralCone, canonicalize, order_cone, orthant_cone
from app.errors import ConstraintError, DimensionError, DomainError, QuadratureError
from app.manifold import (
    ManifoldGeometry,
    geometric_constants,
    omega,
    simplex_rule,
    spherical_triangle_area,
)
from app.models import QuadratureConfig


def arc(phi: float) -> ManifoldGeometry:
    return ManifoldGeometry(generators=[[1.0, 0.0], [np.cos(phi), np.sin(phi)]])


def gauss_bonnet_gap(geom: ManifoldGeometry) -> float:
    constants = geometric_constants(geom)
    return abs(constants.kappa2 + constants.ell1 + constants.upsilon0 - (2 * np.pi - constants.kappa0))


@pytest.mark.parametrize(
    "k, expected",
    [(0, 2.0), (1, 2 * np.pi), (2, 4 * np.pi), (3, 2 * np.pi**2), (4, 8 * np.pi**2 / 3), (5, np.pi**3)],
)
def test_sphere_areas(k, expected):
    assert omega(k) == pytest.approx(expected, rel=1e-12)


def test_negative_sphere_dimension():
    with pytest.raises(DomainError):
        omega(-1)


def test_simplex_rule_integrates_area():
    for dim in (1, 2, 3):
        _, weights = simplex_rule(dim, 8)
        assert weights.sum() == pytest.approx(1.0 / np.prod(range(1, dim + 1)), rel=1e-12)


def test_spherical_triangle_area_of_octant():
    assert spherical_triangle_area(*np.eye(3)) == pytest.approx(np.pi / 2, abs=1e-12)


class TestParametrization:
    """T(rho) and its jacobian."""

    def test_unit_norm(self):
        geom = ManifoldGeometry.from_cone(orthant_cone(3))
        rho = np.random.default_rng(0).dirichlet(np.ones(3), size=50)[:, :2]
        np.testing.assert_allclose(np.linalg.norm(geom.parametrization(rho), axis=1), 1.0, rtol=1e-12)

    def test_jacobian_matches_finite_differences(self, order3):
        geom = ManifoldGeometry.from_canonical(canonicalize(order3, np.eye(6)))
        rho = np.array([[0.3]])
        step = 1e-6
        numeric = (geom.parametrization(rho + step) - geom.parametrization(rho - step)) / (2 * step)
        np.testing.assert_allclose(geom.jacobian(rho)[:, :, 0], numeric, rtol=1e-6, atol=1e-9)

    def test_jacobian_in_three_dimensions(self):
        geom = ManifoldGeometry(generators=[[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.2, 0.3, 1.0]])
        rho = np.array([[0.2, 0.5]])
        step = 1e-6
        for k in range(2):
            shift = np.zeros((1, 2))
            shift[0, k] = step
            numeric = (geom.parametrization(rho + shift) - geom.parametrization(rho - shift)) / (2 * step)
            np.testing.assert_allclose(geom.jacobian(rho)[:, :, k], numeric, rtol=1e-6, atol=1e-9)

    def test_faces_list_omitted_generators(self):
        geom = ManifoldGeometry.from_cone(orthant_cone(3))
        assert geom.faces(2) == [((0, 1), (2,)), ((0, 2), (1,)), ((1, 2), (0,))]
        assert geom.domain == "simplex of dimension 2"

    def test_requires_simplicial_cone(self):
        cone = PolyhedralCone(dim=3, generators=[[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]])
        with pytest.raises(ConstraintError):
            ManifoldGeometry.from_cone(cone)


class TestGeometricConstants:
    """Quadrature of the tube invariants."""

    @pytest.mark.parametrize("phi", [0.4, np.pi / 3, np.pi / 2, 2.0])
    def test_planar_arc(self, phi):
        constants = geometric_constants(arc(phi))
        assert constants.kappa0 == pytest.approx(phi, abs=1e-8)
        assert constants.ell0 == pytest.approx(2.0, abs=1e-12)

    def test_octant(self):
        constants = geometric_constants(ManifoldGeometry.from_cone(orthant_cone(3)))
        assert constants.kappa0 == pytest.approx(np.pi / 2, abs=1e-6)
        assert constants.ell0 == pytest.approx(3 * np.pi / 2, abs=1e-6)
        assert constants.upsilon0 == pytest.approx(3 * np.pi / 2, abs=1e-9)
        assert constants.kappa2 == pytest.approx(0.0, abs=1e-6)
        assert constants.ell1 == pytest.approx(0.0, abs=1e-6)

    def test_half_line(self):
        constants = geometric_constants(ManifoldGeometry(generators=[[1.0]]))
        assert (constants.d, constants.kappa0) == (1, 1.0)

    def test_gauss_bonnet_octant(self):
        assert gauss_bonnet_gap(ManifoldGeometry.from_cone(orthant_cone(3))) < 1e-4

    def test_gauss_bonnet_skew_cone(self):
        geom = ManifoldGeometry(generators=[[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.2, 0.3, 1.0]])
        assert gauss_bonnet_gap(geom) < 1e-4

    def test_gauss_bonnet_embedded_cone(self):
        """A three-generator cone living in a three-dimensional subspace of R^5."""
        basis = np.linalg.qr(np.random.default_rng(3).standard_normal((5, 3)))[0]
        local = np.array([[1.0, 0.2, 0.1], [0.1, 1.0, 0.3], [0.2, 0.1, 1.0]])
        assert gauss_bonnet_gap(ManifoldGeometry(generators=local @ basis.T)) < 1e-4

    def test_omega_property(self):
        constants = geometric_constants(ManifoldGeometry.from_cone(orthant_cone(3)))
        assert constants.omega == pytest.approx([2.0, 2 * np.pi, 4 * np.pi])

    def test_refinement_check(self):
        config = QuadratureConfig(nodes=8, check_nodes=2, rel_tol=1e-12)
        with pytest.raises(QuadratureError):
            geometric_constants(arc(2.5), config)

    def test_dimension_limit(self):
        with pytest.raises(DimensionError):
            geometric_constants(ManifoldGeometry.from_cone(orthant_cone(5)))

    @pytest.mark.parametrize(
        "geom",
        [
            ManifoldGeometry.from_cone(orthant_cone(3)),
            ManifoldGeometry.from_canonical(canonicalize(order_cone(4), np.eye(8))),
        ],
        ids=["octant", "order4"],
    )
    def test_doubling_nodes_changes_little(self, geom):
        coarse = geometric_constants(geom, QuadratureConfig(nodes=64, check_nodes=32))
        fine = geometric_constants(geom, QuadratureConfig(nodes=128, check_nodes=64))
        for name, value in coarse.model_dump().items():
            assert value == pytest.approx(getattr(fine, name), abs=1e-5), name
