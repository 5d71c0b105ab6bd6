from typing import Generator

import pytest

from app import database
from app.cone_geometry import HypothesisSpec, order_cone
from app.data_model import CorrelationBasis, LinkFunction, LongitudinalDataset, make_basis, make_link, simulate_dataset
from app.models import BasisKind, LinkKind, SimulationSpec

# gamma0 in V: equal group means, free per-group slopes
NULL_GAMMA = [0.5, 0.5, 0.5, 1.0, -0.5, 0.25]
ORDERED_GAMMA = [1.0, 0.5, 0.0, 1.0, -0.5, 0.25]


@pytest.fixture(scope="session")
def order3() -> HypothesisSpec:
    return order_cone(3)


@pytest.fixture(scope="session")
def identity_link() -> LinkFunction:
    return make_link(LinkKind.IDENTITY)


@pytest.fixture(scope="session")
def exchangeable4() -> CorrelationBasis:
    return make_basis(BasisKind.EXCHANGEABLE, 4)


@pytest.fixture(scope="session")
def null_data() -> LongitudinalDataset:
    """Three groups with equal means, N=300, n=4, exchangeable rho=0.3."""
    return simulate_dataset(SimulationSpec(n_subjects=300, gamma=NULL_GAMMA), seed=42)


@pytest.fixture(scope="session")
def ordered_data() -> LongitudinalDataset:
    """Group means 1 > 0.5 > 0, far apart relative to their standard errors."""
    return simulate_dataset(SimulationSpec(n_subjects=300, gamma=ORDERED_GAMMA), seed=11)


@pytest.fixture()
def new_db(tmp_path) -> Generator[None, None, None]:
    """Point the run registry at a fresh SQLite file for each test."""
    database.configure(f"sqlite:///{tmp_path / 'runs.db'}")
    database.reset_db()
    yield
    database.reset_db()
