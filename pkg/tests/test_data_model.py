"""Tests for datasets, link functions, correlation bases and the simulator."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from app.data_model import (
    LongitudinalDataset,
    correlation_matrix,
    load_dataset,
    make_basis,
    make_link,
    simulate_dataset,
    write_dataset,
)
from app.errors import BalanceError, CovarianceError, DimensionError, DuplicateError, ParseError
from app.models import BasisKind, CorrelationKind, DatasetSchema, LinkKind, SimulationSpec


def write_csv(path, rows, header="subject,time,y,x1"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return path


class TestLoadDataset:
    """CSV ingestion."""

    def test_balanced_file(self, tmp_path):
        """Three subjects at two times with one covariate."""
        rows = ["1,1,0.5,1.0", "1,2,0.7,2.0", "2,1,1.5,1.0", "2,2,1.1,2.0", "3,1,0.2,1.0", "3,2,0.4,2.0"]
        data = load_dataset(write_csv(tmp_path / "data.csv", rows))

        assert (data.n_subjects, data.n_times, data.n_covariates) == (3, 2, 1)
        np.testing.assert_array_equal(data.responses[1], [1.5, 1.1])
        np.testing.assert_array_equal(data.covariates[:, :, 0], [[1.0, 2.0]] * 3)

    def test_subjects_keep_first_appearance_and_times_sort(self, tmp_path):
        """Subjects ordered by first appearance, times ascending within a subject."""
        rows = ["7,2,2.0,0.2", "3,1,5.0,0.5", "7,1,1.0,0.1", "3,2,6.0,0.6"]
        data = load_dataset(write_csv(tmp_path / "data.csv", rows))

        assert data.subject_ids is not None
        assert data.subject_ids.tolist() == [7, 3]
        np.testing.assert_array_equal(data.responses, [[1.0, 2.0], [5.0, 6.0]])

    def test_unbalanced_subject(self, tmp_path):
        rows = ["1,1,0.5,1.0", "1,2,0.7,2.0", "2,1,1.5,1.0", "3,1,0.2,1.0", "3,2,0.4,2.0"]
        with pytest.raises(BalanceError) as info:
            load_dataset(write_csv(tmp_path / "data.csv", rows))
        assert info.value.detail["subjects"] == [2]

    def test_subjects_at_different_times(self, tmp_path):
        """Equal counts are not enough: every subject needs the same schedule."""
        rows = ["1,1,0.5,1.0", "1,2,0.7,2.0", "2,1,1.5,1.0", "2,3,1.1,2.0"]
        with pytest.raises(BalanceError) as info:
            load_dataset(write_csv(tmp_path / "data.csv", rows))
        assert info.value.detail["subjects"] == [2]
        assert info.value.detail["times"] == [1.0, 2.0]

    def test_header_only_file(self, tmp_path):
        with pytest.raises(ParseError) as info:
            path = tmp_path / "data.csv"
            path.write_text("subject,time,y,x1\n", encoding="utf-8")
            load_dataset(path)
        assert info.value.exit_code == 3

    def test_duplicate_key(self, tmp_path):
        rows = ["1,1,0.5,1.0", "1,1,0.7,2.0", "2,1,1.5,1.0", "2,2,1.1,2.0"]
        with pytest.raises(DuplicateError):
            load_dataset(write_csv(tmp_path / "data.csv", rows))

    def test_non_numeric_cell(self, tmp_path):
        rows = ["1,1,0.5,1.0", "1,2,abc,2.0", "2,1,1.5,1.0", "2,2,1.1,2.0"]
        with pytest.raises(ParseError) as info:
            load_dataset(write_csv(tmp_path / "data.csv", rows))
        assert info.value.detail["column"] == "y"

    def test_missing_column(self, tmp_path):
        with pytest.raises(ParseError):
            load_dataset(write_csv(tmp_path / "data.csv", ["1,1,0.5"], header="subject,time,x1"))

    def test_custom_column_names(self, tmp_path):
        rows = ["1,1,0.5,1.0", "1,2,0.7,2.0", "2,1,1.5,1.0", "2,2,1.1,2.0"]
        path = write_csv(tmp_path / "data.csv", rows, header="id,visit,outcome,dose")
        data = load_dataset(path, DatasetSchema(subject="id", time="visit", response="outcome"))
        assert data.n_subjects == 2

    def test_write_then_load_round_trip(self, tmp_path):
        """write_dataset and load_dataset are inverses."""
        original = simulate_dataset(SimulationSpec(n_subjects=12, n_times=3), seed=5)
        loaded = load_dataset(write_dataset(original, tmp_path / "round.csv"))

        np.testing.assert_allclose(loaded.responses, original.responses, rtol=1e-12)
        np.testing.assert_allclose(loaded.covariates, original.covariates, rtol=1e-12)
        assert loaded.group_labels is not None and original.group_labels is not None
        np.testing.assert_array_equal(loaded.group_labels, original.group_labels)


def test_dataset_rejects_non_finite_values():
    with pytest.raises(DimensionError):
        LongitudinalDataset(responses=[[1.0], [np.nan]], covariates=[[[1.0]], [[1.0]]])


def test_dataset_is_immutable(null_data):
    with pytest.raises(ValueError):
        null_data.responses[0, 0] = 1.0


class TestMakeBasis:
    """Working-correlation bases."""

    def test_exchangeable(self):
        basis = make_basis(BasisKind.EXCHANGEABLE, 3)
        np.testing.assert_array_equal(basis.matrices[1], [[0, 1, 1], [1, 0, 1], [1, 1, 0]])

    def test_ar1(self):
        basis = make_basis(BasisKind.AR1, 3)
        np.testing.assert_array_equal(basis.matrices[1], [[0, 1, 0], [1, 0, 1], [0, 1, 0]])

    def test_independence(self):
        basis = make_basis(BasisKind.INDEPENDENCE, 5)
        assert basis.n_bases == 1
        np.testing.assert_array_equal(basis.matrices[0], np.eye(5))

    def test_single_time_point_needs_independence(self):
        with pytest.raises(DimensionError):
            make_basis(BasisKind.AR1, 1)

    @given(n=st.integers(min_value=2, max_value=20), kind=st.sampled_from([BasisKind.EXCHANGEABLE, BasisKind.AR1]))
    def test_matrices_symmetric_with_identity_first(self, n, kind):
        basis = make_basis(kind, n)
        np.testing.assert_array_equal(basis.matrices[0], np.eye(n))
        for matrix in basis.matrices:
            np.testing.assert_array_equal(matrix, matrix.T)
            assert np.isin(matrix, (0.0, 1.0)).all()


@pytest.mark.parametrize("kind", list(LinkKind))
def test_link_derivatives_match_finite_differences(kind):
    link = make_link(kind)
    eta = np.linspace(-2.0, 2.0, 41)
    step = 1e-6

    def central(function, points):
        return (function(points + step) - function(points - step)) / (2 * step)

    np.testing.assert_allclose(link.derivative(eta), central(link.evaluate, eta), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(link.second_derivative(eta), central(link.derivative, eta), rtol=1e-6, atol=1e-8)
    mu = link.evaluate(eta)
    np.testing.assert_allclose(link.variance_derivative(mu), central(link.variance, mu), rtol=1e-6, atol=1e-8)
    assert (link.variance(mu) > 0).all()
    np.testing.assert_allclose(link.link(mu), eta, atol=1e-9)


class TestSimulateDataset:
    """The null-data generator."""

    def test_pooled_mean_near_zero(self):
        spec = SimulationSpec(n_subjects=200, n_times=2, groups=1, covariates_per_group=1, gamma=[0.0, 0.0])
        data = simulate_dataset(spec, seed=7)
        assert abs(data.responses.mean()) <= 3.0 / np.sqrt(200 * 2)

    def test_deterministic_in_seed(self):
        spec = SimulationSpec(n_subjects=50)
        first, second = simulate_dataset(spec, seed=3), simulate_dataset(spec, seed=3)
        np.testing.assert_array_equal(first.responses, second.responses)
        np.testing.assert_array_equal(first.covariates, second.covariates)

    def test_invalid_correlation(self):
        with pytest.raises(CovarianceError):
            simulate_dataset(SimulationSpec(correlation=CorrelationKind.AR1, rho=1.2), seed=0)

    def test_gamma_length_checked(self):
        with pytest.raises(DimensionError):
            simulate_dataset(SimulationSpec(gamma=[1.0, 2.0]), seed=0)

    def test_group_design_layout(self):
        """Rows are [e_t, e_t x] with the mean block first."""
        data = simulate_dataset(SimulationSpec(n_subjects=6, n_times=2), seed=1)
        assert data.group_labels is not None
        for subject, group in enumerate(data.group_labels):
            row = data.covariates[subject, 0]
            assert row[:3].tolist() == [1.0 if t == group else 0.0 for t in range(3)]
            assert np.count_nonzero(row[3:]) <= 1

    @pytest.mark.slow
    def test_lag_one_correlation_converges(self):
        spec = SimulationSpec(
            n_subjects=2000, n_times=4, groups=1, gamma=[0.0, 0.0], correlation=CorrelationKind.AR1, rho=0.3
        )
        noise = simulate_dataset(spec, seed=2024).responses
        lagged = np.mean([np.corrcoef(noise[:, j], noise[:, j + 1])[0, 1] for j in range(3)])
        assert abs(lagged - 0.3) < 0.05


def test_exchangeable_correlation_bounds():
    with pytest.raises(CovarianceError):
        correlation_matrix(CorrelationKind.EXCHANGEABLE, -0.5, 4)
