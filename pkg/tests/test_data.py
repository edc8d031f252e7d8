import numpy as np
import pytest

from stein_select.data import generate_ppca_sim, generate_toy, ingest_csv, standardize_columns
from stein_select.errors import IngestionError
from stein_select.schemas import Decision, PpcaScenario, ToyScenario


def test_toy_generator_is_deterministic():
    a = generate_toy(ToyScenario.DS, 50, 11)
    b = generate_toy(ToyScenario.DS, 50, 11)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_toy(ToyScenario.DS, 50, 12).values)


def test_toy_ds_covariance():
    x = generate_toy(ToyScenario.DS, 40000, 0).values
    np.testing.assert_allclose(np.cov(x.T), np.diag([1.0, 0.5]), atol=0.03)


def test_ppca_sim_truth_and_shape():
    data, truth = generate_ppca_sim(PpcaScenario.A, 100, 0)
    assert data.values.shape == (100, 6)
    assert data.column_names == ["x1", "x2", "x3", "x4", "x5", "x6"]
    assert truth == [Decision.INCLUDE] * 4 + [Decision.EXCLUDE] * 2


def test_ppca_sim_scenario_a_spike_variance():
    data, _ = generate_ppca_sim(PpcaScenario.A, 40000, 1)
    x = data.values
    assert np.var(x[:, 4]) == pytest.approx(0.525, abs=0.03)
    clean = np.array([[1.0, 0.0], [-1.0, 1.0], [0.0, 1.0], [-1.0, -1.0]])
    np.testing.assert_allclose(np.cov(x[:, :4].T), clean @ clean.T + np.eye(4), atol=0.1)


def test_ppca_sim_scenario_b_marginal_correlation_vanishes():
    data, _ = generate_ppca_sim(PpcaScenario.B, 40000, 2)
    x = data.values
    assert abs(np.corrcoef(x[:, 4], x[:, 5])[0, 1]) < 0.05
    assert np.var(x[:, 5]) == pytest.approx(1.0, abs=0.05)


def test_ppca_sim_is_deterministic():
    a, _ = generate_ppca_sim(PpcaScenario.B, 30, 5)
    b, _ = generate_ppca_sim(PpcaScenario.B, 30, 5)
    np.testing.assert_array_equal(a.values, b.values)


def test_ingest_without_header(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("1,2\n3,4\n5,6\n")
    data = ingest_csv(path, standardize=False)
    np.testing.assert_array_equal(data.values, [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert data.column_names is None


def test_ingest_with_header_and_standardization(tmp_path):
    path = tmp_path / "named.csv"
    path.write_text("a,b\n1,10\n2,30\n\n3,20\n")
    data = ingest_csv(path)
    assert data.column_names == ["a", "b"]
    assert data.n == 3
    np.testing.assert_allclose(data.values.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(data.values.std(axis=0), 1.0)


@pytest.mark.parametrize(
    "content, message",
    [
        ("a,b\n1,2\n3,NaN\n", "row 3, column 2"),
        ("1,2\nx,4\n", "row 2, column 1"),
        ("1,2\n3,oops\n", "row 2, column 2"),
        ("1,2\n3\n", "Ragged row 2"),
        ("a,b\n1,2\n", "at least 2"),
        ("", "empty"),
    ],
)
def test_ingest_errors(tmp_path, content, message):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(IngestionError, match=message):
        ingest_csv(path, standardize=False)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        ingest_csv(tmp_path / "missing.csv")


def test_constant_column_cannot_be_standardized():
    with pytest.raises(IngestionError, match=r"column\(s\): b$"):
        standardize_columns(np.array([[1.0, 5.0], [2.0, 5.0]]), ["a", "b"])
