import numpy as np
import pandas as pd
import pytest

from zipln.errors import ConfigurationError, DataError, MalformedInputError
from zipln.io import (
    RunManifest,
    design_matrix,
    pca_project,
    prevalence_filter,
    read_count_table,
    read_matrix,
    read_table,
    total_count_offsets,
    write_matrix,
)


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_read_count_table(tmp_path):
    path = _write(tmp_path, "counts.csv", "id,a,b\ns1,0,3\ns2,5,0\n")
    frame = read_count_table(path)
    assert list(frame.index) == ["s1", "s2"]
    assert frame.to_numpy().tolist() == [[0, 3], [5, 0]]


@pytest.mark.parametrize(
    "body, line, reason",
    [
        ("s1,1,2\ns2,x,3\n", 3, "not a number"),
        ("s1,1.5,2\n", 2, "not an integer"),
        ("s1,1,2\ns2,3,4\ns3,-1,0\n", 4, "negative count"),
        ("s1,1,2\ns1,3,4\n", 3, "duplicate id"),
    ],
)
def test_malformed_counts_report_line(tmp_path, body, line, reason):
    path = _write(tmp_path, "counts.csv", "id,a,b\n" + body)
    with pytest.raises(MalformedInputError) as exc:
        read_count_table(path)
    assert exc.value.line == line
    assert reason in str(exc.value)
    assert exc.value.exit_code == 4


def test_missing_file_is_malformed(tmp_path):
    with pytest.raises(MalformedInputError):
        read_count_table(str(tmp_path / "nope.csv"))


def test_matrix_round_trip_keeps_all_digits(tmp_path, rng):
    values = rng.normal(size=(3, 4)) * 1e-3
    path = str(tmp_path / "m.csv")
    write_matrix(path, values, index=["a", "b", "c"], columns=list("wxyz"))
    back = read_matrix(path)
    np.testing.assert_array_equal(back.to_numpy(), values)
    assert list(back.index) == ["a", "b", "c"]


def test_matrix_round_trip_is_bit_exact_on_a_large_matrix(tmp_path, rng):
    values = rng.normal(size=(50, 50))
    path = str(tmp_path / "big.csv")
    write_matrix(path, values)
    back = read_matrix(path).to_numpy()
    assert np.count_nonzero(back != values) == 0


def test_read_table_aligns_on_ids(tmp_path):
    path = _write(tmp_path, "cov.csv", "id,site\ns2,B\ns1,A\n")
    frame = read_table(path, ["s1", "s2"])
    assert frame["site"].tolist() == ["A", "B"]
    with pytest.raises(MalformedInputError):
        read_table(path, ["s3"])


def _covariates():
    return pd.DataFrame({"site": ["A", "B", "C", "A"], "depth": ["1.0", "2.0", "0.5", "4.0"],
                         "season": ["w", "s", "s", "w"]})


def test_design_matrix_one_hot_drops_first_level_with_intercept():
    X, names = design_matrix(_covariates(), "site + depth", intercept=True)
    assert names == ["site=B", "site=C", "depth"]
    np.testing.assert_array_equal(X[:, 0], [0, 1, 0, 0])
    np.testing.assert_array_equal(X[:, 2], [1.0, 2.0, 0.5, 4.0])


def test_design_matrix_keeps_all_levels_without_intercept():
    X, names = design_matrix(_covariates(), "site + season", intercept=False)
    assert names[:3] == ["site=A", "site=B", "site=C"]
    # the second categorical term loses its first level
    assert names[3:] == ["season=w"]
    np.testing.assert_array_equal(X[:, :3].sum(axis=1), np.ones(4))


def test_design_matrix_interactions():
    X, names = design_matrix(_covariates(), "depth:depth", intercept=True)
    np.testing.assert_array_equal(X[:, 0], [1.0, 4.0, 0.25, 16.0])
    _, names = design_matrix(_covariates(), "site:season", intercept=False)
    assert "site:season=A:w" in names
    with pytest.raises(ConfigurationError):
        design_matrix(_covariates(), "site:depth", intercept=True)
    with pytest.raises(ConfigurationError):
        design_matrix(_covariates(), "altitude", intercept=True)


def test_total_count_offsets():
    O = total_count_offsets(np.array([[1, 3], [2, 6]]))
    np.testing.assert_allclose(O, np.log([[4, 4], [8, 8]]))
    with pytest.raises(DataError):
        total_count_offsets(np.array([[0, 0], [1, 1]]))


def test_prevalence_filter():
    counts = pd.DataFrame({"a": [0, 0, 0, 1], "b": [1, 2, 0, 3], "c": [1, 1, 1, 1]})
    assert list(prevalence_filter(counts, 0.5).columns) == ["b", "c"]
    assert list(prevalence_filter(counts, 0.0).columns) == ["a", "b", "c"]
    with pytest.raises(ConfigurationError):
        prevalence_filter(counts, 1.5)


def test_manifest_round_trip(tmp_path):
    manifest = RunManifest(command="fit", argv=["fit", "counts.csv", "--zi", "nd"],
                           inputs={"counts": "counts.csv"}, zi={"variant": "nd"}, out_dir=str(tmp_path),
                           seed=7, fingerprint="abc")
    path = manifest.save()
    loaded = RunManifest.load(str(tmp_path))
    assert loaded == manifest
    assert RunManifest.load(path).argv == manifest.argv


def test_pca_full_rank_reconstructs(rng):
    M = rng.normal(size=(20, 4))
    proj = pca_project(M, 4)
    centered = M - M.mean(axis=0)
    np.testing.assert_allclose(proj.scores @ proj.loadings.T, centered, atol=1e-10)
    assert proj.explained.sum() == pytest.approx(1.0)
    assert np.all(np.diff(proj.explained) <= 0)


def test_pca_rank_one_explains_everything(rng):
    M = np.outer(rng.normal(size=10), [1.0, -2.0, 0.5])
    proj = pca_project(M, 1)
    assert proj.explained[0] == pytest.approx(1.0)


def test_pca_truncates_to_rank(rng, caplog):
    M = np.outer(rng.normal(size=10), [1.0, 2.0, 3.0])
    proj = pca_project(M, 3)
    assert proj.k == 1 and proj.scores.shape == (10, 1)
    assert "truncating" in caplog.text
    with pytest.raises(ConfigurationError):
        pca_project(M, 0)
