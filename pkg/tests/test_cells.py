import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnfp.cells import (
    CellTable,
    InvalidInputError,
    UnitRecord,
    build_cell_table,
    normalize_weights,
    read_records_csv,
)

weights_st = st.lists(st.floats(0.01, 100.0), min_size=1, max_size=40)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_weights([1, 1, 1, 1]), [1, 1, 1, 1])
    np.testing.assert_allclose(normalize_weights([2, 4]), [2 / 3, 4 / 3], rtol=1e-15)


@given(weights_st)
def test_normalize_mean_one(w):
    assert abs(np.mean(normalize_weights(w)) - 1.0) < 1e-12


@pytest.mark.parametrize("bad", [[], [1.0, 0.0], [1.0, -2.0], [np.nan]])
def test_normalize_rejects(bad):
    with pytest.raises(InvalidInputError):
        normalize_weights(bad)


def test_build_continuous_example():
    recs = [UnitRecord(1, 0.5), UnitRecord(1, 1.5), UnitRecord(2, 3.0)]
    ct = build_cell_table(recs, "continuous", normalize=False)
    assert ct.J == 2
    np.testing.assert_array_equal(ct.w, [1, 2])
    np.testing.assert_array_equal(ct.n, [2, 1])
    np.testing.assert_array_equal(ct.ybar, [1.0, 3.0])
    np.testing.assert_array_equal(ct.s2, [0.5, 0.0])
    np.testing.assert_array_equal(ct.x, np.log([1, 2]))


def test_build_binary_example():
    ct = build_cell_table([UnitRecord(1, 1), UnitRecord(1, 0), UnitRecord(1, 1)], "binary")
    assert ct.J == 1
    assert ct.n.tolist() == [3]
    assert ct.ycount.tolist() == [2]


def test_distinct_weights_are_singletons():
    ct = CellTable.from_arrays([3.0, 1.0, 2.0], [1.0, 2.0, 3.0], "continuous")
    assert ct.n.tolist() == [1, 1, 1]
    assert np.all(ct.s2 == 0)
    assert np.all(np.diff(ct.w) > 0)


def test_bad_outcomes():
    with pytest.raises(InvalidInputError):
        CellTable.from_arrays([1, 2], [0, 2], "binary")
    with pytest.raises(InvalidInputError):
        UnitRecord(0.0, 1.0)
    with pytest.raises(InvalidInputError):
        CellTable.from_arrays([1, 2], [0, 1], "ordinal")


def test_tolerance_grouping():
    w = [1.0, 1.0 + 1e-12, 2.0]
    assert CellTable.from_arrays(w, [0, 1, 2], "continuous").J == 3
    assert CellTable.from_arrays(w, [0, 1, 2], "continuous", rel_tol=1e-9).J == 2


def test_table_is_immutable():
    ct = CellTable.from_arrays([1, 2], [0.0, 1.0], "continuous")
    with pytest.raises(ValueError):
        ct.ybar[0] = 5.0


@settings(max_examples=60)
@given(st.data())
def test_sufficient_statistics_and_permutation(data):
    n = data.draw(st.integers(1, 40))
    levels = data.draw(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=6, unique=True))
    w = np.array(data.draw(st.lists(st.sampled_from(levels), min_size=n, max_size=n)))
    y = np.array(data.draw(st.lists(st.floats(-50, 50), min_size=n, max_size=n)))
    ct = CellTable.from_arrays(w, y, "continuous", normalize=False)
    assert ct.n_total == n
    assert abs(np.sum(ct.n * ct.ybar) - y.sum()) < 1e-10 * max(1.0, np.abs(y).sum())
    _, idx = np.unique(w, return_inverse=True)
    direct = np.sum((y - ct.ybar[idx]) ** 2)
    assert abs(ct.s2.sum() - direct) < 1e-10 * max(1.0, direct)
    assert np.all(ct.s2 >= 0)
    perm = data.draw(st.permutations(range(n)))
    ct2 = CellTable.from_arrays(w[perm], y[perm], "continuous", normalize=False)
    np.testing.assert_array_equal(ct.w, ct2.w)
    np.testing.assert_array_equal(ct.n, ct2.n)
    np.testing.assert_allclose(ct.ybar, ct2.ybar, rtol=1e-12, atol=1e-12)


@given(st.lists(st.tuples(st.sampled_from([0.5, 1.0, 3.0]), st.integers(0, 1)), min_size=1, max_size=30))
def test_binary_counts(rows):
    ct = build_cell_table([UnitRecord(w, y) for w, y in rows], "binary")
    assert ct.ycount.sum() == sum(y for _, y in rows)
    assert np.all((0 <= ct.ycount) & (ct.ycount <= ct.n))


def test_read_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("weight,outcome\n1,0.5\n2,1.5\n")
    recs = read_records_csv(p)
    assert recs == [UnitRecord(1.0, 0.5), UnitRecord(2.0, 1.5)]


@pytest.mark.parametrize(
    "body,line",
    [
        ("weight,outcome\n1,0\n2\n", 3),
        ("weight,outcome\n1,0\nx,1\n", 3),
        ("weight,outcome\n1,0\n1,1\n-1,0\n", 4),
        ("weight,outcome\n1,\n", 2),
    ],
)
def test_read_csv_line_errors(tmp_path, body, line):
    p = tmp_path / "d.csv"
    p.write_text(body)
    with pytest.raises(InvalidInputError, match=f":{line}:"):
        read_records_csv(p)


def test_read_csv_binary_check(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("weight,outcome\n1,0\n1,0.5\n")
    with pytest.raises(InvalidInputError, match=":3:"):
        read_records_csv(p, "binary")
    p.write_text("w,y\n1,0\n")
    with pytest.raises(InvalidInputError, match=":1:"):
        read_records_csv(p)
