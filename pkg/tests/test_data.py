import numpy as np
import pytest

from diffpmcmc.data import ingest_csv, select_rows, synth_logistic, write_csv
from diffpmcmc.errors import ValidationError


def test_ingest_order_and_intercept(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,a,b\n1,0.5,2\n0,1.5,3\n1,-2,4\n")
    d = ingest_csv(p)
    assert d.n == 3
    np.testing.assert_array_equal(d.y, [1, 0, 1])
    np.testing.assert_array_equal(d.X[:, 0], 1.0)
    np.testing.assert_array_equal(d.X[:, 1], [0.5, 1.5, -2])
    assert d.columns == ["intercept", "a", "b"]
    assert d.is_binary()
    assert ingest_csv(p, intercept=False).p == 2


def test_ingest_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y,a\n1,0.5\n0,oops\n")
    with pytest.raises(ValidationError, match="row 2.*column 'a'|column 'a'.*row 2"):
        ingest_csv(p)
    q = tmp_path / "noheader.csv"
    q.write_text("1,2\n3,4\n")
    with pytest.raises(ValidationError):
        ingest_csv(q)
    r = tmp_path / "nonbin.csv"
    r.write_text("y,a\n2,1\n0,1\n")
    with pytest.raises(ValidationError):
        ingest_csv(r, binary=True)


def test_roundtrip_exact(tmp_path):
    d = synth_logistic(500, 4, [0.1, 0.2, 0.3, 0.4], seed=1)
    p = tmp_path / "r.csv"
    write_csv(d, p)
    back = ingest_csv(p)
    np.testing.assert_array_equal(back.X, d.X)
    np.testing.assert_array_equal(back.y, d.y)


def test_synth_properties():
    d = synth_logistic(100_000, 3, [0.0, 0.0, 0.0], seed=2)
    assert abs(d.y.mean() - 0.5) < 0.01
    a, b = synth_logistic(50, 2, [1.0, 1.0], 3), synth_logistic(50, 2, [1.0, 1.0], 3)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    sparse = synth_logistic(20_000, 2, [4.5, 0.5], seed=4)
    assert sparse.y.mean() < 0.02
    with pytest.raises(ValidationError):
        synth_logistic(10, 3, [1.0], 0)


def test_select_rows():
    d = synth_logistic(200, 2, [0.0, 1.0], seed=5)
    np.testing.assert_array_equal(select_rows(d, "y==1"), np.flatnonzero(d.y == 1))
    np.testing.assert_array_equal(select_rows(d, "x1 > 0.5"), np.flatnonzero(d.X[:, 1] > 0.5))
    assert select_rows(d, "").size == 0
    with pytest.raises(ValidationError):
        select_rows(d, "y === 1")
    with pytest.raises(ValidationError):
        select_rows(d, "zz == 1")
