import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gequnet.metrics import Accumulator, nmse, report, rmse, rmse_db

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(math.sqrt(25 / 2), rel=1e-15)
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(3.5355339, abs=1e-7)


def test_nmse_examples():
    t = np.array([0.2, 0.5, 0.9])
    assert nmse(t, t) == 0
    assert nmse(2 * t, t) == pytest.approx(1.0, rel=1e-15)
    assert nmse(np.zeros(3), t) == 1.0


def test_rmse_db():
    assert rmse_db(0.0) == 0
    assert rmse_db(0.02) == pytest.approx(1.6, rel=1e-12)
    assert rmse_db(1.0) == 80
    with pytest.raises(ValueError):
        rmse_db(-0.1)


def test_errors():
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        nmse([1.0, 2.0], [0.0, 0.0])


@given(
    arrays(np.float64, st.integers(1, 50), elements=finite),
    arrays(np.float64, st.integers(1, 50), elements=finite),
)
def test_identities(a, b):
    n = min(a.size, b.size)
    p, t = a[:n], b[:n]
    sse = float(((p - t) ** 2).sum())
    assert rmse(p, t) ** 2 * n == pytest.approx(sse, rel=1e-9, abs=1e-12)
    assert rmse(p, t) == rmse(t, p)
    if (t**2).sum() > 1e-6:
        assert nmse(p, t) == pytest.approx(rmse(p, t) ** 2 * n / float((t**2).sum()), rel=1e-9, abs=1e-12)


@given(st.integers(2, 40), st.integers(0, 2**16))
def test_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random(n), rng.random(n) + 0.1
    perm = rng.permutation(n)
    assert rmse(p[perm], t[perm]) == pytest.approx(rmse(p, t), rel=1e-12)
    assert nmse(p[perm], t[perm]) == pytest.approx(nmse(p, t), rel=1e-12)


def test_report_and_accumulator(rng):
    p, t = rng.random((2, 8, 8)), rng.random((2, 8, 8))
    rep = report(p, t)
    assert rep.rmse_db == pytest.approx(rep.rmse_norm * 80) and rep.n_pixels == 128
    acc = Accumulator()
    acc.add(p[0], t[0])
    acc.add(p[1], t[1])
    res = acc.result()
    assert res.rmse_norm == pytest.approx(rep.rmse_norm, rel=1e-12)
    assert res.nmse == pytest.approx(rep.nmse, rel=1e-12)
    masked = Accumulator()
    masked.add(p[0], t[0], mask=np.zeros((8, 8), bool))
    with pytest.raises(ValueError):
        masked.result()
