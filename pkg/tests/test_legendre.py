import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poselectr import legendre
from poselectr.errors import ContractError


def test_frozen_values():
    assert legendre.legendre_eval(0, 0.7) == 1.0
    assert legendre.legendre_eval(1, -0.3) == -0.3
    assert legendre.legendre_eval(2, 0.5) == pytest.approx(-0.125, abs=1e-15)
    assert legendre.legendre_eval_rodrigues(2, 0.5) == pytest.approx(-0.125, abs=1e-15)
    assert legendre.legendre_eval_rodrigues(0, 123.4) == 1.0
    assert legendre.chebyshev_eval(2, 0.5) == pytest.approx(-0.5, abs=1e-15)
    assert legendre.chebyshev_eval(3, math.cos(0.3)) == pytest.approx(math.cos(0.9), abs=1e-12)


@pytest.mark.parametrize("n", range(21))
def test_value_at_one(n):
    assert legendre.legendre_eval(n, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert legendre.chebyshev_eval(n, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_rodrigues_cross_oracle():
    x = np.random.default_rng(0).uniform(-1, 1, 1000)
    for n in range(7):
        np.testing.assert_allclose(legendre.legendre_eval(n, x), legendre.legendre_eval_rodrigues(n, x), atol=1e-12)


def test_rodrigues_order_cap():
    with pytest.raises(ContractError):
        legendre.legendre_eval_rodrigues(7, 0.1)


def test_recursion_outside_interval():
    # (3x^2 - 1)/2 at x = 3
    assert legendre.legendre_eval(2, 3.0) == pytest.approx(13.0)


def test_bounded_and_parity():
    x = np.linspace(-1, 1, 10_000)
    for n in range(21):
        p = legendre.legendre_eval(n, x)
        assert np.max(np.abs(p)) <= 1.0 + 1e-12
        np.testing.assert_allclose(legendre.legendre_eval(n, -x), (-1) ** n * p, atol=1e-13)


@given(st.floats(0, math.pi), st.integers(0, 15))
def test_chebyshev_trig_identity(theta, n):
    assert abs(legendre.chebyshev_eval(n, math.cos(theta)) - math.cos(n * theta)) < 1e-12


def test_orthogonality_examples():
    assert legendre.orthogonality_defect(5, 8) < 1e-12
    assert legendre.orthogonality_defect(0, 1) < 1e-14
    assert legendre.orthogonality_defect(10, 12) < 1e-10


def test_orthogonality_needs_enough_nodes():
    with pytest.raises(ContractError):
        legendre.orthogonality_defect(5, 5)


def test_gauss_legendre_integrates_monomials():
    x, w = legendre.gauss_legendre(6)
    for k in range(12):
        exact = 0.0 if k % 2 else 2.0 / (k + 1)
        assert abs(np.sum(w * x**k) - exact) < 1e-14


def test_poly_series_matches_terms():
    a = np.array([0.5, -1.0, 2.0])
    x = np.linspace(-1, 1, 7)
    expected = sum(a[k] * legendre.legendre_eval(k, x) for k in range(3))
    np.testing.assert_allclose(legendre.poly_series("legendre", a, x), expected, atol=1e-15)


def test_kernel_validation():
    with pytest.raises(ContractError):
        legendre.PolyKernel("legendre", [])
    with pytest.raises(ContractError):
        legendre.PolyKernel("legendre", [1.0, np.nan])
    with pytest.raises(ContractError):
        legendre.PolyKernel("hermite", [1.0])
    assert legendre.PolyKernel("Chebyshev", [1.0, 2.0]).family == legendre.CHEBYSHEV


def test_flipped_recursion_sign_is_detected(monkeypatch):
    from poselectr import selftest

    monkeypatch.setattr(legendre, "_FAULT_FLIP_SIGN", True)
    results = selftest.run("legendre")
    assert any(not r.passed for r in results)
    assert legendre.legendre_eval(2, 0.5) != pytest.approx(-0.125)
