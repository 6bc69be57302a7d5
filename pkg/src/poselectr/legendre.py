"""Legendre and Chebyshev polynomials, Rodrigues cross-check, Gauss-Legendre quadrature."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import ContractError, NumericalError

LEGENDRE = "legendre"
CHEBYSHEV = "chebyshev"
FAMILIES = (LEGENDRE, CHEBYSHEV)

# Test-only fault hook: flips the sign of the P_{n-1} term in the recursion.
_FAULT_FLIP_SIGN = False


def normalize_family(family: str) -> str:
    name = str(family).lower()
    if name not in FAMILIES:
        raise ContractError(f"unknown kernel family {family!r}; expected one of {FAMILIES}")
    return name


@dataclass
class PolyKernel:
    """Coefficients ``coeffs[k]`` of a polynomial filter sum_k coeffs[k] * p_k(x)."""

    family: str
    coeffs: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.family = normalize_family(self.family)
        # a trainable Tensor is kept as is so gradients reach it
        if not hasattr(self.coeffs, "requires_grad"):
            self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        c = self.values
        if c.ndim != 1 or c.size < 1:
            raise ContractError("kernel needs at least one coefficient")
        if not np.all(np.isfinite(c)):
            raise ContractError("kernel coefficients must be finite")

    @property
    def values(self) -> np.ndarray:
        return np.asarray(getattr(self.coeffs, "data", self.coeffs), dtype=np.float64)

    @property
    def order(self):
        return self.values.size

    def __call__(self, x):
        return poly_series(self.family, self.values, x)


def recursion_step(family, k):
    """Return (a, b) with p_{k+1} = a * x * p_k - b * p_{k-1}, valid for k >= 1."""
    if family == LEGENDRE:
        a, b = (2 * k + 1) / (k + 1), k / (k + 1)
        if _FAULT_FLIP_SIGN:
            b = -b
        return a, b
    return 2.0, 1.0


def _eval(family, n, x):
    x = np.asarray(x, dtype=np.float64)
    if n < 0:
        raise ContractError("polynomial degree must be non-negative")
    prev = np.ones_like(x)
    if n == 0:
        return prev
    cur = x.copy()
    for k in range(1, n):
        a, b = recursion_step(family, k)
        prev, cur = cur, a * x * cur - b * prev
    return cur


def legendre_eval(n: int, x):
    """P_n(x) by the three-term recursion; works for scalars and arrays."""
    out = _eval(LEGENDRE, n, x)
    return float(out) if out.ndim == 0 else out


def chebyshev_eval(n: int, x):
    """T_n(x) by T_{n+1} = 2x T_n - T_{n-1}."""
    out = _eval(CHEBYSHEV, n, x)
    return float(out) if out.ndim == 0 else out


def poly_series(family, coeffs, x):
    """sum_k coeffs[k] p_k(x) for the given family, evaluated elementwise."""
    family = normalize_family(family)
    x = np.asarray(x, dtype=np.float64)
    prev = np.ones_like(x)
    total = coeffs[0] * prev
    if len(coeffs) == 1:
        return total
    cur = x.copy()
    total = total + coeffs[1] * cur
    for k in range(1, len(coeffs) - 1):
        a, b = recursion_step(family, k)
        prev, cur = cur, a * x * cur - b * prev
        total = total + coeffs[k + 1] * cur
    return total


RODRIGUES_MAX_ORDER = 6


@lru_cache(maxsize=None)
def rodrigues_coefficients(n: int):
    """Exact monomial coefficients (ascending powers) of P_n from Rodrigues' formula.

    Expands (x^2 - 1)^n binomially, differentiates n times term by term and
    divides by 2^n n!.
    """
    if not 0 <= n <= RODRIGUES_MAX_ORDER:
        raise ContractError(f"Rodrigues oracle supports orders 0..{RODRIGUES_MAX_ORDER}, got {n}")
    coeffs = [Fraction(0)] * (n + 1)
    scale = Fraction(1, 2 ** n * math.factorial(n))
    for j in range(n + 1):
        # term: C(n, j) (-1)^(n-j) x^(2j)
        power = 2 * j
        if power < n:
            continue
        c = math.comb(n, j) * (-1) ** (n - j)
        # n-th derivative of x^power
        c *= math.perm(power, n)
        coeffs[power - n] += c * scale
    return tuple(coeffs)


def legendre_eval_rodrigues(n: int, x):
    coeffs = rodrigues_coefficients(n)
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for c in reversed(coeffs):  # Horner
        out = out * x + float(c)
    return float(out) if out.ndim == 0 else out


def _legendre_with_derivative(n, x):
    p = _eval(LEGENDRE, n, x)
    p_prev = _eval(LEGENDRE, n - 1, x)
    dp = n * (x * p - p_prev) / (x * x - 1.0)
    return p, dp


def _gauss_legendre(order, tol):
    if order < 1:
        raise ContractError("quadrature order must be positive")
    if order == 1:
        return np.zeros(1), np.full(1, 2.0)
    i = np.arange(1, order + 1)
    x = np.cos(np.pi * (i - 0.25) / (order + 0.5))
    for _ in range(100):
        p, dp = _legendre_with_derivative(order, x)
        step = p / dp
        x = x - step
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise NumericalError("Gauss-Legendre Newton iteration did not converge", last_iterate=x)
    _, dp = _legendre_with_derivative(order, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order_idx = np.argsort(x)
    return x[order_idx], w[order_idx]


def gauss_legendre(order: int, tol=1e-14):
    """Nodes and weights of the ``order``-point Gauss-Legendre rule on [-1, 1].

    Newton iteration on P_order started from Chebyshev-like points.
    """
    return _gauss_legendre(int(order), float(tol))


def orthogonality_defect(n_max: int, quad_order: int) -> float:
    """Largest deviation of the Legendre Gram matrix from diag(2/(2n+1)).

    With ``quad_order`` points the rule integrates degree 2*quad_order-1
    exactly, which covers every product P_m P_n with m, n <= n_max.
    """
    if n_max < 0:
        raise ContractError("n_max must be non-negative")
    if quad_order < n_max + 1:
        raise ContractError(f"quad_order {quad_order} too small for n_max {n_max}; need >= {n_max + 1}")
    x, w = gauss_legendre(quad_order)
    basis = np.stack([legendre_eval(n, x) for n in range(n_max + 1)])
    gram = (basis * w) @ basis.T
    expected = np.diag(2.0 / (2.0 * np.arange(n_max + 1) + 1.0))
    return float(np.max(np.abs(gram - expected)))
