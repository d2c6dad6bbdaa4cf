"""Parameters, vertex weights and the one-particle walk of the stochastic six vertex model.

Everything here is a pure function of its inputs.  Series such as the tilted
normalisation, mean and variance are summed in closed form; truncated loops
are only used by the test suite as an independent oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DivergentTiltError(ValueError):
    """Raised when ``b2 * tau**(-rho) >= 1`` so the tilted series diverges."""


class PhaseError(ValueError):
    """Raised when symmetric weights do not lie in the ferroelectric phase."""


class WindowTooSmallError(ValueError):
    """Raised when a finite table cannot support the requested convolution."""


def _check_open_unit(name, value):
    if not (0.0 < value < 1.0):
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")


def derive_lambda_mu(b1, b2, rho):
    """Closed-form tilt constants ``(lambda, mu)``.

    ``lambda`` normalises the tilted walk, ``1/lambda = E[tau**(-rho r)]``, and
    ``mu`` is the mean of the tilted jump, so the centred walk ``r - mu`` has
    mean zero.

    Parameters
    ----------
    b1, b2 : float
        Stochastic weights with ``0 < b2 <= b1 < 1``.  ``b2 == b1`` gives the
        untilted point ``lambda = mu = 1``.
    rho : float
        Density parameter in the open interval (0, 1).

    Returns
    -------
    (float, float)
    """
    _check_open_unit("b1", b1)
    _check_open_unit("b2", b2)
    _check_open_unit("rho", rho)
    if b2 > b1:
        raise ValueError("b2 must not exceed b1")
    tau = b2 / b1
    s = tau ** (-rho)
    if b2 * s >= 1.0:
        raise DivergentTiltError(f"b2 * tau^(-rho) = {b2 * s} >= 1; tilted series diverges")
    den = b1 - (b1 + b2 - 1.0) * s
    lam = (1.0 - b2 * s) / den
    mu = s * (1.0 - b1) * (1.0 - b2) / (den * (1.0 - b2 * s))
    return lam, mu


@dataclass(frozen=True)
class ModelParams:
    """Parameter bundle ``(b1, b2, tau, rho, eps, lambda, mu)``.

    Use :meth:`weakly_asymmetric` for the scaled family ``b2 = b1 exp(-sqrt(eps))``
    and the plain constructor for free ``(b1, b2)`` (then ``eps`` is 0).
    """

    b1: float
    b2: float
    rho: float
    eps: float = 0.0
    weak_asymmetry: bool = False
    tau: float = field(init=False)
    lam: float = field(init=False)
    mu: float = field(init=False)

    def __post_init__(self):
        _check_open_unit("b1", self.b1)
        _check_open_unit("b2", self.b2)
        _check_open_unit("rho", self.rho)
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps!r}")
        if not self.b2 < self.b1:
            raise ValueError(f"b2 < b1 is required, got b1={self.b1!r}, b2={self.b2!r}")
        if self.weak_asymmetry and self.b2 != self.b1 * math.exp(-math.sqrt(self.eps)):
            raise ValueError("weak_asymmetry requires b2 == b1 * exp(-sqrt(eps))")
        lam, mu = derive_lambda_mu(self.b1, self.b2, self.rho)
        object.__setattr__(self, "tau", self.b2 / self.b1)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def weakly_asymmetric(cls, b1, eps, rho):
        """Build the scaled family with ``tau = exp(-sqrt(eps))``, ``eps > 0``."""
        if eps <= 0:
            raise ValueError("weak asymmetry needs eps > 0")
        return cls(b1=b1, b2=b1 * math.exp(-math.sqrt(eps)), rho=rho, eps=eps,
                   weak_asymmetry=True)

    @property
    def q(self):
        """Tilted geometric ratio ``b2 * tau**(-rho)``."""
        return self.b2 * self.tau ** (-self.rho)

    @property
    def sqrt_eps(self):
        """``-log(tau)``; equals ``sqrt(eps)`` in the weakly asymmetric family."""
        return -math.log(self.tau)


def expansion_check(b1, rho, eps_grid):
    """First-order expansion residuals of ``lambda_eps`` and ``mu_eps``.

    Returns an array with columns ``eps``, ``lambda - (1 - rho sqrt(eps))`` and
    ``mu - (1 + (b1 - 2 b1 rho)/(b1 - 1) sqrt(eps))``.  At ``eps = 0`` the
    residuals are exactly zero.
    """
    rows = []
    coef = (b1 - 2.0 * b1 * rho) / (b1 - 1.0)
    for eps in eps_grid:
        if eps < 0 or eps > 0.25:
            raise ValueError("eps grid must lie in [0, 0.25]")
        se = math.sqrt(eps)
        lam, mu = derive_lambda_mu(b1, b1 * math.exp(-se), rho)
        rows.append((eps, lam - (1.0 - rho * se), mu - (1.0 + coef * se)))
    return np.array(rows, dtype=float)


def walk_pmf(params, n):
    """Law of the one-particle jump ``r``: ``b1`` at 0, ``(1-b1)(1-b2) b2**(n-1)`` above."""
    b1, b2 = params.b1, params.b2
    n = np.asarray(n)
    out = np.where(n > 0, (1.0 - b1) * (1.0 - b2) * float(b2) ** np.maximum(n - 1, 0), 0.0)
    out = np.where(n == 0, b1, out)
    return out if out.ndim else float(out)


def tilted_kernel(params, n):
    """Tilted kernel ``p_eps(x)`` at ``x = n - mu`` on the shifted lattice.

    The integer ``n = x + mu`` is the jump length; values outside ``n >= 0`` are 0.
    """
    n = np.asarray(n)
    w = params.lam * params.tau ** (-params.rho * np.maximum(n, 0).astype(float))
    out = np.where(n >= 0, w * walk_pmf(params, n), 0.0)
    return out if out.ndim else float(out)


def kernel_tail_mass(params, depth):
    """Mass of the tilted kernel strictly beyond jump length ``depth``."""
    q = params.q
    c = params.lam * (1.0 - params.b1) * (1.0 - params.b2) * params.tau ** (-params.rho)
    return c * q ** depth / (1.0 - q)


def kernel_tail_depth(params, tol):
    """Smallest ``J`` such that the kernel mass beyond ``J`` is below ``tol``."""
    q = params.q
    c = params.lam * (1.0 - params.b1) * (1.0 - params.b2) * params.tau ** (-params.rho)
    j = math.ceil(math.log(tol * (1.0 - q) / c) / math.log(q)) if c > tol * (1 - q) else 0
    return max(j, 0)


def kernel_moments(params):
    """Mean and variance of the centred tilted jump ``R - mu`` in closed form."""
    b1, b2, lam, mu = params.b1, params.b2, params.lam, params.mu
    s = params.tau ** (-params.rho)
    q = b2 * s
    a = lam * (1.0 - b1) * (1.0 - b2) * s
    # E[f(n)] over n >= 1 with weight a q^(n-1): sums of 1, n, n^2
    m0 = a / (1.0 - q)
    m1 = a / (1.0 - q) ** 2
    m2 = a * (1.0 + q) / (1.0 - q) ** 3
    mean = m1 - mu * (lam * b1 + m0)
    var = mu ** 2 * lam * b1 + (m2 - 2.0 * mu * m1 + mu ** 2 * m0) - mean ** 2
    return mean, var


def limiting_variance(b1):
    """``nu* = 2 b1 / (1 - b1)``, the variance of the walk at ``eps = 0``."""
    return 2.0 * b1 / (1.0 - b1)


@dataclass(frozen=True)
class WalkLaw:
    """Summary of the jump law and its tilted, centred version."""

    params: ModelParams
    mean: float
    variance: float

    @classmethod
    def of(cls, params):
        mean, var = kernel_moments(params)
        return cls(params, mean, var)

    def pmf(self, n):
        return walk_pmf(self.params, n)

    def tilted(self, n):
        return tilted_kernel(self.params, n)


@dataclass(frozen=True)
class ShiftedSite:
    """Site ``x = k - mu t`` of the shifted lattice, stored by integers ``(t, k)``."""

    t: int
    k: int

    def coordinate(self, params):
        return self.k - params.mu * self.t


def generator_apply(params, f, tol=1e-14, finite_support=False):
    """Apply the centred generator to a table over consecutive integer sites.

    ``(Lf)(K) = sum_n p(n) f(K - n) - f(K)`` where ``K`` indexes the next
    shifted lattice.  Indices are relative to the first entry of ``f``.

    Parameters
    ----------
    f : array_like
        Values at consecutive sites.
    tol : float
        Neglected kernel tail mass.
    finite_support : bool
        If true, ``f`` is zero off the table and the output covers the table.
        Otherwise the output starts at the first index whose convolution is
        fully supported, and ``(offset, values)`` is returned.

    Returns
    -------
    (int, numpy.ndarray)
        Offset of the first output entry relative to ``f[0]`` and the values.
    """
    f = np.asarray(f, dtype=float)
    depth = kernel_tail_depth(params, tol)
    kern = tilted_kernel(params, np.arange(depth + 1))
    if finite_support:
        conv = np.convolve(f, kern)[: f.size]
        return 0, conv - f
    if f.size <= depth:
        raise WindowTooSmallError(f"table of {f.size} sites needs more than {depth} sites")
    conv = np.convolve(f, kern, mode="valid")
    return depth, conv - f[depth:]


# --- vertex weights and the symmetric parametrisation -----------------------

#: vertex types as (bottom in, left in, top out, right out)
VERTEX_TYPES = ((0, 0, 0, 0), (1, 1, 1, 1), (1, 0, 1, 0), (0, 1, 0, 1), (1, 0, 0, 1), (0, 1, 1, 0))


@dataclass(frozen=True)
class VertexWeights:
    """Six weights indexed like :data:`VERTEX_TYPES`."""

    weights: tuple
    variant: str

    @classmethod
    def stochastic(cls, b1, b2):
        return cls((1.0, 1.0, b1, b2, 1.0 - b1, 1.0 - b2), "stochastic")

    @classmethod
    def symmetric(cls, a, b, c):
        return cls((a, a, b, b, c, c), "symmetric")

    @classmethod
    def asymmetric(cls, a, b, c, H, V):
        e = math.exp
        return cls((e(-H - V) * a, e(H + V) * a, e(-H + V) * b, e(H - V) * b, c, c), "asymmetric")

    def weight(self, bottom, left, top, right):
        try:
            return self.weights[VERTEX_TYPES.index((bottom, left, top, right))]
        except ValueError:
            return 0.0

    def output_sums(self):
        """Total outgoing weight for each of the four input pairs."""
        sums = {}
        for (bot, lef, top, rig), w in zip(VERTEX_TYPES, self.weights):
            sums[(bot, lef)] = sums.get((bot, lef), 0.0) + w
        return sums


def map_symmetric_to_stochastic(a, b, c):
    """Map ferroelectric symmetric weights ``(a, b, c)`` to ``(b1, b2, Delta)``."""
    if min(a, b, c) <= 0:
        raise ValueError("weights must be positive")
    delta = (a * a + b * b - c * c) / (2.0 * a * b)
    if delta <= 1.0 or a <= b + c:
        raise PhaseError(f"need Delta > 1 and a > b + c, got Delta={delta}")
    root = math.sqrt(delta * delta - 1.0)
    return (b / a) * (delta + root), (b / a) * (delta - root), delta


def delta_from_stochastic(b1, b2):
    """Inverse relation ``Delta = (b1 + b2) / (2 sqrt(b1 b2))``."""
    return (b1 + b2) / (2.0 * math.sqrt(b1 * b2))


def baxter_weights(u, eta):
    """Baxter's parametrisation ``a = sinh(u+eta), b = sinh u, c = sinh eta``."""
    if u <= 0 or eta <= 0:
        raise ValueError("u and eta must be positive")
    return math.sinh(u + eta), math.sinh(u), math.sinh(eta), math.cosh(eta)


def conical_density(v, u, eta, sign):
    """Horizontal density ``h`` paired with vertical density ``v`` on the conical curve."""
    if sign not in ("+", "-"):
        raise ValueError("sign must be '+' or '-'")
    th = math.tanh(u + eta) * (1.0 if sign == "+" else -1.0)
    return v * (1.0 + th) / (1.0 + th * (2.0 * v - 1.0))
