"""Microscopic Hopf-Cole transform and its martingale structure.

Sites are integers ``k``; at time ``t`` site ``k`` sits at ``x = k - mu t`` on
the shifted lattice, so ``Z(t, x) = lam**t tau**(N(t, k) - rho k)``.

The conditional expectation of the next field is a convolution,
``E[Z(t+1, k) | F(t)] = sum_n p(n) Z(t, k - n)`` with ``p`` the tilted jump
kernel, and the martingale increment is what is left over.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    KeyedDrivers, OccupationWindow, parallel_step_law,
    run_batch, stationary_h, window_truncation,
)
from .model_core import WindowTooSmallError, kernel_tail_depth, tilted_kernel


@dataclass
class HopfColeField:
    """``Z(t, k)`` on sites ``a..b``; leading axes (if any) index replicas.

    ``left`` is ``Z(t, a - 1)`` when the sites left of the window are known
    to be empty, which lets convolutions run over the whole window.
    """

    t: int
    a: int
    values: np.ndarray
    params: object
    heights: object = None
    left: np.ndarray | float | None = None

    @property
    def b(self):
        return self.a + self.values.shape[-1] - 1

    @property
    def sites(self):
        return np.arange(self.a, self.b + 1)

    def coordinates(self):
        """Real coordinates ``x = k - mu t`` of the stored sites."""
        return self.sites - self.params.mu * self.t

    def at(self, k):
        return self.values[..., k - self.a]


def transform(heights, params, vacuum_left=False):
    """Hopf-Cole field of a :class:`HeightField`.

    With ``vacuum_left`` the sites left of the window are taken to be empty,
    which fixes ``Z(t, a - 1)`` and enables whole-window convolutions.
    """
    w = heights.window
    t = w.t
    k = np.arange(w.a, w.a + heights.values.shape[-1])
    N = heights.values.astype(float)
    logZ = t * math.log(params.lam) + (N - params.rho * k) * math.log(params.tau)
    Z = np.exp(logZ)
    left = None
    if vacuum_left:
        N_left = N[..., 0] - np.asarray(w.occupancy, dtype=float)[..., 0]
        left = np.exp(t * math.log(params.lam) + (N_left - params.rho * (w.a - 1)) * math.log(params.tau))
    return HopfColeField(t, w.a, Z, params, heights, left)


def inverse(field):
    """Heights recovered from ``Z``, rounded to integers."""
    p = field.params
    k = field.sites
    N = (np.log(field.values) - field.t * math.log(p.lam)) / math.log(p.tau) + p.rho * k
    return np.rint(N).astype(np.int64)


def _convolve(field, tol=1e-14):
    """``(p * Z)(k) = sum_n p(n) Z(k - n)`` for every site where it is available.

    Returns ``(first_site, values)``.  With a vacuum left boundary every
    window site is covered, using the closed-form geometric tail of the
    empty region; otherwise the first ``depth`` sites are dropped.
    """
    p = field.params
    Z = np.asarray(field.values, dtype=float)
    n_sites = Z.shape[-1]
    if field.left is not None:
        kern = tilted_kernel(p, np.arange(n_sites))
        flat = Z.reshape(-1, n_sites)
        conv = np.array([np.convolve(row, kern)[:n_sites] for row in flat]).reshape(Z.shape)
        # empty region: Z(k') = Z(a-1) tau**(-rho (k' - a + 1)) for k' < a, and
        # p(n) tau**(rho n) = lam pmf(n), so the tail over n > k - a sums to
        # lam (1 - b1) b2**(k - a) Z(a-1) tau**(-rho (k - a + 1))
        m = np.arange(n_sites)
        tail = p.lam * (1.0 - p.b1) * p.b2 ** m * p.tau ** (-p.rho * (m + 1))
        left = np.asarray(field.left, dtype=float)[..., None]
        return field.a, conv + left * tail
    depth = kernel_tail_depth(p, tol)
    if n_sites <= depth:
        raise WindowTooSmallError(f"window of {n_sites} sites needs more than {depth} sites")
    kern = tilted_kernel(p, np.arange(depth + 1))
    flat = Z.reshape(-1, n_sites)
    conv = np.array([np.convolve(row, kern, mode="valid") for row in flat])
    return field.a + depth, conv.reshape(Z.shape[:-1] + (n_sites - depth,))


@dataclass(frozen=True)
class ThetaPair:
    theta1: float
    theta2: float


def theta_arrays(field, tol=1e-14):
    """``(first_site, Theta1, Theta2)`` on every site where the convolution is available."""
    p = field.params
    k0, conv = _convolve(field, tol)
    Z = field.values[..., k0 - field.a:]
    th1 = p.lam / p.tau * Z - conv
    th2 = -p.lam * Z + conv
    return k0, th1, th2


def theta_pair(field, k, tol=1e-14):
    """``Theta1, Theta2`` at site ``k`` of a single (unbatched) field."""
    k0, th1, th2 = theta_arrays(field, tol)
    if not k0 <= k <= field.b:
        raise WindowTooSmallError(f"site {k} lacks kernel support in the window")
    return ThetaPair(float(th1[k - k0]), float(th2[k - k0]))


def martingale_increment(field_t, field_next, tol=1e-14):
    """``m(t, k) = Z(t+1, k) - (p * Z(t))(k)`` on every available site.

    Returns ``(first_site, values)``.
    """
    k0, conv = _convolve(field_t, tol)
    return k0, field_next.values[..., k0 - field_next.a:] - conv


@dataclass
class QuadVarReport:
    """Enumerated conditional covariance of the martingale increments versus the closed form."""

    pairs: list
    empirical: np.ndarray
    formula: np.ndarray
    mean: np.ndarray

    @property
    def discrepancy(self):
        return np.abs(self.empirical - self.formula)

    def rows(self):
        return [
            {"k1": k1, "k2": k2, "empirical": e, "formula": f, "discrepancy": abs(e - f)}
            for (k1, k2), e, f in zip(self.pairs, self.empirical, self.formula)
        ]


def _field_from_occupancy(params, a, occ, t, N_left):
    occ = np.asarray(occ, dtype=np.int64)
    N = N_left + np.cumsum(occ)
    k = np.arange(a, a + occ.size)
    lt = t * math.log(params.lam)
    Z = np.exp(lt + (N - params.rho * k) * math.log(params.tau))
    left = math.exp(lt + (N_left - params.rho * (a - 1)) * math.log(params.tau))
    return HopfColeField(t, a, Z, params, None, left)


def quadvar_enumeration(params, a, occupancy, t=0, N_left=0):
    """Exact one-step moments of ``m(t, .)`` by enumerating every driver outcome.

    Sites left of the window are empty, so nothing enters from the left;
    ``N_left`` is the height just left of the window.  Returns a
    :class:`QuadVarReport` over all site pairs ``k1 <= k2``, with the
    conditional means in ``mean``.
    """
    occ = [int(e) for e in occupancy]
    f0 = _field_from_occupancy(params, a, occ, t, N_left)
    _, th1, th2 = theta_arrays(f0)
    law = parallel_step_law(a, occ, params)
    n = len(occ)
    k0, conv = _convolve(f0)
    first = np.zeros(n)
    second = np.zeros((n, n))
    for (new_occ, _), prob in law.items():
        # nothing crosses into the window, so N(a-1) is unchanged
        f1 = _field_from_occupancy(params, a, new_occ, t + 1, N_left)
        m = f1.values - conv
        first += prob * m
        second += prob * np.outer(m, m)
    pairs, emp, form = [], [], []
    r = params.b1 * params.tau ** (1.0 - params.rho)
    for i in range(n):
        for j in range(i, n):
            pairs.append((a + i, a + j))
            emp.append(second[i, j])
            form.append(r ** (j - i) * th1[i] * th2[i])
    return QuadVarReport(pairs, np.array(emp), np.array(form), first)


def u_coeff(params, j):
    """``u(j) = sum_{i >= j} p(i)``, the tail of the tilted kernel, in closed form."""
    j = np.asarray(j)
    if np.any(j < 1):
        raise ValueError("j must be >= 1")
    s = params.tau ** (-params.rho)
    q = params.q
    out = params.lam * (1.0 - params.b1) * (1.0 - params.b2) * s * q ** (j - 1.0) / (1.0 - q)
    return out if out.ndim else float(out)


def u_square_sum(params):
    """``sum_{j >= 1} u(j)**2`` in closed form."""
    q = params.q
    u1 = u_coeff(params, 1)
    return u1 * u1 / (1.0 - q * q)


def geometric_prefactor(params):
    """``(1 + b1 e^{-sqrt(eps)(1-rho)}) / (1 - b1 e^{-sqrt(eps)(1-rho)})``."""
    w = params.b1 * math.exp(-params.sqrt_eps * (1.0 - params.rho))
    return (1.0 + w) / (1.0 - w)


def quadvar_constant(params):
    """``2 b1 rho (1 - rho) / (1 + b1)``, the self-averaging multiple of ``Z**2``."""
    return 2.0 * params.b1 * params.rho * (1.0 - params.rho) / (1.0 + params.b1)


def _require_weak(params):
    if params.eps <= 0:
        raise ValueError("this diagnostic needs weakly asymmetric parameters (eps > 0)")


@dataclass
class SelfAvgStatistic:
    eps: float
    t: int
    x_star: int
    replicas: int
    estimate: float
    stderr: float


def self_averaging_stat(params, initial, t, x_star, replicas, seed, chunk=2000, tol=1e-10):
    """Monte Carlo L2 norm of the time-averaged quadratic-variation deviation.

    Estimates ``|| eps**2 sum_{s=0}^{t} (Theta1 Theta2 / eps - C Z**2)(s, x* + floor(mu s)) ||_2``
    where the evaluation site follows the characteristic, so every point lies
    on the lattice of its own time.  The window runs from far enough left
    that the kernel and the truncated left region are negligible (``tol``)
    up to the last evaluation site; dynamics on it is exact because lines
    only move right.  A Bernoulli start uses the exactly stationary
    ``Ber(h)`` injection at the left edge, a step start uses a vacuum.
    """
    _require_weak(params)
    depth = kernel_tail_depth(params, 1e-14)
    last = x_star + math.floor(params.mu * t)
    if initial.kind == "step":
        boundary, h = "vacuum", 0.0
        a = min(x_star - depth - 1, 0)
    elif initial.kind == "bernoulli":
        boundary, h = "bernoulli-injection", stationary_h(initial.v, params)
        a = x_star - depth - 1
    else:
        a = window_truncation(t, x_star - depth - 1, tol, params)
        boundary, h = "left-finite-cutoff", 0.0
    a, last = min(a, 0), max(last, 0)
    kern = tilted_kernel(params, np.arange(depth + 1))
    c = quadvar_constant(params)
    totals = []
    for start in range(0, replicas, chunk):
        reps = min(chunk, replicas - start)
        drivers = KeyedDrivers(np.random.SeedSequence([seed, start]).generate_state(1)[0])
        occ = initial.occupancy(a, last, drivers, reps)
        win = OccupationWindow(a, occ, 0, boundary, h)
        acc = np.zeros(reps)

        def observer(s, eta, N, acc=acc):
            k = x_star + math.floor(params.mu * s)
            lo = k - depth
            Zs = np.exp(s * math.log(params.lam)
                        + (N[lo - a:k - a + 1].T - params.rho * np.arange(lo, k + 1)) * math.log(params.tau))
            conv = Zs[:, ::-1] @ kern
            Zk = Zs[:, -1]
            th1 = params.lam / params.tau * Zk - conv
            th2 = -params.lam * Zk + conv
            acc += th1 * th2 / params.eps - c * Zk * Zk

        run_batch(params, win, t, drivers, observer, origin=0)
        totals.append(params.eps ** 2 * acc)
    vals = np.concatenate(totals)
    sq = vals ** 2
    est = math.sqrt(sq.mean())
    se = sq.std(ddof=1) / math.sqrt(replicas) / (2.0 * est) if replicas > 1 and est > 0 else 0.0
    return SelfAvgStatistic(params.eps, t, x_star, replicas, est, se)


@dataclass
class DecompositionResidual:
    """Pieces of the quadratic-variation expansion at one site, all divided by ``sqrt(eps) Z**2``."""

    deviation: float
    diagonal: float
    theta1_expansion: float
    theta2_expansion: float


def decomposition_residual(field, k):
    """Explicit pieces of the expansion of ``Theta1 Theta2 / eps - C Z**2`` at site ``k``.

    ``deviation``
        ``Theta1 Theta2 / eps - C Z**2`` itself.
    ``diagonal``
        ``(grad Z / sqrt(eps))**2 - rho (1 - rho) Z**2 + (1 - 2 rho) Zg(k, k+1)``
        with ``Zg(x1, x2) = grad Z(x1) Z(x2) / sqrt(eps)``; a pure Taylor
        remainder.  The factor ``1 - 2 rho`` comes from squaring
        ``grad Z / sqrt(eps) = (rho - eta(k+1)) Z + O(sqrt(eps)) Z`` and using
        ``eta**2 = eta``.
    ``theta1_expansion``, ``theta2_expansion``
        ``Theta_i / sqrt(eps)`` minus ``(1 - rho) Z + sum_j u(j) grad Z(k - j) / sqrt(eps)``
        (resp. ``rho Z - sum_j ...``).

    Each piece is reported relative to ``sqrt(eps) Z(k)**2`` (the first two)
    or ``sqrt(eps) Z(k)`` (the expansions).
    """
    p = field.params
    _require_weak(p)
    se = p.sqrt_eps
    k0, th1, th2 = theta_arrays(field)
    if not k0 <= k < field.b:
        raise WindowTooSmallError(f"site {k} lacks support in the window")
    Z = np.asarray(field.values, dtype=float)
    i = k - field.a
    Zk = Z[i]
    t1, t2 = th1[k - k0], th2[k - k0]
    dev = t1 * t2 / p.eps - quadvar_constant(p) * Zk ** 2
    gZ = Z[i + 1] - Zk
    diag = (gZ / se) ** 2 - p.rho * (1.0 - p.rho) * Zk ** 2 + (1.0 - 2.0 * p.rho) * gZ / se * Z[i + 1]
    # gradient sum over the available window (the left region contributes via Theta itself)
    depth = k - field.a
    js = np.arange(1, depth + 1)
    grads = Z[i - js + 1] - Z[i - js]
    gsum = float(np.sum(u_coeff(p, js) * grads)) if depth else 0.0
    if field.left is not None and depth >= 0:
        # empty region: grad Z(k') for k' < a - 1 is Z(k') (tau**-rho - 1); include it in closed form
        zl = float(field.left)
        j0 = depth + 1
        g_edge = Z[0] - zl
        gsum += u_coeff(p, j0) * g_edge
        # further left: grad Z(a - 1 - m) = zl tau**(rho m) (1 - tau**rho), m >= 1, weights u(j0 + m)
        r = p.q * p.tau ** p.rho
        gsum += u_coeff(p, j0 + 1) * zl * p.tau ** p.rho * (p.tau ** (-p.rho) - 1.0) / (1.0 - r)
    e1 = t1 / se - ((1.0 - p.rho) * Zk + gsum / se)
    e2 = t2 / se - (p.rho * Zk - gsum / se)
    scale2 = se * Zk ** 2
    return DecompositionResidual(dev / scale2, diag / scale2, e1 / (se * Zk), e2 / (se * Zk))
