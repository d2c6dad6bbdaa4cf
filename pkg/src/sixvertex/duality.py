"""Exact enumeration oracles, Monte Carlo estimators and duality checks.

Every check here runs on a window ``a..b`` with the sites left of ``a``
empty.  That is a legitimate configuration of the infinite system, and since
lines only move right the window evolves exactly as it would inside it.
Sums over dual particles reaching into the empty region are truncated where
the kernel mass falls below ``1e-14``; the empty region itself contributes
through closed-form heights.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import bethe_kernel as bk
from .dynamics import KeyedDrivers, OccupationWindow, parallel_step_law, run_batch, stationary_h

OBSERVABLES = ("H", "Htilde", "Z-pair", "etaZ-pair")


class EnumerationLimitError(ValueError):
    """The requested enumeration exceeds the window or step caps."""


# --- enumeration -----------------------------------------------------------

@dataclass
class EnumOracle:
    """Exact law of the window after ``t`` parallel updates.

    ``outcomes`` maps terminal occupancy tuples to probabilities; heights
    follow from ``N(a - 1) = N_left``, which never changes because nothing
    enters from the empty left region.
    """

    a: int
    t: int
    initial: tuple
    N_left: int
    outcomes: dict

    def total(self):
        return math.fsum(self.outcomes.values())

    def heights(self, occ):
        return self.N_left + np.cumsum(occ)

    def expect(self, f):
        """``E[f(occupancy, heights)]``."""
        return math.fsum(p * f(np.array(o), self.heights(o)) for o, p in self.outcomes.items())

    def states(self):
        return [(o, tuple(int(v) for v in self.heights(o)), p) for o, p in self.outcomes.items()]


def enumerate_window(params, a, occupancy, t, N_left=0, max_sites=7, max_steps=4):
    """Expand every driver outcome of ``t`` parallel updates on a small window."""
    occ = tuple(int(e) for e in occupancy)
    if len(occ) > max_sites or t > max_steps:
        raise EnumerationLimitError(f"enumeration capped at {max_sites} sites and {max_steps} steps")
    dist = {occ: 1.0}
    for _ in range(t):
        nxt = {}
        for state, p in dist.items():
            for (new, _), q in parallel_step_law(a, state, params).items():
                nxt[new] = nxt.get(new, 0.0) + p * q
        dist = nxt
    return EnumOracle(a, t, occ, N_left, dist)


# --- observables -----------------------------------------------------------

def _height_at(occ, a, N_left, y):
    """``N(y)`` for sites ``y >= a - 1`` or in the empty region; batched on axis 0."""
    occ = np.atleast_2d(occ)
    if y < a:
        return np.full(occ.shape[0], N_left, dtype=float)
    return N_left + occ[:, : y - a + 1].sum(axis=1).astype(float)


def _eta_at(occ, a, y):
    occ = np.atleast_2d(occ)
    if y < a:
        return np.zeros(occ.shape[0])
    if y - a >= occ.shape[1]:
        raise ValueError(f"site {y} is right of the window")
    return occ[:, y - a].astype(float)


def observable(params, tag, occ, a, N_left, time_, sites):
    """Value of a duality observable on a configuration (or a batch on axis 0).

    ``H`` is ``prod tau**N(y_i)``, ``Htilde`` is ``prod eta(y_i + 1) tau**N(y_i)``,
    ``Z-pair`` is ``Z(y1) Z(y2)`` and ``etaZ-pair`` is
    ``eta(y1 + 1) Z(y1) eta(y2 + 1) Z(y2)``, with ``Z = lam**t tau**(N - rho y)``.
    """
    tau, lam, rho = params.tau, params.lam, params.rho
    out = 1.0
    for y in sites:
        N = _height_at(occ, a, N_left, y)
        if tag == "H":
            out = out * tau ** N
        elif tag == "Htilde":
            out = out * _eta_at(occ, a, y + 1) * tau ** N
        elif tag == "Z-pair":
            out = out * lam ** time_ * tau ** (N - rho * y)
        elif tag == "etaZ-pair":
            out = out * _eta_at(occ, a, y + 1) * lam ** time_ * tau ** (N - rho * y)
        else:
            raise ValueError(f"unknown observable {tag!r}")
    return out


@dataclass(frozen=True)
class DualityQuery:
    """Observation sites ``y`` at time ``s + t`` given the state at time ``s``."""

    sites: tuple
    observable: str
    t: int
    s: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(v) for v in self.sites))
        if self.observable not in OBSERVABLES:
            raise ValueError(f"observable must be one of {OBSERVABLES}")
        if not all(u < v for u, v in zip(self.sites, self.sites[1:])):
            raise ValueError("sites must be strictly increasing")
        if self.observable in ("Z-pair", "etaZ-pair") and len(self.sites) != 2:
            raise ValueError("Z observables are two-point")
        if len(self.sites) not in (1, 2):
            raise ValueError("k must be 1 or 2")

    @property
    def k(self):
        return len(self.sites)


# --- kernel sides ----------------------------------------------------------

def _reach(params, t, tol=1e-14):
    """How far left of the observation sites dual particles are summed."""
    b2 = params.b2
    return int(math.ceil(math.log(tol) / math.log(b2))) + 3 * t + 4


def _source_values(params, tag, occ, a, N_left, s, lo, hi):
    """``f(y)`` on ``lo..hi`` for the per-site factor of ``tag`` at time ``s``."""
    ys = np.arange(lo, hi + 1)
    vals = np.array([observable(params, tag, occ, a, N_left, s, (int(y),))[0] for y in ys])
    return ys, vals


def kernel_side(params, query, occ, a, N_left=0, form="forward", contour=None):
    """Right-hand side of the duality identity for a window state at time ``s``.

    ``form="forward"`` sums ``P(y' -> y; t) f(y')`` over sources ``y'``;
    ``form="reversed"`` sums ``Pbar(y -> y'; t) f(y')`` with the reflected
    model's kernel.  Z observables use the tilted semigroup (forward form
    only; the reversed form is the same kernel after the tilt).
    """
    t, y = query.t, query.sites
    K = _reach(params, t)
    lo = y[0] - K
    b = a + np.asarray(occ).shape[-1] - 1
    hi = y[-1]
    if query.observable in ("Htilde", "etaZ-pair") and hi + 1 > b:
        raise ValueError("observation needs the site right of y inside the window")
    ys, f = _source_values(params, query.observable, occ, a, N_left, query.s, lo, hi)
    if query.t == 0:
        return float(np.prod([f[yy - lo] for yy in y]))
    if query.k == 1:
        n = y[0] - ys
        P = bk.one_particle_table(params, t, int(n.max()))
        return float(np.dot(P[n], f))
    Y1, Y2 = np.meshgrid(ys, ys, indexing="ij")
    keep = (Y1 < Y2) & (Y1 <= y[0]) & (Y2 <= y[1])
    Y1, Y2 = Y1[keep], Y2[keep]
    weights = f[Y1 - lo] * f[Y2 - lo]
    X1, X2 = np.full_like(Y1, y[0]), np.full_like(Y1, y[1])
    if query.observable in ("Z-pair", "etaZ-pair"):
        pk = bk.PairKernel(params, t, "V", contour)
        V = pk.evaluate(Y1, Y2, X1, X2)[0]
        return float(np.dot(V, weights))
    pk = bk.PairKernel(params, t, "U", contour)
    if form == "forward":
        P = pk.evaluate(Y1, Y2, X1, X2)[0]
    elif form == "reversed":
        P = pk.evaluate(-X2, -X1, -Y2, -Y1)[0]
    else:
        raise ValueError("form must be 'forward' or 'reversed'")
    return float(np.dot(P, weights))


# --- checks ----------------------------------------------------------------

@dataclass
class MCEstimate:
    mean: float
    stderr: float
    replicas: int
    seed: int
    wall_time: float


@dataclass
class DualityReport:
    query: DualityQuery
    mode: str
    lhs: float
    rhs_forward: float
    rhs_reversed: float
    gap: float
    sigma: float | None
    passed: bool
    note: str = ("finite window with empty sites to its left; dual sums truncated "
                 "where the kernel mass is below 1e-14")

    def row(self):
        return {
            "k": self.query.k, "sites": " ".join(map(str, self.query.sites)),
            "observable": self.query.observable, "s": self.query.s, "t": self.query.t,
            "mode": self.mode, "lhs": self.lhs, "rhs_forward": self.rhs_forward,
            "rhs_reversed": self.rhs_reversed, "gap": self.gap,
            "gap_over_sigma": self.gap / self.sigma if self.sigma else float("nan"),
            "pass": int(self.passed),
        }


def mc_observable(params, query, occ, a, N_left, replicas, seed, chunk=20000):
    """Monte Carlo mean of the observable after ``t`` steps from a fixed window state."""
    start = time.perf_counter()
    occ = np.asarray(occ, dtype=np.int8)
    vals = []
    for c0 in range(0, replicas, chunk):
        reps = min(chunk, replicas - c0)
        drivers = KeyedDrivers(np.random.SeedSequence([seed, c0]).generate_state(1)[0])
        win = OccupationWindow(a, np.broadcast_to(occ, (reps, occ.size)).copy(), query.s)
        final = run_batch(params, win, query.t, drivers, origin=a - 1)
        vals.append(observable(params, query.observable, final.window.occupancy, a,
                               N_left, query.s + query.t, query.sites))
    v = np.concatenate(vals)
    return MCEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(replicas)), replicas, seed,
                      time.perf_counter() - start)


def duality_check(params, query, occ, a, N_left=0, mode="exact", replicas=100_000, seed=0,
                  tol=1e-10, n_sigma=4.0):
    """Compare ``E[observable(s + t) | F(s)]`` with its dual kernel sum.

    In exact mode the left side comes from :func:`enumerate_window` and the
    check passes when both kernel forms are within ``tol``.  In Monte Carlo
    mode it passes when the gap is within ``n_sigma`` standard errors.
    """
    fwd = kernel_side(params, query, occ, a, N_left, "forward")
    if query.observable in ("H", "Htilde"):
        rev = kernel_side(params, query, occ, a, N_left, "reversed")
    else:
        rev = fwd
    if mode == "exact":
        oracle = enumerate_window(params, a, occ, query.t, N_left)
        lhs = oracle.expect(lambda o, N: float(observable(params, query.observable, o, a, N_left,
                                                          query.s + query.t, query.sites)[0]))
        gap = max(abs(lhs - fwd), abs(lhs - rev))
        return DualityReport(query, mode, lhs, fwd, rev, gap, None, gap < tol)
    if mode != "monte-carlo":
        raise ValueError("mode must be 'exact' or 'monte-carlo'")
    est = mc_observable(params, query, occ, a, N_left, replicas, seed)
    gap = max(abs(est.mean - fwd), abs(est.mean - rev))
    sigma = est.stderr
    return DualityReport(query, mode, est.mean, fwd, rev, gap, sigma,
                         gap <= n_sigma * sigma + 1e-15 * abs(fwd))


# --- conditional expectations of the gradient observables ------------------

def _zfield(params, occ, a, N_left, s, lo, hi):
    ys = np.arange(lo, hi + 1)
    N = np.array([_height_at(occ, a, N_left, int(y))[0] for y in ys])
    # eta(y + 1) is needed for sources y < hi only
    eta_next = np.array([_eta_at(occ, a, int(y) + 1)[0] for y in ys[:-1]] + [0])
    Z = params.lam ** s * params.tau ** (N - params.rho * ys)
    return ys, Z, eta_next


@dataclass
class ConditionalTable:
    """Rows of ``E[Zg | F(s)]`` and ``E[Ztilde | F(s)]`` by several routes."""

    rows: list = field(default_factory=list)

    def max_gap(self, key_a, key_b):
        return max(abs(r[key_a] - r[key_b]) for r in self.rows)


def conditional_expectation_tables(params, occ, a, s, t, sites, N_left=0, with_enumeration=True):
    """Conditional expectations of ``Zg`` and ``Ztilde`` at pairs ``(x1, x2)`` of ``sites``.

    ``Zg(x1, x2) = (Z(x1 + 1) - Z(x1)) Z(x2) / sqrt(eps)`` and
    ``Ztilde(x1, x2) = (eta Z)(x1) (eta Z)(x2) - rho**2 Z(x1) Z(x2)`` with
    ``(eta Z)(x) = eta(x + 1) Z(x)``.  Each is computed

    * ``gradient``: one kernel sum with the gradient folded into the kernel;
    * ``difference``: by differencing two ``Z``-pair kernel sums (``Zg``), or
      from the ``eta Z`` duality directly (``Ztilde``);
    * ``sbp``: (``Ztilde`` only) by writing ``eta Z = (grad Z - a0 Z)/(a1 - a0)``
      and moving every gradient onto the kernel by summation by parts;
    * ``enumeration``: exactly, when the window is small enough.

    Pairs must satisfy ``x1 + 1 < x2``.
    """
    if params.eps <= 0:
        raise ValueError("gradient observables need weakly asymmetric parameters")
    se = params.sqrt_eps
    tau, rho = params.tau, params.rho
    a0, a1 = tau ** (-rho) - 1.0, tau ** (1.0 - rho) - 1.0
    kk = 1.0 / (a1 - a0)
    occ = np.asarray(occ)
    b = a + occ.shape[-1] - 1
    pk = bk.PairKernel(params, t, "V")
    oracle = enumerate_window(params, a, occ, t, N_left) if with_enumeration else None
    table = ConditionalTable()
    for x1, x2 in sites:
        if not x1 + 1 < x2:
            raise ValueError("pairs must satisfy x1 + 1 < x2")
        if x2 + 1 > b or x1 < a:
            raise ValueError("pairs and the site right of x2 must lie inside the window")
        K = _reach(params, t)
        lo, hi = x1 - K, x2 + 1
        ys, Z, eta_next = _zfield(params, occ, a, N_left, s, lo, hi)
        Zi = lambda y: Z[y - lo]
        Y1, Y2 = np.meshgrid(ys[:-1], ys[:-1], indexing="ij")
        keep = Y1 < Y2
        Y1, Y2 = Y1[keep], Y2[keep]
        X1, X2 = np.full_like(Y1, x1), np.full_like(Y1, x2)
        w00 = Zi(Y1) * Zi(Y2)

        def ksum(grads, X1=X1, X2=X2, Y1=Y1, Y2=Y2, w=w00):
            return float(np.dot(pk.evaluate(Y1, Y2, X1, X2, grads=grads)[0], w))

        zz = ksum(())
        zg_grad = ksum((("x1", +1),)) / se
        zg_diff = (ksum((), X1=X1 + 1) - zz) / se
        eZ = eta_next * Z
        eZ_direct = float(np.dot(pk.evaluate(Y1, Y2, X1, X2)[0], eZ[Y1 - lo] * eZ[Y2 - lo]))
        # summation by parts: gradients of Z at the sources move onto the kernel;
        # boundary terms appear on the diagonal y2 = y1 + 1 and at the top
        # source hi - 1 (the far-left boundary is below the kernel tolerance)
        gZ = Z[1:] - Z[:-1]                       # grad Z on lo..hi-1
        gi = lambda y: gZ[y - lo]

        def kv(A, B, grads=()):
            return pk.evaluate(A, B, np.full_like(A, x1), np.full_like(A, x2), grads=grads)[0]

        far = Y1 + 1 < Y2
        yd = np.arange(lo, hi - 1)                # diagonal pairs (y, y + 1) and top pairs (y, hi - 1)
        top = np.full_like(yd, hi - 1)
        y2 = np.arange(lo + 2, hi)
        V_diag = kv(yd, yd + 1)
        V_top = kv(yd, top)
        s00 = zz
        s_g1 = -ksum((("y1", -1),)) + float(np.dot(kv(yd, yd + 1), Zi(yd + 1) ** 2))
        s_g2 = (-ksum((("y2", -1),), X1=X1[far], X2=X2[far], Y1=Y1[far], Y2=Y2[far], w=w00[far])
                - float(np.dot(V_diag, Zi(yd) * Zi(yd + 1)))
                + float(np.dot(V_top, Zi(yd) * Z[-1])))
        s_gg = (ksum((("y1", -1), ("y2", -1)), X1=X1[far], X2=X2[far], Y1=Y1[far], Y2=Y2[far], w=w00[far])
                - float(np.dot(kv(y2 - 2, y2, (("y2", -1),)), Zi(y2 - 1) * Zi(y2)))
                - float(np.dot(V_diag, gi(yd) * Zi(yd + 1)))
                + float(np.dot(V_top, gi(yd) * Z[-1])))
        eZ_sbp = kk * kk * (s_gg - a0 * s_g1 - a0 * s_g2 + a0 * a0 * s00)
        row = {
            "x1": x1, "x2": x2,
            "Zg_gradient": zg_grad, "Zg_difference": zg_diff,
            "Ztilde_direct": eZ_direct - rho * rho * zz, "Ztilde_sbp": eZ_sbp - rho * rho * zz,
        }
        if oracle is not None:
            T = s + t

            def zg(o, N, x1=x1, x2=x2):
                Zx = lambda y: params.lam ** T * tau ** (N[y - a] - rho * y)
                return (Zx(x1 + 1) - Zx(x1)) * Zx(x2) / se

            def zt(o, N, x1=x1, x2=x2):
                Zx = lambda y: params.lam ** T * tau ** (N[y - a] - rho * y)
                return (o[x1 + 1 - a] * o[x2 + 1 - a] - rho * rho) * Zx(x1) * Zx(x2)

            row["Zg_enumeration"] = oracle.expect(zg)
            row["Ztilde_enumeration"] = oracle.expect(zt)
        table.rows.append(row)
    return table


# --- time-averaged moments -------------------------------------------------

@dataclass
class MomentEstimate:
    eps: float
    horizon: int
    sites: tuple
    replicas: int
    Xg: float
    Xg_stderr: float
    Xgg: float
    Xgg_stderr: float


def time_averaged_moments(params, sites, horizon, replicas, seed, initial=None, chunk=5000):
    """Monte Carlo second moments of the time-averaged ``Zg`` and ``Ztilde`` sums.

    Estimates ``E[(eps**2 sum_{s <= horizon} Zg(s, x1* + floor(mu s), x2* + floor(mu s)))**2]``
    and the same with ``Ztilde``.  The default start is stationary with
    density ``rho``; the left edge injects the matching ``Ber(h)`` lines.
    """
    from .dynamics import InitialCondition

    if params.eps <= 0:
        raise ValueError("needs weakly asymmetric parameters")
    x1s, x2s = sites
    if not x2s - x1s > 1:
        raise ValueError("needs x2* - x1* > 1")
    initial = initial or InitialCondition.bernoulli(params.rho)
    se, tau, rho, lam = params.sqrt_eps, params.tau, params.rho, params.lam
    last = x2s + math.floor(params.mu * horizon) + 2
    a = min(x1s, 0) - 1
    last = max(last, 0)
    if initial.kind == "bernoulli":
        boundary, h = "bernoulli-injection", stationary_h(initial.v, params)
    else:
        boundary, h = "vacuum", 0.0
        if initial.kind == "step":
            a = min(a, 0)
    xg, xgg = [], []
    for start in range(0, replicas, chunk):
        reps = min(chunk, replicas - start)
        drivers = KeyedDrivers(np.random.SeedSequence([seed, start]).generate_state(1)[0])
        occ = initial.occupancy(a, last, drivers, reps)
        win = OccupationWindow(a, occ, 0, boundary, h)
        acc_g = np.zeros(reps)
        acc_t = np.zeros(reps)

        def observer(s, eta, N, acc_g=acc_g, acc_t=acc_t):
            sh = math.floor(params.mu * s)
            k1, k2 = x1s + sh, x2s + sh
            Z = lambda k: lam ** s * tau ** (N[k - a] - rho * k)
            acc_g += (Z(k1 + 1) - Z(k1)) * Z(k2) / se
            acc_t += (eta[k1 + 1 - a] * eta[k2 + 1 - a] - rho * rho) * Z(k1) * Z(k2)

        run_batch(params, win, horizon, drivers, observer, origin=0)
        xg.append((params.eps ** 2 * acc_g) ** 2)
        xgg.append((params.eps ** 2 * acc_t) ** 2)
    g, gg = np.concatenate(xg), np.concatenate(xgg)
    n = replicas
    sd = lambda v: float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MomentEstimate(params.eps, horizon, (x1s, x2s), n, float(g.mean()), sd(g), float(gg.mean()), sd(gg))
