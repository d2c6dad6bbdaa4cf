"""Particle dynamics of the stochastic six vertex model on finite windows.

A row update scans sites left to right.  With ``c_in`` the line entering a
site from the left and ``eta`` its occupancy, the line leaving to the right is

* ``c ~ Ber(b2 ** (1 - eta))`` when ``c_in = 1`` (forced through an occupied site),
* ``c ~ Ber(1 - b1 ** eta)`` when ``c_in = 0``,

after which ``eta <- eta + c_in - c`` and the height drops, ``N(t+1, y) = N(t, y) - c``.

All randomness comes from :class:`KeyedDrivers`, which assigns each
``(seed, purpose, t, site)`` its own uniform draw, so two windows with
different extents see the same driver at a shared site.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

PURPOSES = {"vertex": 0, "inject": 1, "initial": 2, "bottom": 3}
_PAGE = 64
_OFFSET = 2 ** 40

BOUNDARIES = ("left-finite-cutoff", "vacuum", "bernoulli-injection")


class WindowOverflowError(RuntimeError):
    """A particle was pushed beyond the configured right-edge cap."""


class KeyedDrivers:
    """Counter-style uniform drivers keyed by ``(seed, purpose, t, site)``.

    Sites are grouped in pages of 64; each page of each row has an
    independent Philox stream derived from a :class:`numpy.random.SeedSequence`.
    The Bernoulli drivers of the model are thresholds of these uniforms:
    ``B = 1{U < 1 - b1**eta}`` and ``B' = 1{U < b2**(1-eta)}``.
    """

    def __init__(self, seed):
        self.seed = int(seed)

    def _page(self, purpose, t, page, replicas):
        key = [self.seed, PURPOSES[purpose], int(t) + 1, int(page) + _OFFSET]
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
        return gen.random((_PAGE, replicas))

    def uniforms(self, t, a, b, purpose="vertex", replicas=1):
        """Uniforms for sites ``a..b`` as an array of shape ``(b - a + 1, replicas)``."""
        p0, p1 = a // _PAGE, b // _PAGE
        blocks = [self._page(purpose, t, p, replicas) for p in range(p0, p1 + 1)]
        block = np.concatenate(blocks, axis=0)
        start = a - p0 * _PAGE
        return block[start:start + (b - a + 1)]

    def uniform(self, t, y, purpose="vertex"):
        return float(self.uniforms(t, y, y, purpose)[0, 0])


def stationary_h(v, params):
    """Horizontal density paired with vertical density ``v`` in the stationary state.

    A vertex fed by independent ``Ber(h)`` (left) and ``Ber(v)`` (below)
    lines emits ``Ber(h)`` to the right iff
    ``h (1 - v) (1 - b2) = (1 - h) v (1 - b1)``: a lone horizontal line
    turns up with probability ``1 - b2`` and a lone vertical line turns
    right with probability ``1 - b1``.  So ``h`` is the flux of particles
    across a column and vanishes as ``b1 -> 1``.
    """
    if not 0.0 <= v <= 1.0:
        raise ValueError("v must lie in [0, 1]")
    b1, b2 = params.b1, params.b2
    num = v * (1.0 - b1)
    den = num + (1.0 - v) * (1.0 - b2)
    return num / den if den > 0 else 0.0


# --- windows ---------------------------------------------------------------

@dataclass
class OccupationWindow:
    """Occupancies on sites ``a..b`` at time ``t``.

    ``boundary`` says what enters from the left each step: nothing for
    ``left-finite-cutoff`` and ``vacuum`` (all sites left of ``a`` empty), or
    an independent ``Ber(h)`` line for ``bernoulli-injection``.
    """

    a: int
    occupancy: np.ndarray
    t: int = 0
    boundary: str = "left-finite-cutoff"
    h: float = 0.0

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.int8)
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary policy {self.boundary!r}")
        if np.any((self.occupancy != 0) & (self.occupancy != 1)):
            raise ValueError("occupancy must be 0/1")

    @property
    def b(self):
        return self.a + self.occupancy.shape[-1] - 1

    @property
    def sites(self):
        return np.arange(self.a, self.b + 1)

    def positions(self):
        return [int(y) for y in self.sites[self.occupancy.astype(bool)]]


@dataclass
class HeightField:
    """Window together with heights ``N(t, y)`` for ``y`` in the window."""

    window: OccupationWindow
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)

    @property
    def t(self):
        return self.window.t

    def at(self, y):
        return self.values[..., y - self.window.a]


def heights_from_occupancy(a, occupancy, origin=0):
    """Heights with ``N(y) - N(y-1) = eta(y)`` and ``N(origin) = 0``.

    ``origin`` may be ``a - 1`` (just left of the window) or any window site.
    """
    occ = np.asarray(occupancy, dtype=np.int64)
    b = a + occ.shape[-1] - 1
    if not a - 1 <= origin <= b:
        raise ValueError("origin must lie in [a-1, b]")
    cum = np.cumsum(occ, axis=-1)
    if origin == a - 1:
        return cum
    return cum - cum[..., origin - a:origin - a + 1]


# --- initial conditions ----------------------------------------------------

@dataclass(frozen=True)
class InitialCondition:
    """Step, Bernoulli(v) or explicit initial occupancy.

    The step condition has ``N(0, x) = max(x, 0)``, i.e. ``eta(0, x) = 1`` iff ``x >= 1``.
    An explicit condition lists occupied sites.
    """

    kind: str
    v: float = 0.0
    occupied: tuple = ()

    @classmethod
    def step(cls):
        return cls("step")

    @classmethod
    def bernoulli(cls, v):
        return cls("bernoulli", v=float(v))

    @classmethod
    def explicit(cls, occupied):
        return cls("explicit", occupied=tuple(sorted(int(y) for y in occupied)))

    def occupancy(self, a, b, drivers=None, replicas=None):
        sites = np.arange(a, b + 1)
        if self.kind == "step":
            occ = (sites >= 1).astype(np.int8)
        elif self.kind == "explicit":
            occ = np.isin(sites, self.occupied).astype(np.int8)
        elif self.kind == "bernoulli":
            if drivers is None:
                raise ValueError("Bernoulli initial data needs drivers")
            u = drivers.uniforms(-1, a, b, "initial", replicas or 1)
            occ = (u < self.v).astype(np.int8).T
            return occ if replicas else occ[0]
        else:
            raise ValueError(f"unknown initial condition {self.kind!r}")
        if replicas:
            return np.broadcast_to(occ, (replicas, occ.size)).copy()
        return occ


# --- one row update --------------------------------------------------------

def _scan(eta, c0, u, b1, b2):
    """Vectorised left-to-right row update; arrays have sites on axis 0."""
    eta = eta.copy()
    cross = np.empty_like(eta)
    cin = c0
    for j in range(eta.shape[0]):
        e = eta[j]
        uj = u[j]
        # cin=1: continue w.p. b2 on an empty site, forced on an occupied one
        # cin=0: leave w.p. 1-b1 from an occupied site
        c = np.where(cin == 1, (e == 1) | (uj < b2), (e == 1) & (uj < 1.0 - b1)).astype(np.int8)
        eta[j] = e + cin - c
        cross[j] = c
        cin = c
    return eta, cross


def _inflow(window, drivers, replicas):
    if window.boundary == "bernoulli-injection":
        u = drivers.uniforms(window.t, window.a - 1, window.a - 1, "inject", replicas)[0]
        return (u < window.h).astype(np.int8)
    return np.zeros(replicas, dtype=np.int8)


def parallel_step(heights, params, drivers):
    """One time step of the vertex (parallel) update on a window.

    Accepts a single window or a batch whose occupancy has shape
    ``(replicas, sites)``; returns the next :class:`HeightField` and the
    crossing indicators ``c(y)`` (line leaving site ``y`` to the right).
    """
    w = heights.window
    occ = np.atleast_2d(w.occupancy)
    reps = occ.shape[0]
    u = drivers.uniforms(w.t, w.a, w.b, "vertex", reps)
    c0 = _inflow(w, drivers, reps)
    eta, cross = _scan(occ.T, c0, u, params.b1, params.b2)
    eta, cross = eta.T, cross.T
    if w.occupancy.ndim == 1:
        eta, cross = eta[0], cross[0]
    new_w = replace(w, occupancy=eta, t=w.t + 1)
    return HeightField(new_w, heights.values - cross), cross


def sequential_step(window, params, drivers, cap=None):
    """Update particles one by one from the left following rules (a) and (b).

    A free particle stays with probability ``b1``; otherwise it moves right,
    continuing past each empty site with probability ``b2``.  A particle that
    reaches the next particle stops there and the next particle is pushed:
    it moves at least one site and then continues with probability ``b2``.
    The window grows to the right when a particle passes ``b``; growing past
    ``cap`` raises :class:`WindowOverflowError`.

    Uses the same keyed drivers as :func:`parallel_step`, so both updates
    give identical results for the same ``drivers``.
    """
    if window.boundary not in ("left-finite-cutoff", "vacuum"):
        raise ValueError("sequential updates need a left-finite window")
    occ = np.asarray(window.occupancy)
    if occ.ndim != 1:
        raise ValueError("sequential_step works on a single window")
    pos = window.positions()
    t = window.t
    new = []
    pushed = False
    for i, x in enumerate(pos):
        if not pushed:
            if drivers.uniform(t, x) >= 1.0 - params.b1:
                new.append(x)
                continue
        nxt = pos[i + 1] if i + 1 < len(pos) else None
        y = x + 1
        pushed = False
        while True:
            if nxt is not None and y == nxt:
                pushed = True
                break
            if drivers.uniform(t, y) >= params.b2:
                break
            y += 1
        new.append(y)
    b = window.b
    if new and new[-1] > b:
        if cap is not None and new[-1] > cap:
            raise WindowOverflowError(f"particle reached {new[-1]} beyond cap {cap}")
        b = new[-1]
    occ_new = np.zeros(b - window.a + 1, dtype=np.int8)
    occ_new[np.asarray(new, dtype=int) - window.a] = 1
    return replace(window, occupancy=occ_new, t=t + 1)


# --- exact one-step laws ---------------------------------------------------

def parallel_step_law(a, occupancy, params, inflow=0.0):
    """Exact law of one parallel update on a window, by expanding every driver outcome.

    Lines leaving the right edge are dropped.  Returns a dict mapping
    ``(occupancy tuple, crossing tuple)`` to probability.
    """
    b1, b2 = params.b1, params.b2
    occ = [int(e) for e in occupancy]
    # entries: (new occupancy prefix, crossings prefix, last crossing, probability)
    frontier = []
    for cin, p in ((1, inflow), (0, 1.0 - inflow)):
        if p > 0:
            frontier.append(((), (), cin, p))
    for e in occ:
        nxt = []
        for occ_pre, cr_pre, cin, p in frontier:
            if cin == 1:
                p_cross = 1.0 if e == 1 else b2
            else:
                p_cross = (1.0 - b1) if e == 1 else 0.0
            for c, q in ((1, p_cross), (0, 1.0 - p_cross)):
                if q > 0:
                    nxt.append((occ_pre + (e + cin - c,), cr_pre + (c,), c, p * q))
        frontier = nxt
    states = {}
    for occ_new, cr, _, p in frontier:
        states[(occ_new, cr)] = states.get((occ_new, cr), 0.0) + p
    return states


def sequential_step_law(a, occupancy, params):
    """Exact law of one sequential update, from the rule (a)/(b) jump probabilities.

    Particles jumping past the right edge leave the window.  Returns a dict
    mapping new occupancy tuples to probability.
    """
    b1, b2 = params.b1, params.b2
    L = len(occupancy)
    pos = [i for i, e in enumerate(occupancy) if e]
    out = {}

    def rec(i, pushed, placed, p):
        if i == len(pos):
            occ = [0] * L
            for y in placed:
                if y < L:
                    occ[y] = 1
            key = tuple(occ)
            out[key] = out.get(key, 0.0) + p
            return
        x = pos[i]
        gap = pos[i + 1] - x if i + 1 < len(pos) else None
        if not pushed:
            rec(i + 1, False, placed + [x], p * b1)
            first = 1.0 - b1
        else:
            first = 1.0
        # move j >= 1 sites; j == gap means collision
        limit = gap if gap is not None else L - x - 1
        for j in range(1, limit + 1):
            if gap is not None and j == gap:
                rec(i + 1, True, placed + [x + j], p * first * b2 ** (j - 1))
            else:
                rec(i + 1, False, placed + [x + j], p * first * b2 ** (j - 1) * (1.0 - b2))
        if gap is None:
            # escape beyond the window
            rec(i + 1, False, placed + [L], p * first * b2 ** (L - x - 1))

    rec(0, False, [], 1.0)
    return out


def marginal_occupancy_law(law):
    """Collapse a :func:`parallel_step_law` result onto occupancies only."""
    out = {}
    for (occ, _), p in law.items():
        out[occ] = out.get(occ, 0.0) + p
    return out


# --- truncation ------------------------------------------------------------

def window_truncation(t_max, obs_left, tol, params):
    """Left edge ``a`` so that sites left of ``a`` influence ``[obs_left, ...)`` w.p. < ``tol``.

    Under the shared-driver coupling a discrepancy in the incoming line
    survives each site with probability at most ``max(b1, b2) = b1``, so
    the rightmost discrepancy advances per step by at most a geometric
    amount with ratio ``b1``.  After ``t_max`` steps the advance is dominated
    by a negative binomial; ``a`` is placed where its tail drops below ``tol``.
    """
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    if t_max <= 0:
        return obs_left
    d = 0
    while stats.nbinom.sf(d - 1, t_max, 1.0 - params.b1) >= tol:
        d += 1
    return obs_left - d


# --- Gibbs sampling --------------------------------------------------------

@dataclass
class GibbsSample:
    """Lines of a sampled box.

    ``vertical[j, i]`` is the line entering vertex ``(i, j)`` from below
    (row ``H`` holds the lines leaving the top) and ``horizontal[j, i]`` the
    line entering from the left (column ``W`` holds the lines leaving right).
    A leading replica axis is present when several boxes are sampled.
    """

    vertical: np.ndarray
    horizontal: np.ndarray
    v: float
    h: float

    def empirical_densities(self):
        return float(self.horizontal.mean()), float(self.vertical.mean())

    def along_path(self, path):
        """Lines crossing a down-right path of ``'D'``/``'R'`` moves from the top-left corner.

        Returns ``(kind, value)`` pairs where kind is ``'h'`` for horizontal
        lines crossed by down moves and ``'v'`` for vertical lines crossed
        by right moves.
        """
        H = self.horizontal.shape[-2]
        W = self.vertical.shape[-1]
        x, y = 0, H
        out = []
        for move in path:
            if move == "D":
                out.append(("h", self.horizontal[..., y - 1, x]))
                y -= 1
            elif move == "R":
                out.append(("v", self.vertical[..., y, x]))
                x += 1
            else:
                raise ValueError("path moves must be 'D' or 'R'")
        if (x, y) != (W, 0):
            raise ValueError("path must end at the bottom-right corner")
        return out


def sample_gibbs(params, v, box, drivers, replicas=1, burn_in=None):
    """Sample the stationary model on a ``W x H`` box.

    Bottom inputs are ``Ber(v)``, left inputs ``Ber(h)`` with
    ``h = stationary_h(v)``, and vertices are filled row by row with the
    stochastic weights.  A larger box is sampled and its top-right corner
    returned; ``burn_in`` extra rows and columns (default twice the box
    diameter) only wash out edge effects since the quadrant law is already
    stationary.
    """
    W, H = box
    if W <= 0 or H <= 0:
        raise ValueError("box dimensions must be positive")
    if burn_in is None:
        burn_in = 2 * max(W, H)
    Wt, Ht = W + burn_in, H + burn_in
    h = stationary_h(v, params)
    vert = np.zeros((Ht + 1, Wt, replicas), dtype=np.int8)
    horiz = np.zeros((Ht, Wt + 1, replicas), dtype=np.int8)
    vert[0] = (drivers.uniforms(-1, 0, Wt - 1, "bottom", replicas) < v)
    for j in range(Ht):
        c0 = (drivers.uniforms(j, -1, -1, "inject", replicas)[0] < h).astype(np.int8)
        u = drivers.uniforms(j, 0, Wt - 1, "vertex", replicas)
        eta, cross = _scan(vert[j], c0, u, params.b1, params.b2)
        horiz[j, 0] = c0
        horiz[j, 1:] = cross
        vert[j + 1] = eta
    vert = np.moveaxis(vert[burn_in:, burn_in:], -1, 0)
    horiz = np.moveaxis(horiz[burn_in:, burn_in:], -1, 0)
    if replicas == 1:
        vert, horiz = vert[0], horiz[0]
    return GibbsSample(vert, horiz, v, h)


# --- trajectories ----------------------------------------------------------

@dataclass
class Trajectory:
    """Recorded evolution: ``eta[t]``, ``N[t]`` on sites ``a..b`` and crossings ``c[t]``."""

    a: int
    eta: np.ndarray
    N: np.ndarray
    crossings: np.ndarray
    params: object = None

    @property
    def sites(self):
        return np.arange(self.a, self.a + self.eta.shape[-1])


def initial_heights(window, origin=0):
    return HeightField(window, heights_from_occupancy(window.a, window.occupancy, origin))


def simulate(params, window, steps, drivers, origin=0):
    """Run ``steps`` parallel updates from a window and record the trajectory."""
    hf = initial_heights(window, origin)
    etas, Ns, crs = [hf.window.occupancy], [hf.values], []
    for _ in range(steps):
        hf, cross = parallel_step(hf, params, drivers)
        etas.append(hf.window.occupancy)
        Ns.append(hf.values)
        crs.append(cross)
    cr = np.array(crs) if crs else np.zeros((0,) + np.shape(window.occupancy), dtype=np.int8)
    return Trajectory(window.a, np.array(etas), np.array(Ns), cr, params)


def height_observables(trajectory):
    """Heights, spatial increments and per-column crossing indicators of a trajectory."""
    N = trajectory.N
    inc = np.diff(N, axis=-1)
    return {
        "N": N,
        "increments": inc,
        "eta": trajectory.eta,
        "crossings": trajectory.crossings,
        "sites": trajectory.sites,
    }


def run_batch(params, window, steps, drivers, observer=None, origin=0):
    """Evolve a batch window (occupancy of shape ``(replicas, sites)``) without storing history.

    ``observer(t, eta, N)`` is called at every time including 0, with
    arrays laid out as ``(sites, replicas)``.  Returns the final field.
    """
    occ = np.atleast_2d(window.occupancy)
    reps = occ.shape[0]
    eta = np.ascontiguousarray(occ.T)
    N = heights_from_occupancy(window.a, occ, origin).T.copy()
    t = window.t
    if observer is not None:
        observer(t, eta, N)
    for _ in range(steps):
        u = drivers.uniforms(t, window.a, window.b, "vertex", reps)
        if window.boundary == "bernoulli-injection":
            c0 = (drivers.uniforms(t, window.a - 1, window.a - 1, "inject", reps)[0]
                  < window.h).astype(np.int8)
        else:
            c0 = np.zeros(reps, dtype=np.int8)
        eta, cross = _scan(eta, c0, u, params.b1, params.b2)
        N -= cross
        t += 1
        if observer is not None:
            observer(t, eta, N)
    new_w = replace(window, occupancy=eta.T.copy(), t=t)
    return HeightField(new_w, N.T.copy())
