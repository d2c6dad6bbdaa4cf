"""Contour-integral transition kernels.

Two evaluation routes are provided.

``circle``
    The literal formula on a single circle of radius ``r`` enclosing every
    pole, with all variables on the same circle.  Works for any ``k`` but the
    integrand grows like ``r**|exponent|`` times ``|g(r)|**t``, which wipes
    out double precision for moderately large ``t``.

``split`` (default for ``k = 2``)
    The free part is integrated on the unit circle, where the one-particle
    factor is a generating function bounded by 1.  The interacting part is
    integrated on a torus ``|z1| = r1 > 1 > r2 = |z2|``, and the residue at the
    interaction pole ``z2*(z1) = (c z1 - 1)/(d z1)``, which lies between
    ``r2`` and the large circle, is added back as a one-dimensional
    integral.  This is an exact rearrangement of the large-circle integral,
    and its integrand stays of order one, so accuracy is uniform in ``t``.
    The residue line is analytic in ``z1`` down to the one-variable poles, so
    each entry takes it on the admissible radius with the smallest summands.

Both routes are evaluated with the trapezoid rule, which converges
geometrically for integrands analytic near the circle.  For a whole table of
integer exponents the trapezoid sums are discrete Fourier transforms, so
tables are computed with FFTs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse, stats


class ContourError(ValueError):
    """The requested contour does not enclose the pole inventory."""


class NonConvergenceError(RuntimeError):
    """Adaptive node doubling exceeded the node cap."""


class ExponentOverflowError(ValueError):
    """An exponent is too large to be evaluated safely on the chosen circle."""


@dataclass(frozen=True)
class ContourSpec:
    """Circle ``|z| = radius`` with ``nodes`` trapezoid nodes.

    ``radius = None`` lets the evaluator choose from the pole inventory.
    With ``adaptive`` the node count doubles from ``nodes`` until successive
    values agree to ``rtol`` (relative) or ``atol`` (absolute), or the cap is
    exceeded.  Two-dimensional grids use the smaller cap ``max_nodes_2d``.
    With ``fallback``, two-particle entries whose round-off floor exceeds
    ``atol`` are recomputed by exact recursion of the pair chain.
    """

    radius: float | None = None
    nodes: int = 256
    adaptive: bool = True
    rtol: float = 1e-10
    max_nodes: int = 65536
    max_nodes_2d: int = 2048
    atol: float = 1e-14
    max_exponent: int = 200
    fallback: bool = True


@dataclass(frozen=True)
class KernelValue:
    """Real kernel value with quadrature diagnostics."""

    value: float
    imag_residual: float
    nodes: int
    error_estimate: float

    def __float__(self):
        return self.value


def _nodes(radius, M):
    return radius * np.exp(2j * np.pi * np.arange(M) / M)


def quadrature(f, contour):
    """``(1/2 pi i) \\oint f(z) dz`` over a circle by the trapezoid rule.

    ``f`` maps an array of nodes to values.  Returns ``(value, nodes, error)``
    where ``error`` is the last change under doubling (0 when not adaptive).
    """
    if contour.radius is None or contour.radius <= 0:
        raise ContourError("quadrature needs a positive radius")
    M = contour.nodes
    z = _nodes(contour.radius, M)
    val = np.mean(f(z) * z)
    if not contour.adaptive:
        return val, M, 0.0
    while True:
        M2 = 2 * M
        if M2 > contour.max_nodes:
            raise NonConvergenceError(f"no convergence with {M} nodes")
        z = _nodes(contour.radius, M2)
        new = np.mean(f(z) * z)
        err = abs(new - val)
        if err <= max(contour.rtol * abs(new), contour.atol):
            return new, M2, err
        val, M = new, M2


# --- queries ---------------------------------------------------------------

def _weyl(tup):
    return all(a < b for a, b in zip(tup, tup[1:]))


@dataclass(frozen=True)
class KernelQuery:
    """Transition ``source -> target`` of ``k`` ordered particles in ``t`` steps."""

    source: tuple
    target: tuple
    t: int

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(int(v) for v in self.source))
        object.__setattr__(self, "target", tuple(int(v) for v in self.target))
        if len(self.source) != len(self.target) or not self.source:
            raise ValueError("source and target must have the same positive length")
        if not (_weyl(self.source) and _weyl(self.target)):
            raise ValueError("positions must be strictly increasing")
        if self.t < 0:
            raise ValueError("t must be nonnegative")

    @property
    def k(self):
        return len(self.source)


GRADIENTS = (None, "x1", "x2", "y1", "y2")


@dataclass(frozen=True)
class SemigroupQuery:
    """Two-point tilted semigroup query.

    Sites are integers: ``source = (Y1, Y2)`` label ``y_i = Y_i - mu s`` on the
    shifted lattice at time ``s`` and ``target = (X1, X2)`` label
    ``x_i = X_i - mu (s + t)`` at time ``s + t``.  ``gradient`` selects a
    forward discrete gradient in one of the four coordinates.
    """

    source: tuple
    target: tuple
    t: int
    s: int = 0
    gradient: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(int(v) for v in self.source))
        object.__setattr__(self, "target", tuple(int(v) for v in self.target))
        if len(self.source) != 2 or len(self.target) != 2:
            raise ValueError("semigroup queries are two-point")
        if not (_weyl(self.source) and _weyl(self.target)):
            raise ValueError("positions must be strictly increasing")
        if self.gradient not in GRADIENTS:
            raise ValueError(f"gradient must be one of {GRADIENTS}")
        if self.gradient == "x1" and not self.target[0] + 1 < self.target[1]:
            raise ValueError("gradient in x1 leaves the Weyl chamber")
        if self.gradient == "y1" and not self.source[0] + 1 < self.source[1]:
            raise ValueError("gradient in y1 leaves the Weyl chamber")
        if self.t < 0 or self.s < 0:
            raise ValueError("times must be nonnegative")


# --- one-variable factors --------------------------------------------------

def ghat(params, z):
    """Generating function of the jump law, ``sum_n pmf(n) z**(-n)``."""
    b1, b2 = params.b1, params.b2
    return (b1 + (1.0 - b1 - b2) / z) / (1.0 - b2 / z)


def ghat_tilted(params, t, z):
    """``z**floor(mu t) (lambda ghat(tau**rho z))**t``, the tilted one-variable factor."""
    tr = params.tau ** params.rho
    b1, b2 = params.b1, params.b2
    base = params.lam * (b1 + (1.0 - b1 - b2) / (tr * z)) / (1.0 - b2 / (tr * z))
    return z ** math.floor(params.mu * t) * base ** t


def pole_inventory(params, kind="U"):
    """Moduli of the poles relevant to the contour.

    Returns a dict with the one-variable pole ``beta`` and the interaction
    constants ``c, d`` of ``S(a, b) = 1 - c a + d a b`` together with the
    radius beyond which the interaction denominators cannot vanish when all
    variables share one circle.
    """
    tau, rho = params.tau, params.rho
    if kind == "U":
        beta, c, d = params.b2, 1.0 + 1.0 / tau, 1.0 / tau
    elif kind == "V":
        beta, c, d = params.b2 * tau ** (-rho), (1.0 + 1.0 / tau) * tau ** rho, tau ** (2 * rho - 1)
    else:
        raise ValueError("kind must be 'U' or 'V'")
    r_int = (c + math.sqrt(c * c + 4.0 * d)) / (2.0 * d)
    return {"beta": beta, "c": c, "d": d, "interaction_radius": r_int}


def default_radius(params, k, kind="U"):
    """``1.5 x`` the largest pole modulus (one-particle case: at least 1)."""
    inv = pole_inventory(params, kind)
    if k == 1:
        return max(1.0, 1.5 * inv["beta"])
    return 1.5 * max(inv["beta"], inv["interaction_radius"])


# --- general-k literal formula ---------------------------------------------

def _S(params, a, b):
    tau = params.tau
    return 1.0 - (1.0 + 1.0 / tau) * a + a * b / tau


def _circle_kernel(params, query, contour):
    """Literal k-fold integral with every variable on the same circle."""
    k, t = query.k, query.t
    y, x = query.source, query.target
    r = contour.radius or default_radius(params, k)
    inv = pole_inventory(params)
    if k == 1 and r <= inv["beta"]:
        raise ContourError("radius must exceed b2")
    if k > 1 and r <= max(inv["beta"], inv["interaction_radius"]):
        raise ContourError(f"radius {r} does not enclose the interaction poles")
    span = max(abs(xi - yj) for xi in x for yj in y) + 1
    if r > 1 and span > contour.max_exponent:
        raise ExponentOverflowError(f"exponent {span} exceeds {contour.max_exponent}")
    perms = list(itertools.permutations(range(k)))

    def evaluate(M):
        z1 = _nodes(r, M)
        grids = np.meshgrid(*([z1] * k), indexing="ij", sparse=True)
        gt = [ghat(params, g) ** t for g in grids]
        total = 0.0
        for sigma in perms:
            sign = _perm_sign(sigma)
            term = sign
            for i in range(k):
                for j in range(i + 1, k):
                    term = term * _S(params, grids[sigma[i]], grids[sigma[j]]) / _S(params, grids[i], grids[j])
            for i in range(k):
                term = term * grids[i] ** (x[sigma[i]] - y[i])
            total = total + term
        for i in range(k):
            total = total * gt[i]
        # dz_i / (2 pi i z_i) with the extra z_i carried by the exponent shift;
        # the largest summand sets the round-off floor of the mean
        return np.mean(total), 4.0 * np.finfo(float).eps * float(np.abs(total).max())

    M = contour.nodes if k <= 2 else min(contour.nodes, 64)
    cap = min(contour.max_nodes, contour.max_nodes_2d) if k <= 2 else 256
    val, floor = evaluate(M)
    err = 0.0
    if contour.adaptive:
        while True:
            if 2 * M > cap:
                raise NonConvergenceError(f"no convergence with {M} nodes")
            new, floor = evaluate(2 * M)
            err = abs(new - val)
            M *= 2
            val = new
            if err <= max(contour.rtol * abs(new), contour.atol, floor):
                break
    return KernelValue(float(val.real), float(abs(val.imag)), M, float(err))


def _perm_sign(p):
    sign = 1
    p = list(p)
    for i in range(len(p)):
        while p[i] != i:
            j = p[i]
            p[i], p[j] = p[j], p[i]
            sign = -sign
    return sign


# --- two-point engine ------------------------------------------------------

def lead_tail_bound(params, t, d):
    """``P(S_t >= d)`` for the sum ``S_t`` of ``t`` free one-step jumps.

    The leftmost particle of a pair jumps ``min(J, gap)`` with ``J`` a free
    jump, so its displacement is dominated by ``S_t``.  Computed from the
    binomial number of nonzero jumps and negative binomial sums, which keeps
    relative accuracy deep in the tail.
    """
    d = np.asarray(d, dtype=float)
    out = np.where(d <= 0, 1.0, 0.0)
    for k in range(1, int(t) + 1):
        wk = stats.binom.pmf(k, t, 1.0 - params.b1)
        out = out + np.where(d <= 0, 0.0, wk * stats.nbinom.sf(d - k - 1, k, 1.0 - params.b2))
    return np.minimum(out, 1.0)


def _pair_index(lo, hi, y1, y2):
    """Position of the ordered pair ``(y1, y2)`` in the row-major list of pairs on ``[lo, hi]``."""
    L = hi - lo + 1
    a, b = np.asarray(y1) - lo, np.asarray(y2) - lo
    return a * (2 * L - a - 1) // 2 + (b - a - 1)


def _pair_chain(params, lo, hi):
    """One-step transition matrix (sparse) of two ordered particles on ``[lo, hi]``.

    Mass leaving through ``hi`` is dropped; it cannot return.
    """
    b1, b2 = params.b1, params.b2
    L = hi - lo + 1
    n = L * (L - 1) // 2
    rows, cols, data = [], [], []
    for y1 in range(lo, hi + 1):
        for y2 in range(y1 + 1, hi + 1):
            row = _pair_index(lo, hi, y1, y2)
            g = y2 - y1
            m = np.arange(hi - y2 + 1)
            free2 = np.where(m == 0, b1, (1 - b1) * (1 - b2) * b2 ** (m - 1.0))
            pushed = np.where(m == 0, 0.0, (1 - b2) * b2 ** (m - 1.0))
            j = np.arange(g)
            w = np.where(j == 0, b1, (1 - b1) * (1 - b2) * b2 ** (j - 1.0))
            c = _pair_index(lo, hi, (y1 + j)[:, None], (y2 + m)[None, :]).ravel()
            rows.append(np.full(c.size, row))
            cols.append(c)
            data.append((w[:, None] * free2[None, :]).ravel())
            c = _pair_index(lo, hi, y2, y2 + m[1:])
            rows.append(np.full(c.size, row))
            cols.append(c)
            data.append((1 - b1) * b2 ** (g - 1) * pushed[1:])
    rows, cols, data = (np.concatenate(v) for v in (rows, cols, data))
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def _split_radii(beta, c, d, candidates=(0.1, 0.05, 0.2, 0.3, 0.02)):
    """Pick ``r1 = e**delta > 1 > r2 = e**(-delta)`` with all pole families well separated."""
    for delta in candidates:
        r1, r2 = math.exp(delta), math.exp(-delta)
        if c * r1 <= 1.0:
            continue
        zmin = c / d - 1.0 / (d * r1)       # smallest |z2*(z1)| on |z1| = r1
        z1max = 1.0 / (c - d * r2) if c > d * r2 else math.inf
        if beta / r2 < 0.95 and r2 / zmin < 0.95 and z1max / r1 < 0.95:
            return r1, r2
    raise ContourError("no admissible split radii for these parameters")


class PairKernel:
    """Two-particle kernel ``free - interacting`` for one time horizon ``t``.

    ``kind='U'`` gives the forward transition probability of two particles;
    ``kind='V'`` the tilted semigroup.  Arguments are integer sites; the
    exponents are ``X - Y - shift`` where ``shift = floor(mu t)`` for ``V``,
    and the one-variable factor carries ``z**shift`` back.

    Values for many queries are computed at once from FFT tables of the
    trapezoid sums.
    """

    def __init__(self, params, t, kind="V", contour=None):
        self.params = params
        self.t = int(t)
        self.kind = kind
        self.contour = contour or ContourSpec()
        inv = pole_inventory(params, kind)
        self.beta, self.c, self.d = inv["beta"], inv["c"], inv["d"]
        self.shift = math.floor(params.mu * t) if kind == "V" else 0
        self.r0 = 1.0
        if self.beta >= self.r0:
            raise ContourError("one-variable pole outside the unit circle")
        self.r1, self.r2 = _split_radii(self.beta, self.c, self.d)
        # residue-free tori: z1 just outside the one-variable pole, z2 outside
        # every interaction pole z2*(z1); these avoid the growth of z2*(z1)**b
        # when both interacting exponents are large and positive
        self.torus_radii = []
        for frac in (0.1, 0.25, 0.5):
            r1 = self.beta + frac * (1.0 - self.beta)
            self.torus_radii.append((r1, 1.15 * (self.c + 1.0 / r1) / self.d))

    # one-variable factor including any z**shift
    def g(self, z):
        if self.kind == "V":
            return ghat_tilted(self.params, self.t, z)
        return ghat(self.params, z) ** self.t

    def _fhat(self, z1, z2):
        c, d = self.c, self.d
        return (1.0 + d * z1 * z2 - c * z2) / (1.0 + d * z1 * z2 - c * z1)

    @staticmethod
    def _factor(var_z, coords, which):
        """Product of gradient factors for the coordinates carried by ``which``."""
        f = 1.0
        for coord, direction in coords:
            if coord not in which:
                continue
            if coord[0] == "x":
                f = f * ((var_z - 1.0) if direction > 0 else (1.0 - 1.0 / var_z))
            else:
                f = f * ((1.0 / var_z - 1.0) if direction > 0 else (1.0 - var_z))
        return f

    def evaluate(self, Y1, Y2, X1, X2, grads=(), parts="full"):
        """Kernel values for integer site arrays.

        Parameters
        ----------
        Y1, Y2, X1, X2 : array_like of int
            Sources at the earlier time and targets at the later time.
        grads : sequence of (coordinate, direction)
            Discrete gradients applied to the kernel, e.g. ``[("x1", +1)]``
            for ``K(x1 + 1) - K(x1)`` or ``[("y1", -1)]`` for ``K(y1) - K(y1 - 1)``.
        parts : {"full", "free", "int"}

        Returns
        -------
        (values, imag_residual, nodes, error_estimate)
        """
        Y1, Y2, X1, X2 = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (Y1, Y2, X1, X2))
        Y1, Y2, X1, X2 = np.broadcast_arrays(Y1, Y2, X1, X2)
        if parts == "full":
            # entries provably below atol are not integrated: their contour
            # sums cancel from huge summands and would only add noise
            bound = self.upper_bound(Y1, Y2, X1, X2, len(grads))
            small = bound <= self.contour.atol
            if small.any():
                vals = np.zeros(Y1.shape)
                imag = np.zeros(Y1.shape)
                err = bound.astype(float).copy()
                M = self.contour.nodes
                keep = ~small
                if keep.any():
                    v, im, M, e = self.evaluate(Y1[keep], Y2[keep], X1[keep], X2[keep], grads, parts="_full")
                    vals[keep], imag[keep], err[keep] = v, im, e
                return vals, imag, M, err
        elif parts == "_full":
            parts = "full"
        s = self.shift
        ef1 = X1 - Y1 - s
        ef2 = X2 - Y2 - s
        ea = X2 - Y1 - s
        eb = X1 - Y2 - s
        span = int(max(np.abs(ef1).max(), np.abs(ef2).max(), np.abs(ea).max(), np.abs(eb).max()))
        if span > self.contour.max_exponent:
            raise ExponentOverflowError(f"exponent {span} exceeds {self.contour.max_exponent}")
        M = self.contour.nodes
        while M <= 2 * span + 8:
            M *= 2
        prev, floor = self._compute(M, ef1, ef2, ea, eb, grads, parts)
        err = np.zeros_like(prev.real)
        if self.contour.adaptive:
            while True:
                if 2 * M > min(self.contour.max_nodes, self.contour.max_nodes_2d):
                    raise NonConvergenceError(f"no convergence with {M} nodes")
                M *= 2
                new, floor = self._compute(M, ef1, ef2, ea, eb, grads, parts)
                err = np.abs(new - prev)
                scale = max(float(np.abs(new).max()), 1e-300)
                prev = new
                tol = np.maximum(self.contour.rtol * np.maximum(np.abs(new), scale * 1e-3), floor)
                if np.all(err <= tol):
                    break
        vals, imag = prev.real, np.abs(prev.imag)
        if parts == "full" and self.contour.fallback:
            bad = np.maximum(err, floor) > self.contour.atol * np.maximum(1.0, np.abs(vals))
            if bad.any():
                exact, ok = self.recursion(Y1[bad], Y2[bad], X1[bad], X2[bad], grads)
                idx = np.flatnonzero(bad)[ok]
                vals, imag, err = vals.copy(), imag.copy(), err.copy()
                vals[idx] = exact[ok]
                imag[idx] = 0.0
                err[idx] = 0.0
        return vals, imag, M, err

    def recursion(self, Y1, Y2, X1, X2, grads=()):
        """Kernel values by iterating the one-step pair chain ``t`` times.

        Particles only move right, so every path between the sources and the
        targets stays inside ``[min Y1, max X2]`` and the recursion is exact.
        Returns ``(values, ok)``; ``ok`` is False where a gradient shift
        leaves the ordered pairs, and those values are meaningless.
        """
        combos = [((0, 0, 0, 0), 1.0)]
        pos = {"y1": 0, "y2": 1, "x1": 2, "x2": 3}
        for coord, direction in grads:
            i = pos[coord]
            hi_s, lo_s = (1, 0) if direction > 0 else (0, -1)
            nxt = []
            for sh, w in combos:
                up, dn = list(sh), list(sh)
                up[i] += hi_s
                dn[i] += lo_s
                nxt += [(tuple(up), w), (tuple(dn), -w)]
            combos = nxt
        base = np.stack([Y1, Y2, X1, X2]).astype(np.int64)
        shifted = [(base + np.array(sh)[:, None], w) for sh, w in combos]
        ok = np.ones(base.shape[1], dtype=bool)
        for arr, _ in shifted:
            ok &= (arr[0] < arr[1]) & (arr[2] < arr[3])
        out = np.zeros(base.shape[1])
        if not ok.any():
            return out, ok
        lo = min(int(arr[0][ok].min()) for arr, _ in shifted)
        hi = max(int(max(arr[3][ok].max(), arr[1][ok].max())) for arr, _ in shifted)
        T = _pair_chain(self.params, lo, hi)
        TT = T.T.tocsr()
        p = self.params
        # propagate from whichever side has fewer distinct pairs
        live = [(arr[:, j], w, j) for arr, w in shifted for j in np.flatnonzero(ok)
                if arr[2, j] >= arr[0, j] and arr[3, j] >= arr[1, j]]
        n_src = len({(int(a[0]), int(a[1])) for a, _, _ in live})
        n_tgt = len({(int(a[2]), int(a[3])) for a, _, _ in live})
        from_source = n_src <= n_tgt
        cache = {}
        for a, w, j in live:
            y1, y2, x1, x2 = (int(v) for v in a)
            key, other = ((y1, y2), (x1, x2)) if from_source else ((x1, x2), (y1, y2))
            if key not in cache:
                h = np.zeros(T.shape[0])
                h[_pair_index(lo, hi, *key)] = 1.0
                M = TT if from_source else T
                for _ in range(self.t):
                    h = M @ h
                cache[key] = h
            val = cache[key][_pair_index(lo, hi, *other)]
            if self.kind == "V":
                val *= p.lam ** (2 * self.t) * p.tau ** (-p.rho * (x1 + x2 - y1 - y2))
            out[j] += w * val
        return out, ok

    def upper_bound(self, Y1, Y2, X1, X2, n_grads=0):
        """A priori bound on ``|kernel|`` from the leftmost particle's displacement.

        Each discrete gradient is bounded by twice the worst shifted value.
        """
        n = int(n_grads)
        d = np.asarray(X1) - np.asarray(Y1) - n
        b = lead_tail_bound(self.params, self.t, d) * 2.0 ** n
        if self.kind == "V":
            p = self.params
            e = np.asarray(X1) + np.asarray(X2) - np.asarray(Y1) - np.asarray(Y2)
            e = e + (2 * n if p.tau < 1 else -2 * n)
            b = b * p.lam ** (2 * self.t) * p.tau ** (-p.rho * e.astype(float))
        return b

    def _residue_line(self, u, r, ea, eb, grads):
        """Residue term at ``z2*(z1)`` integrated over ``|z1| = r``, with summand magnitudes."""
        z1 = r * u
        g1 = self.g(z1) * self._factor(z1, grads, ("x2", "y1"))
        zs = (self.c * z1 - 1.0) / (self.d * z1)
        gs = self.g(zs) * self._factor(zs, grads, ("x1", "y2"))
        base = self.c * (z1 - zs) / (self.d * z1) * g1 * gs / zs
        b_vals, b_inv = np.unique(eb, return_inverse=True)
        H = base[None, :] * zs[None, :] ** b_vals[:, None].astype(float)
        R = np.fft.ifft(H, axis=1)
        w = r ** ea.astype(float)
        resid = R[b_inv.ravel(), (ea % u.size).ravel()].reshape(ea.shape) * w
        mag = np.abs(H).max(axis=1)[b_inv.ravel()].reshape(ea.shape) * w
        return resid, mag

    def _interacting_split(self, u, ea, eb, grads):
        """Interacting part on the ``(r1 > 1 > r2)`` torus plus the residue line at ``z2*(z1)``.

        The residue line is analytic in ``z1`` outside the one-variable poles
        of ``g(z1)`` and ``g(z2*(z1))`` and the zero of ``z2*``, so it is
        integrated on whichever admissible radius gives the smallest summands.
        """
        M = u.size
        z1 = self.r1 * u
        z2 = self.r2 * u
        g1 = self.g(z1) * self._factor(z1, grads, ("x2", "y1"))
        g2 = self.g(z2) * self._factor(z2, grads, ("x1", "y2"))
        F = self._fhat(z1[:, None], z2[None, :]) * g1[:, None] * g2[None, :]
        T = np.fft.ifft2(F)
        torus = T[ea % M, eb % M] * self.r1 ** ea.astype(float) * self.r2 ** eb.astype(float)
        tmag = np.abs(F).max() * self.r1 ** ea.astype(float) * self.r2 ** eb.astype(float)
        resid, rmag = self._best_residue_line(u, ea, eb, grads)
        return torus + resid, tmag + rmag

    def _best_residue_line(self, u, ea, eb, grads):
        """Residue line on ``r1`` or a smaller admissible radius, per entry, by summand size."""
        resid, rmag = self._residue_line(u, self.r1, ea, eb, grads)
        r_min = max(self.beta, 1.0 / (self.c - self.d * self.beta), 1.0 / self.c)
        for f in (1.2, 1.5, 2.0):
            r = f * r_min
            if r >= self.r1:
                continue
            val, m = self._residue_line(u, r, ea, eb, grads)
            better = m < rmag
            resid = np.where(better, val, resid)
            rmag = np.where(better, m, rmag)
        return resid, rmag

    def _interacting_torus(self, u, r1, r2, ea, eb, grads):
        """Interacting part on a torus with every interaction pole inside ``|z2| = r2``."""
        M = u.size
        z1 = r1 * u
        z2 = r2 * u
        g1 = self.g(z1) * self._factor(z1, grads, ("x2", "y1"))
        g2 = self.g(z2) * self._factor(z2, grads, ("x1", "y2"))
        F = self._fhat(z1[:, None], z2[None, :]) * g1[:, None] * g2[None, :]
        T = np.fft.ifft2(F)
        w = r1 ** ea.astype(float) * r2 ** eb.astype(float)
        return T[ea % M, eb % M] * w, np.abs(F).max() * w

    def _compute(self, M, ef1, ef2, ea, eb, grads, parts):
        """Trapezoid values and a round-off floor for each entry.

        The floor is ``atol`` times the largest summand magnitude of the
        sum behind each entry, since cancellation below that is noise.
        """
        u = np.exp(2j * np.pi * np.arange(M) / M)
        out = np.zeros(ef1.shape, dtype=complex)
        mag = np.zeros(ef1.shape)
        if parts in ("full", "free"):
            z = self.r0 * u
            gz = self.g(z)
            A1 = np.fft.ifft(gz * self._factor(z, grads, ("x1", "y1")))
            A2 = np.fft.ifft(gz * self._factor(z, grads, ("x2", "y2")))
            r0 = self.r0
            out += A1[ef1 % M] * r0 ** ef1 * A2[ef2 % M] * r0 ** ef2
            mag += np.abs(gz).max() ** 2
        if parts in ("full", "int"):
            inter, imag = self._interacting_split(u, ea, eb, grads)
            for r1, r2 in self.torus_radii:
                val, m = self._interacting_torus(u, r1, r2, ea, eb, grads)
                better = m < imag
                inter = np.where(better, val, inter)
                imag = np.where(better, m, imag)
            out += (-1.0 if parts == "full" else 1.0) * inter
            mag += imag
        return out, self.contour.atol * mag


def _value(arrs):
    vals, imag, M, err = arrs
    return KernelValue(float(vals[0]), float(imag[0]), int(M), float(err[0]))


def transition_prob(params, query, contour=None, method="auto"):
    """Forward transition probability ``P(source -> target; t)``.

    ``method`` is ``"split"`` (default for two particles), ``"circle"`` (the
    literal single-circle formula, the default for ``k >= 3``) or
    ``"auto"``.  One particle always uses a circle of radius at least 1.
    """
    contour = contour or ContourSpec()
    if query.t == 0:
        return KernelValue(float(query.source == query.target), 0.0, 0, 0.0)
    if query.k == 1:
        r = contour.radius or default_radius(params, 1)
        if r <= params.b2:
            raise ContourError("radius must exceed b2")
        n = query.target[0] - query.source[0]
        if r > 1 and abs(n) > contour.max_exponent:
            raise ExponentOverflowError("exponent too large")
        spec = ContourSpec(r, contour.nodes, contour.adaptive, contour.rtol, contour.max_nodes)
        val, M, err = quadrature(lambda z: z ** (n - 1) * ghat(params, z) ** query.t, spec)
        return KernelValue(float(val.real), float(abs(val.imag)), M, float(err))
    if method == "auto":
        method = "split" if query.k == 2 and contour.radius is None else "circle"
    if method == "circle":
        return _circle_kernel(params, query, contour)
    if method != "split" or query.k != 2:
        raise ValueError("split evaluation is only available for two particles")
    pk = PairKernel(params, query.t, "U", contour)
    (y1, y2), (x1, x2) = query.source, query.target
    return _value(pk.evaluate(y1, y2, x1, x2))


def one_particle_table(params, t, n_max, nodes=None):
    """``P(y -> y + n; t)`` for ``n = 0..n_max`` from one FFT on the unit circle.

    On ``|z| = 1`` the integrand ``ghat(z)**t`` is bounded by 1, so the
    trapezoid sums are accurate to rounding once ``nodes > n_max + t``.
    """
    M = nodes or max(256, 1 << (2 * (n_max + t) + 8).bit_length())
    z = _nodes(1.0, M)
    table = np.fft.ifft(ghat(params, z) ** t)
    return table[: n_max + 1].real


def reversed_transition_prob(params, query, contour=None, method="auto"):
    """Kernel of the space-reflected model, where particles move left.

    ``Pbar(y -> y'; t) = P(-y -> -y'; t)`` with reflected tuples re-sorted.
    """
    src = tuple(sorted(-v for v in query.source))
    tgt = tuple(sorted(-v for v in query.target))
    return transition_prob(params, KernelQuery(src, tgt, query.t), contour, method)


def _grads_for(selector):
    return () if selector is None else ((selector, +1),)


def semigroup_V(params, query, contour=None, method="split"):
    """Tilted two-point semigroup ``V((y1, y2), (x1, x2); t)``.

    ``method="circle"`` evaluates the defining double integral literally on
    one large circle (reliable only for small ``t``).  The default splits it
    into free and interacting parts as described in the module docstring.
    A gradient selector on the query is honoured.
    """
    contour = contour or ContourSpec()
    if query.t == 0 and query.gradient is None:
        return KernelValue(float(query.source == query.target), 0.0, 0, 0.0)
    if method == "circle":
        return _semigroup_circle(params, query, contour)
    pk = PairKernel(params, query.t, "V", contour)
    (y1, y2), (x1, x2) = query.source, query.target
    return _value(pk.evaluate(y1, y2, x1, x2, _grads_for(query.gradient)))


def _semigroup_circle(params, query, contour):
    inv = pole_inventory(params, "V")
    r = contour.radius or 1.5 * max(inv["beta"], inv["interaction_radius"])
    if r <= max(inv["beta"], inv["interaction_radius"]):
        raise ContourError(f"radius {r} does not enclose the poles")
    t = query.t
    shift = math.floor(params.mu * t)
    (Y1, Y2), (X1, X2) = query.source, query.target
    e11, e22, e21, e12 = X1 - Y1 - shift, X2 - Y2 - shift, X2 - Y1 - shift, X1 - Y2 - shift
    if max(abs(e11), abs(e22), abs(e21), abs(e12)) + shift > contour.max_exponent:
        raise ExponentOverflowError("exponent too large for the large circle")
    c, d = inv["c"], inv["d"]
    grads = _grads_for(query.gradient)

    def evaluate(M):
        z = _nodes(r, M)
        z1, z2 = z[:, None], z[None, :]
        g = ghat_tilted(params, t, z)
        fr = PairKernel._factor(z1, grads, ("x1", "y1")) * PairKernel._factor(z2, grads, ("x2", "y2"))
        fi = PairKernel._factor(z1, grads, ("x2", "y1")) * PairKernel._factor(z2, grads, ("x1", "y2"))
        fh = (1.0 + d * z1 * z2 - c * z2) / (1.0 + d * z1 * z2 - c * z1)
        integrand = (fr * z1 ** e11 * z2 ** e22 - fi * fh * z1 ** e21 * z2 ** e12) * g[:, None] * g[None, :]
        return np.mean(integrand)

    M = contour.nodes
    val = evaluate(M)
    err = 0.0
    if contour.adaptive:
        while True:
            if 2 * M > min(contour.max_nodes, contour.max_nodes_2d):
                raise NonConvergenceError(f"no convergence with {M} nodes")
            M *= 2
            new = evaluate(M)
            err = abs(new - val)
            val = new
            if err <= max(contour.rtol * abs(new), contour.atol):
                break
    return KernelValue(float(val.real), float(abs(val.imag)), M, float(err))


def gradient_V(params, query, contour=None, by_difference=False):
    """Discrete gradient of ``V`` selected by ``query.gradient``.

    Evaluated as one integral carrying the factor ``z - 1`` (target
    coordinates) or ``1/z - 1`` (source coordinates); with
    ``by_difference`` it is computed instead as the difference of two
    :func:`semigroup_V` values.
    """
    if query.gradient is None:
        raise ValueError("query has no gradient selector")
    if not by_difference:
        return semigroup_V(params, query, contour)
    idx = {"y1": (0, 0), "y2": (0, 1), "x1": (1, 0), "x2": (1, 1)}[query.gradient]
    pair = [list(query.source), list(query.target)]
    base = SemigroupQuery(query.source, query.target, query.t, query.s)
    pair[idx[0]][idx[1]] += 1
    moved = SemigroupQuery(tuple(pair[0]), tuple(pair[1]), query.t, query.s)
    v1 = semigroup_V(params, moved, contour)
    v0 = semigroup_V(params, base, contour)
    return KernelValue(v1.value - v0.value, max(v1.imag_residual, v0.imag_residual),
                       max(v1.nodes, v0.nodes), v1.error_estimate + v0.error_estimate)


def tilting_prefactor(params, query):
    """``lambda**(2t) tau**(-rho (x1 + x2 - y1 - y2 + 2 mu t))`` for integer sites."""
    (Y1, Y2), (X1, X2) = query.source, query.target
    return params.lam ** (2 * query.t) * params.tau ** (-params.rho * (X1 + X2 - Y1 - Y2))


# --- decay bounds ----------------------------------------------------------

@dataclass
class BoundReport:
    """Outcome of :func:`verify_bounds`; constants are fitted at the smallest time."""

    C_value: float
    C_gradient: float
    rows: list
    violations: list
    split_gap: float
    note: str = "constants fitted on the smallest t and frozen"


def verify_bounds(params, alpha, T, t_grid, offset_grid, window=None, contour=None):
    """Check the kernel and gradient decay bounds on a grid.

    For each ``t`` and each source offset ``(0, g)`` in ``offset_grid`` the
    kernel is evaluated on all target pairs within ``window`` sites of the
    characteristic (default ``4 sqrt(t + 1) + 6``).  The bound
    ``|V| <= C/(t+1) exp(-alpha (|x1-y1| + |x2-y2|)/(sqrt(t+1) + C))`` and its
    gradient analogue with ``(t+1)**1.5`` are checked with ``C`` fitted on
    the smallest ``t``.  The split ``V = V_free - V_int`` is compared with a
    single-torus evaluation of the whole integrand.
    """
    t_grid = sorted(t_grid)
    if params.eps > 0 and max(t_grid) > T / params.eps ** 2:
        raise ValueError("t_grid exceeds eps**-2 T")
    rows = []
    split_gap = 0.0
    for t in t_grid:
        pk = PairKernel(params, t, "V", contour)
        w = window or int(4 * math.sqrt(t + 1) + 6)
        centre = round(params.mu * t)
        for g in offset_grid:
            Y1, Y2 = 0, g
            xs = np.arange(centre - w, centre + g + w + 1)
            X1, X2 = np.meshgrid(xs, xs, indexing="ij")
            keep = X1 + 1 < X2
            X1, X2 = X1[keep], X2[keep]
            Y1a, Y2a = np.full_like(X1, Y1), np.full_like(X1, Y2)
            V = pk.evaluate(Y1a, Y2a, X1, X2)[0]
            free = pk.evaluate(Y1a, Y2a, X1, X2, parts="free")[0]
            inter = pk.evaluate(Y1a, Y2a, X1, X2, parts="int")[0]
            whole = _whole_torus(pk, Y1a, Y2a, X1, X2)
            split_gap = max(split_gap, float(np.abs(whole - (free - inter)).max()),
                            float(np.abs(V - (free - inter)).max()))
            gV = pk.evaluate(Y1a, Y2a, X1, X2, grads=(("x1", +1),))[0]
            dist = np.abs(X1 - Y1 - params.mu * t) + np.abs(X2 - Y2 - params.mu * t)
            rows.append((t, g, float(np.abs(V).max()), float(np.abs(gV).max()), V, gV, dist))
    t0 = t_grid[0]
    C_v = C_g = 0.0
    for t, g, _, _, V, gV, dist in rows:
        if t != t0:
            continue
        C_v = max(C_v, float((np.abs(V) * (t + 1) * np.exp(alpha * dist / math.sqrt(t + 1))).max()))
        C_g = max(C_g, float((np.abs(gV) * (t + 1) ** 1.5 * np.exp(alpha * dist / math.sqrt(t + 1))).max()))
    violations = []
    out_rows = []
    for t, g, mv, mg, V, gV, dist in rows:
        bv = C_v / (t + 1) * np.exp(-alpha * dist / (math.sqrt(t + 1) + C_v))
        bg = C_g / (t + 1) ** 1.5 * np.exp(-alpha * dist / (math.sqrt(t + 1) + C_g))
        nv = int(np.sum(np.abs(V) > bv))
        ng = int(np.sum(np.abs(gV) > bg))
        if nv or ng:
            violations.append((t, g, nv, ng))
        out_rows.append({"t": t, "offset": g, "max_abs_V": mv, "max_abs_gradV": mg,
                         "violations_V": nv, "violations_gradV": ng})
    return BoundReport(C_v, C_g, out_rows, violations, split_gap)


def _whole_torus(pk, Y1, Y2, X1, X2, M=None):
    """Whole integrand (free minus interacting) on the split torus, minus the residue term."""
    s = pk.shift
    e11, e22, ea, eb = X1 - Y1 - s, X2 - Y2 - s, X2 - Y1 - s, X1 - Y2 - s
    span = int(max(np.abs(e11).max(), np.abs(e22).max(), np.abs(ea).max(), np.abs(eb).max()))
    M = M or max(pk.contour.nodes, 1 << (2 * span + 8).bit_length()) * 2
    u = np.exp(2j * np.pi * np.arange(M) / M)
    z1, z2 = pk.r1 * u, pk.r2 * u
    g1, g2 = pk.g(z1), pk.g(z2)
    fh = pk._fhat(z1[:, None], z2[None, :])
    G = g1[:, None] * g2[None, :]
    Tfree = np.fft.ifft2(G)
    Tint = np.fft.ifft2(fh * G)
    torus = (Tfree[e11 % M, e22 % M] * pk.r1 ** e11.astype(float) * pk.r2 ** e22.astype(float)
             - Tint[ea % M, eb % M] * pk.r1 ** ea.astype(float) * pk.r2 ** eb.astype(float))
    resid, _ = pk._best_residue_line(u, ea, eb, ())
    return (torus - resid).real
