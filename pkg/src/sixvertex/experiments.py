"""Configuration, orchestration and persistence of experiments, plus the
macroscopic observables (rescaled heights, empirical line field, C^-1 seminorm).

Configuration files are INI-style text read with :mod:`configparser`::

    [experiment]
    kind = duality
    seed = 7

    [model]
    b1 = 0.6
    b2 = 0.3
    rho = 0.5

Lists are whitespace separated.  Every key is typed by ``SCHEMA`` and unknown
sections or keys are rejected before anything runs.

A run writes comma-separated tables (first line ``# sixvertex-table v1``,
then a header row, floats with 17 significant digits) and a ``record.json``
holding the config snapshot, a file manifest with SHA-256 digests, wall
times and summary statistics.  Tables never contain timings, so the same
config and seed give byte-identical tables.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import itertools
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from . import bethe_kernel as bk
from . import duality as du
from . import hopf_cole as hc
from .dynamics import (InitialCondition, KeyedDrivers, OccupationWindow, height_observables,
                       run_batch, sample_gibbs, simulate, stationary_h)
from .model_core import ModelParams

TABLE_SCHEMA = "# sixvertex-table v1"
OUTPUT_ENV = "SIXVERTEX_OUTPUT_ROOT"

KINDS = ("simulate", "kernel-table", "duality", "quadvar", "stationarity",
         "self-averaging", "scaling-sweep", "gibbs-sample", "empirical-field")

# section -> key -> type tag
SCHEMA = {
    "experiment": {"kind": "str", "seed": "int", "replicas": "int", "out": "str", "threads": "int"},
    "model": {"b1": "float", "b2": "float", "rho": "float", "eps": "float", "weak": "bool"},
    "initial": {"kind": "str", "v": "float", "occupancy": "ints", "left": "int", "n_left": "int"},
    "grid": {"eps": "floats", "t": "ints", "sites": "ints", "time": "floats", "space": "floats"},
    "options": {"observables": "strs", "mode": "str", "n_max": "int", "source": "ints",
                "n_sites": "int", "x_star": "int", "box": "ints", "ell": "float",
                "deltas": "floats", "step_shift": "bool", "window": "ints",
                "control_shift": "float"},
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _parse_value(tag, text, name):
    try:
        if tag == "str":
            return text.strip()
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            low = text.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tag == "ints":
            return [int(v) for v in text.split()]
        if tag == "floats":
            return [float(v) for v in text.split()]
        if tag == "strs":
            return text.split()
    except ValueError:
        raise ConfigError(name, f"cannot read {text!r} as {tag}") from None
    raise AssertionError(tag)


def _format_value(tag, value):
    if tag == "bool":
        return "true" if value else "false"
    if tag in ("ints", "floats", "strs"):
        return " ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if tag == "float":
        return repr(float(value))
    return str(value)


@dataclass
class ExperimentConfig:
    """A validated experiment description.

    ``sections`` maps section names to typed values; only keys present in the
    source text are stored, so serialisation reproduces the input content.
    """

    sections: dict = field(default_factory=dict)

    # -- access ------------------------------------------------------------
    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def set(self, section, key, value):
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"{section}.{key}", "unknown key")
        self.sections.setdefault(section, {})[key] = value

    @property
    def kind(self):
        return self.get("experiment", "kind")

    @property
    def seed(self):
        return self.get("experiment", "seed", 0)

    @property
    def replicas(self):
        return self.get("experiment", "replicas", 1000)

    # -- text round trip ---------------------------------------------------
    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("file", str(exc).splitlines()[0]) from None
        sections = {}
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(sec, "unknown section")
            for key, raw in cp.items(sec):
                name = f"{sec}.{key}"
                if key not in SCHEMA[sec]:
                    raise ConfigError(name, "unknown key")
                sections.setdefault(sec, {})[key] = _parse_value(SCHEMA[sec][key], raw, name)
        cfg = cls(sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def to_text(self):
        out = []
        for sec, keys in SCHEMA.items():
            vals = self.sections.get(sec)
            if not vals:
                continue
            out.append(f"[{sec}]")
            for key, tag in keys.items():
                if key in vals:
                    out.append(f"{key} = {_format_value(tag, vals[key])}")
            out.append("")
        return "\n".join(out)

    # -- validation --------------------------------------------------------
    def validate(self):
        """Check every field; raise :class:`ConfigError` naming the first bad one."""
        kind = self.kind
        if kind is None:
            raise ConfigError("experiment.kind", "missing")
        if kind not in KINDS:
            raise ConfigError("experiment.kind", f"must be one of {', '.join(KINDS)}")
        if self.replicas < 1:
            raise ConfigError("experiment.replicas", "must be positive")
        if self.get("experiment", "threads", 1) < 1:
            raise ConfigError("experiment.threads", "must be positive")
        if self.seed < 0:
            raise ConfigError("experiment.seed", "must be nonnegative")
        m = self.sections.get("model", {})
        for key in ("b1", "rho"):
            if key not in m:
                raise ConfigError(f"model.{key}", "missing")
            if not 0.0 < m[key] < 1.0:
                raise ConfigError(f"model.{key}", f"must lie in (0, 1), got {m[key]!r}")
        if m.get("weak", False):
            if m.get("eps", 0.0) <= 0.0 and not self.get("grid", "eps"):
                raise ConfigError("model.eps", "weak asymmetry needs eps > 0 (or a grid.eps list)")
            if "b2" in m:
                raise ConfigError("model.b2", "derived from b1 and eps under weak asymmetry")
        else:
            if "b2" not in m:
                raise ConfigError("model.b2", "missing")
            if not 0.0 < m["b2"] < m["b1"]:
                raise ConfigError("model.b2", f"must satisfy 0 < b2 < b1, got {m['b2']!r}")
        if m.get("eps", 0.0) < 0.0:
            raise ConfigError("model.eps", "must be nonnegative")
        for e in self.get("grid", "eps", []) or []:
            if not 0.0 < e <= 0.25:
                raise ConfigError("grid.eps", f"values must lie in (0, 0.25], got {e!r}")
        for t in self.get("grid", "t", []) or []:
            if t < 0:
                raise ConfigError("grid.t", "times must be nonnegative")
        ini = self.sections.get("initial", {})
        ik = ini.get("kind", "step")
        if ik not in ("step", "bernoulli", "explicit"):
            raise ConfigError("initial.kind", "must be step, bernoulli or explicit")
        if ik == "bernoulli" and not 0.0 <= ini.get("v", -1.0) <= 1.0:
            raise ConfigError("initial.v", "bernoulli start needs v in [0, 1]")
        if ik == "explicit":
            occ = ini.get("occupancy")
            if not occ or any(o not in (0, 1) for o in occ):
                raise ConfigError("initial.occupancy", "explicit start needs a 0/1 list")
        mode = self.get("options", "mode", "exact")
        if mode not in ("exact", "monte-carlo"):
            raise ConfigError("options.mode", "must be exact or monte-carlo")
        for tag in self.get("options", "observables", []) or []:
            if tag not in du.OBSERVABLES:
                raise ConfigError("options.observables", f"unknown observable {tag!r}")
        box = self.get("options", "box")
        if box is not None and (len(box) != 2 or min(box) <= 0):
            raise ConfigError("options.box", "needs two positive integers")
        win = self.get("options", "window")
        if win is not None and (len(win) != 2 or win[0] > win[1]):
            raise ConfigError("options.window", "needs two integers a <= b")
        if kind == "stationarity" and ini.get("kind") != "bernoulli":
            raise ConfigError("initial.kind", "stationarity needs a bernoulli start")
        if kind in ("self-averaging", "scaling-sweep", "empirical-field") and not (
                m.get("weak", False) and self.get("grid", "eps")):
            raise ConfigError("grid.eps", f"{kind} needs weak = true and an eps grid")
        # the parameter bundle itself (divergent tilt and similar)
        try:
            for p in self.param_sets():
                del p
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None
        return self

    def param_sets(self):
        """Model parameters, one per ``grid.eps`` entry under weak asymmetry."""
        m = self.sections.get("model", {})
        if m.get("weak", False):
            grid = self.get("grid", "eps") or [m["eps"]]
            return [ModelParams.weakly_asymmetric(m["b1"], e, m["rho"]) for e in grid]
        return [ModelParams(m["b1"], m["b2"], m["rho"], m.get("eps", 0.0))]

    def params(self):
        return self.param_sets()[0]

    def initial(self):
        ini = self.sections.get("initial", {})
        kind = ini.get("kind", "step")
        if kind == "bernoulli":
            return InitialCondition.bernoulli(ini["v"])
        if kind == "explicit":
            return InitialCondition.explicit(ini["occupancy"])
        return InitialCondition.step()


# --- tables ----------------------------------------------------------------

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def table_bytes(header, rows):
    """Serialise a table: schema comment, header, one line per row."""
    buf = io.StringIO()
    buf.write(TABLE_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r[h]) for h in header])
    return buf.getvalue().encode()


def read_table(path):
    """Read a table back as a list of dicts of strings."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TABLE_SCHEMA:
        raise ValueError(f"{path}: missing schema line")
    return list(csv.DictReader(lines[1:]))


@dataclass
class Table:
    name: str
    rows: list
    header: list = None

    def __post_init__(self):
        if self.header is None:
            self.header = list(self.rows[0].keys()) if self.rows else []


@dataclass
class RunRecord:
    """Everything needed to reproduce and audit a run."""

    config: str
    version: str
    wall_times: dict
    manifest: list
    summary: dict

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path):
        p = Path(path)
        if p.is_dir():
            p = p / "record.json"
        return cls.from_json(p.read_text())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


class _Writer:
    """Single writer for a run directory; removes its files if the run fails."""

    def __init__(self, out):
        self.out = Path(out)
        self.written = []
        self.created = not self.out.exists()

    def write(self, table):
        self.out.mkdir(parents=True, exist_ok=True)
        data = table_bytes(table.header, table.rows)
        path = self.out / f"{table.name}.csv"
        path.write_bytes(data)
        self.written.append(path)
        return {"file": path.name, "rows": len(table.rows),
                "sha256": hashlib.sha256(data).hexdigest()}

    def cleanup(self):
        for p in self.written:
            p.unlink(missing_ok=True)
        rec = self.out / "record.json"
        rec.unlink(missing_ok=True)
        if self.created and self.out.exists() and not any(self.out.iterdir()):
            self.out.rmdir()


# --- macroscopic observables -----------------------------------------------

def rescaled_height_export(trajectory, params, time_grid, space_grid, step_shift=False):
    """Rows ``(T, X, t, x, h)`` of the rescaled height on a macroscopic grid.

    ``h = sqrt(eps) (N(t, x) - rho x) - t log(lambda)`` at the lattice point
    ``t = round(T / eps**2)``, ``x = round(X / eps) + floor(mu t)``, so the
    site sits on the characteristic lattice of its own time.  ``step_shift``
    subtracts ``log(rho (1 - rho) / sqrt(eps))``.  ``trajectory.N`` may carry
    a leading replica axis after the time axis; ``h`` is then an array.
    """
    if params.eps <= 0:
        raise ValueError("rescaled heights need weakly asymmetric parameters")
    eps, se = params.eps, math.sqrt(params.eps)
    shift = math.log(params.rho * (1.0 - params.rho) / se) if step_shift else 0.0
    a = trajectory.a
    n_sites = trajectory.N.shape[-1]
    rows = []
    for T in time_grid:
        t = int(round(T / eps ** 2))
        if t >= trajectory.N.shape[0]:
            raise ValueError(f"time {T} (lattice {t}) beyond the simulated horizon")
        for X in space_grid:
            k = int(round(X / eps))
            x = k + math.floor(params.mu * t)
            if not 0 <= x - a < n_sites:
                raise ValueError(f"site {x} for (T, X) = ({T}, {X}) outside the window")
            N = trajectory.N[t, ..., x - a]
            h = se * (N - params.rho * x) - t * math.log(params.lam) - shift
            rows.append({"T": T, "X": X, "t": t, "x": x, "k": k, "h": h})
    return rows


def brownian_ks_test(profile, params, spacing, jitter_seed=0):
    """KS test of rescaled profile increments against ``N(0, rho (1 - rho) spacing)``.

    ``profile`` holds ``h(0, X)`` on an evenly spaced X grid (replicas on
    axis 0).  Increments of a Bernoulli height are lattice valued with mesh
    ``sqrt(eps)``; a uniform jitter on one mesh cell makes them continuous
    without changing the variance to leading order.
    """
    inc = np.diff(np.atleast_2d(profile), axis=-1).ravel()
    rng = np.random.default_rng(jitter_seed)
    inc = inc + (rng.random(inc.size) - 0.5) * math.sqrt(params.eps)
    sd = math.sqrt(params.rho * (1.0 - params.rho) * spacing + params.eps / 12.0)
    return stats.kstest(inc / sd, "norm")


_PHI_DMAX = None


def _phi(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _phi_dmax():
    global _PHI_DMAX
    if _PHI_DMAX is None:
        s = np.linspace(-0.999, 0.999, 200001)
        d = _phi(s) * 2.0 * np.abs(s) / (1.0 - s ** 2) ** 2
        _PHI_DMAX = float(d.max())
    return _PHI_DMAX


@dataclass(frozen=True)
class TestFunction:
    """Smooth compactly supported ``f(X, T)`` from the bump ``exp(-1/(1 - s**2))``.

    ``shape`` is ``"bump"`` (radial in the scaled variables) or
    ``"product-of-bumps"``.  The amplitude is set so that
    ``sup|f| + sup|d_X f| = 1``.
    """

    __test__ = False  # not a pytest class

    shape: str
    center: tuple
    widths: tuple

    def __post_init__(self):
        if self.shape not in ("bump", "product-of-bumps"):
            raise ValueError("shape must be 'bump' or 'product-of-bumps'")
        if min(self.widths) <= 0:
            raise ValueError("widths must be positive")

    @property
    def support(self):
        (cx, ct), (wx, wt) = self.center, self.widths
        return (cx - wx, cx + wx), (ct - wt, ct + wt)

    def _raw_norms(self):
        e1 = math.exp(-1.0)
        if self.shape == "bump":
            return e1, _phi_dmax() / self.widths[0]
        return e1 * e1, e1 * _phi_dmax() / self.widths[0]

    @property
    def amplitude(self):
        return 1.0 / sum(self._raw_norms())

    def norms(self):
        """``(sup|f|, sup|d_X f|)``."""
        A = self.amplitude
        s, d = self._raw_norms()
        return A * s, A * d

    def __call__(self, X, T, delta=1.0):
        """``f(X / delta, T)``."""
        (cx, ct), (wx, wt) = self.center, self.widths
        sx = (np.asarray(X) / delta - cx) / wx
        st = (np.asarray(T) - ct) / wt
        if self.shape == "bump":
            return self.amplitude * _phi(np.sqrt(sx ** 2 + st ** 2))
        return self.amplitude * _phi(sx) * _phi(st)


@dataclass
class EmpiricalField:
    """Centred incoming vertical-line indicators ``u(x, y) - v`` on a box.

    ``values[..., j, i]`` belongs to the lattice point ``(x0 + i, j)``; a
    leading replica axis is allowed.  Differences of fields are fields too
    (``raw`` is then False and the indicator check no longer applies).
    """

    eps: float
    v: float
    mu: float
    x0: int
    values: np.ndarray
    raw: bool = True

    def __post_init__(self):
        if self.raw:
            ok = np.isclose(self.values, -self.v) | np.isclose(self.values, 1.0 - self.v)
            if not ok.all():
                raise ValueError("indicators must be -v or 1 - v")

    @property
    def shape(self):
        return self.values.shape[-2:]

    def __sub__(self, other):
        return EmpiricalField(self.eps, self.v, self.mu, self.x0,
                              self.values - other.values, raw=False)

    def macro_coordinates(self):
        """``(X, T)`` grids: ``X = eps (x - mu y)``, ``T = eps**2 y``."""
        H, W = self.shape
        y = np.arange(H)[:, None]
        x = self.x0 + np.arange(W)[None, :]
        return self.eps * (x - self.mu * y), np.broadcast_to(self.eps ** 2 * y, (H, W))


def sample_empirical_field(params, v, ell, drivers, replicas=1):
    """Sample the stationary line field on the box that carries ``[-ell, ell] x [0, ell]``."""
    eps = params.eps
    H = int(math.ceil(ell / eps ** 2)) + 1
    x0 = -int(math.ceil(ell / eps)) - 1
    W = int(math.ceil(params.mu * H + ell / eps)) + 2 - x0
    g = sample_gibbs(params, v, (W, H), drivers, replicas=replicas, burn_in=0)
    vert = g.vertical[..., :H, :]
    return EmpiricalField(eps, v, params.mu, x0, vert.astype(float) - v)


def empirical_pairing(field, f, delta=1.0):
    """``eps**(5/2) sum (u - v) f_delta(eps (x - mu y), eps**2 y)`` over the box."""
    X, T = field.macro_coordinates()
    (xl, xr), (tl, tr) = f.support
    xl, xr = xl * delta, xr * delta
    H, W = field.shape
    # support check: every lattice point where f may be nonzero lies in the box
    if tl < 0 or tr > field.eps ** 2 * (H - 1):
        raise ValueError("test function support leaves the box in time")
    lo_x = field.eps * (field.x0 - field.mu * np.arange(H) * 1.0)
    hi_x = field.eps * (field.x0 + W - 1 - field.mu * np.arange(H) * 1.0)
    rows = (T[:, 0] >= tl) & (T[:, 0] <= tr)
    if (lo_x[rows] > xl).any() or (hi_x[rows] < xr).any():
        raise ValueError("test function support leaves the box in space")
    F = f(X, T, delta)
    return field.eps ** 2.5 * np.tensordot(field.values, F, axes=([-2, -1], [0, 1]))


def default_test_family(ell):
    """Tensor bumps: three X half-widths times five translates, one T profile."""
    fam = []
    for w in (ell / 6.0, ell / 3.0, ell / 2.0):
        for cx in np.linspace(-ell + w, ell - w, 5):
            fam.append(TestFunction("product-of-bumps", (float(cx), ell / 2.0), (w, ell / 2.0)))
    return fam


DEFAULT_DELTAS = (1.0, 0.5, 0.25, 0.125)


def cminus1_seminorm(field, ell, deltas=DEFAULT_DELTAS, family=None):
    """Lower bound ``max |<U, f_delta>| delta`` over a fixed family and delta grid.

    The true seminorm is a supremum over all admissible test functions; this
    maximum over ``family`` (default :func:`default_test_family`) can only
    underestimate it.  Returns one value per replica.
    """
    family = default_test_family(ell) if family is None else family
    best = np.zeros(field.values.shape[:-2])
    for f in family:
        for d in deltas:
            best = np.maximum(best, np.abs(empirical_pairing(field, f, d)) * d)
    return best


# --- stationarity -----------------------------------------------------------

def _var_and_se(x):
    """Sample variance along axis 0 with the fourth-moment standard error."""
    n = x.shape[0]
    c = x - x.mean(axis=0)
    s2 = (c ** 2).sum(axis=0) / (n - 1)
    m4 = (c ** 4).mean(axis=0)
    se = np.sqrt(np.maximum(m4 - s2 ** 2 * (n - 3) / (n - 1), 0.0) / n)
    return s2, se


@dataclass
class StationarityReport:
    rows: list
    passed: bool
    control_failed: bool


def stationarity_suite(params, v, replicas, horizon=128, times=(8, 32, 128),
                       offsets=(-64, -16, -4, -1, 1, 4, 16, 64), seed=0, n_sigma=3.0,
                       control_shift=0.05, chunk=25000):
    """Variance and independence tests of the stationary state started from ``Ber(v)``.

    The window is ``[min offset, max offset]`` with the ``Ber(h)`` injection
    at its left edge, which is exactly stationary; lines only move right, so
    nothing to the right is needed.  Tests:

    * ``Var N(t, 0) = t h (1 - h)`` at each time;
    * ``Var(N(t, x) - N(t, 0)) = v (1 - v) |x|`` at the final time;
    * adjacent occupancies at the final time are independent (2x2 chi-square);
    * the control plugs ``h + control_shift`` into the first test and must fail.
    """
    nan = float("nan")
    h = stationary_h(v, params)
    a, b = min(min(offsets), 0), max(max(offsets), 0)
    times = tuple(t for t in times if t <= horizon)
    record = {t: [] for t in times}
    pairs = np.zeros((2, 2))
    final_diff = []
    for start in range(0, replicas, chunk):
        reps = min(chunk, replicas - start)
        drivers = KeyedDrivers(np.random.SeedSequence([seed, start]).generate_state(1)[0])
        occ = InitialCondition.bernoulli(v).occupancy(a, b, drivers, reps)
        win = OccupationWindow(a, occ, 0, "bernoulli-injection", h)

        def observer(t, eta, N):
            if t in record:
                record[t].append(N[-a].copy())
            if t == times[-1]:
                final_diff.append(np.stack([N[x - a] - N[-a] for x in offsets], axis=1))
                e = eta.astype(int)
                for i in (0, 1):
                    for j in (0, 1):
                        pairs[i, j] += np.sum((e[:-1] == i) & (e[1:] == j))

        run_batch(params, win, times[-1], drivers, observer, origin=0)
    rows = []
    ok = True
    control_fail = False
    for t in times:
        s2, se = _var_and_se(np.concatenate(record[t]).astype(float))
        target = t * h * (1 - h)
        z = (s2 - target) / se
        ok &= abs(z) <= n_sigma
        rows.append({"test": "temporal", "t": t, "x": 0, "estimate": s2, "target": target,
                     "stderr": se, "z": z, "pvalue": nan, "pass": int(abs(z) <= n_sigma)})
        hc_ = h + control_shift
        zc = (s2 - t * hc_ * (1 - hc_)) / se
        if t == times[-1]:
            control_fail = abs(zc) > n_sigma
        rows.append({"test": "control", "t": t, "x": 0, "estimate": s2, "target": t * hc_ * (1 - hc_),
                     "stderr": se, "z": zc, "pvalue": nan, "pass": int(abs(zc) <= n_sigma)})
    D = np.concatenate(final_diff).astype(float)
    s2, se = _var_and_se(D)
    for i, x in enumerate(offsets):
        target = v * (1 - v) * abs(x)
        z = (s2[i] - target) / se[i]
        ok &= abs(z) <= n_sigma
        rows.append({"test": "spatial", "t": times[-1], "x": x, "estimate": s2[i], "target": target,
                     "stderr": se[i], "z": z, "pvalue": nan, "pass": int(abs(z) <= n_sigma)})
    chi = stats.chi2_contingency(pairs, correction=False)
    ok &= chi.pvalue > 1e-3
    rows.append({"test": "independence", "t": times[-1], "x": 0, "estimate": chi.statistic,
                 "target": nan, "stderr": nan, "z": nan, "pvalue": chi.pvalue,
                 "pass": int(chi.pvalue > 1e-3)})
    return StationarityReport(rows, bool(ok), bool(control_fail))


# --- experiment handlers ----------------------------------------------------

def _grid_t(cfg, default):
    return cfg.get("grid", "t") or list(default)


def _map(fn, items, threads):
    """Apply ``fn`` to independent grid points, in order, possibly concurrently."""
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _run_simulate(cfg, threads):
    params = cfg.params()
    a, b = cfg.get("options", "window", [-20, 20])
    steps = max(_grid_t(cfg, [10]))
    init = cfg.initial()
    boundary, h = "left-finite-cutoff", 0.0
    if init.kind == "bernoulli":
        boundary, h = "bernoulli-injection", stationary_h(init.v, params)
    rows = []
    for r in range(min(cfg.replicas, 100)):
        dr = KeyedDrivers(np.random.SeedSequence([cfg.seed, r]).generate_state(1)[0])
        occ = init.occupancy(a, b, dr) if init.kind != "explicit" else np.asarray(
            cfg.get("initial", "occupancy"), dtype=np.int8)
        if occ.ndim > 1:
            occ = occ[0]
        traj = simulate(params, OccupationWindow(a, occ, 0, boundary, h), steps, dr)
        obs = height_observables(traj)
        for t in range(steps + 1):
            for i, x in enumerate(obs["sites"]):
                rows.append({"replica": r, "t": t, "x": int(x), "eta": int(obs["eta"][t, i]),
                             "N": int(obs["N"][t, i])})
    tables = [Table("trajectory", rows)]
    return tables, {"replicas": min(cfg.replicas, 100), "steps": steps}


def _run_kernel_table(cfg, threads):
    params = cfg.params()
    n_max = cfg.get("options", "n_max", 10)
    ts = _grid_t(cfg, [1, 2, 3])
    rows1 = []
    for t in ts:
        P = bk.one_particle_table(params, t, n_max)
        for n in range(n_max + 1):
            rows1.append({"t": t, "displacement": n, "probability": P[n]})
    tables = [Table("one_particle", rows1)]
    src = cfg.get("options", "source")
    if src:
        if len(src) != 2:
            raise ConfigError("options.source", "needs two sites")
        rows2 = []
        for t in ts:
            hi = src[1] + n_max
            targets = [(x1, x2) for x1 in range(src[0], hi + 1) for x2 in range(x1 + 1, hi + 1)
                       if x2 >= src[1]]
            X = np.array(targets)
            pk = bk.PairKernel(params, t, "U")
            vals, imag, M, err = pk.evaluate(np.full(len(X), src[0]), np.full(len(X), src[1]),
                                             X[:, 0], X[:, 1])
            for (x1, x2), v, e in zip(targets, vals, err):
                rows2.append({"t": t, "y1": src[0], "y2": src[1], "x1": x1, "x2": x2,
                              "probability": v, "error_estimate": e})
        tables.append(Table("two_particle", rows2))
    return tables, {"times": len(ts)}


def _run_duality(cfg, threads):
    params = cfg.params()
    occ = np.asarray(cfg.get("initial", "occupancy", [0, 1, 1, 0, 1, 0]), dtype=np.int8)
    a = cfg.get("initial", "left", 0)
    N_left = cfg.get("initial", "n_left", 0)
    sites = cfg.get("grid", "sites") or list(range(a, a + occ.size - 1))
    tags = cfg.get("options", "observables") or ["H", "Htilde", "Z-pair", "etaZ-pair"]
    mode = cfg.get("options", "mode", "exact")
    b = a + occ.size - 1
    queries = []
    for t in _grid_t(cfg, [1, 2]):
        for tag in tags:
            need_right = tag in ("Htilde", "etaZ-pair")
            ok = [y for y in sites if a <= y and (y + 1 <= b if need_right else y <= b)]
            singles = [] if tag in ("Z-pair", "etaZ-pair") else [(y,) for y in ok]
            doubles = [tuple(p) for p in itertools.combinations(ok, 2)]
            if tag == "Htilde":
                doubles = []
            for s in singles + doubles:
                queries.append(du.DualityQuery(s, tag, t))

    def one(iq):
        i, q = iq
        return du.duality_check(params, q, occ, a, N_left, mode=mode, replicas=cfg.replicas,
                                seed=cfg.seed + i).row()

    rows = _map(one, list(enumerate(queries)), threads)
    passed = sum(r["pass"] for r in rows)
    return [Table("duality", rows)], {"queries": len(rows), "passed": passed,
                                      "all_pass": passed == len(rows)}


def _run_quadvar(cfg, threads):
    params = cfg.params()
    n = cfg.get("options", "n_sites", 5)
    a = cfg.get("initial", "left", 0)
    rows = []
    worst = 0.0
    for occ in itertools.product((0, 1), repeat=n):
        rep = hc.quadvar_enumeration(params, a, np.array(occ, dtype=np.int8))
        worst = max(worst, float(rep.discrepancy.max()), float(np.abs(rep.mean).max()))
        for r in rep.rows():
            rows.append({"configuration": "".join(map(str, occ)), **r})
    return [Table("quadvar", rows)], {"configurations": 2 ** n, "max_discrepancy": worst}


def _run_stationarity(cfg, threads):
    params = cfg.params()
    v = cfg.get("initial", "v")
    horizon = max(_grid_t(cfg, [8, 32, 128]))
    xs = cfg.get("grid", "sites") or [-64, -16, -4, -1, 1, 4, 16, 64]
    rep = stationarity_suite(params, v, cfg.replicas, horizon, tuple(_grid_t(cfg, [8, 32, 128])),
                             tuple(x for x in xs if x != 0), seed=cfg.seed,
                             control_shift=cfg.get("options", "control_shift", 0.05))
    return [Table("stationarity", rep.rows)], {"pass": rep.passed,
                                               "control_failed": rep.control_failed}


def _run_self_averaging(cfg, threads):
    init = cfg.initial()
    x_star = cfg.get("options", "x_star", 0)
    T = (cfg.get("grid", "time") or [1.0])[0]

    def one(p):
        t = max(1, int(round(T / p.eps ** 2)))
        s = hc.self_averaging_stat(p, init, t, x_star, cfg.replicas, cfg.seed)
        return {"eps": p.eps, "t": s.t, "x_star": s.x_star, "replicas": s.replicas,
                "estimate": s.estimate, "stderr": s.stderr}

    rows = _map(one, cfg.param_sets(), threads)
    est = [r["estimate"] for r in rows]
    dec = all(x > y for x, y in zip(est, est[1:]))
    return [Table("self_averaging", rows)], {"strictly_decreasing": dec,
                                             "ratio": est[0] / est[-1] if est[-1] else float("inf")}


def _run_scaling_sweep(cfg, threads):
    init = cfg.initial()
    times = cfg.get("grid", "time") or [0.0, 0.5, 1.0]
    space = cfg.get("grid", "space") or [-1.0, -0.5, 0.0, 0.5, 1.0]
    step_shift = cfg.get("options", "step_shift", False)

    def one(p):
        t_max = int(round(max(times) / p.eps ** 2))
        k_lo = int(round(min(space) / p.eps))
        k_hi = int(round(max(space) / p.eps))
        a = k_lo - 1
        b = k_hi + math.floor(p.mu * t_max) + 1
        if init.kind == "step":
            a = min(a, 0)
            boundary, h = "vacuum", 0.0
        else:
            boundary, h = "bernoulli-injection", stationary_h(init.v, p)
        keep = {int(round(T / p.eps ** 2)) for T in times}
        snaps = {}
        seed = int(np.random.SeedSequence([cfg.seed, int(round(1e6 * p.eps))]).generate_state(1)[0])
        drivers = KeyedDrivers(seed)
        occ = init.occupancy(a, b, drivers, cfg.replicas)
        win = OccupationWindow(a, occ, 0, boundary, h)

        def observer(t, eta, N):
            if t in keep:
                snaps[t] = N.T.copy()

        run_batch(p, win, t_max, drivers, observer, origin=0)
        Nfull = np.zeros((t_max + 1, cfg.replicas, b - a + 1), dtype=np.int64)
        for t, N in snaps.items():
            Nfull[t] = N

        class _Tr:
            pass

        tr = _Tr()
        tr.a, tr.N = a, Nfull
        out = []
        for r in rescaled_height_export(tr, p, times, space, step_shift):
            hv = np.asarray(r.pop("h"), dtype=float)
            out.append({"eps": p.eps, **r, "mean": hv.mean(), "variance": hv.var(ddof=1)})
        return out

    rows = [r for chunk in _map(one, cfg.param_sets(), threads) for r in chunk]
    return [Table("scaling_sweep", rows)], {"points": len(rows)}


def _run_gibbs(cfg, threads):
    params = cfg.params()
    v = cfg.get("initial", "v", 0.5)
    W, H = cfg.get("options", "box", [20, 20])
    drivers = KeyedDrivers(cfg.seed)
    g = sample_gibbs(params, v, (W, H), drivers, replicas=cfg.replicas)
    vert = g.vertical if g.vertical.ndim == 3 else g.vertical[None]
    horiz = g.horizontal if g.horizontal.ndim == 3 else g.horizontal[None]
    row_lines = vert[:, H // 2, :].ravel()
    col_lines = horiz[:, :, W // 2].ravel()
    rows = []
    for name, lines, p in (("row", row_lines, v), ("column", col_lines, g.h)):
        k = int(lines.sum())
        n = lines.size
        test = stats.chisquare([n - k, k], [n * (1 - p), n * p]) if 0 < p < 1 else None
        rows.append({"path": name, "lines": n, "occupied": k, "density": k / n, "expected": p,
                     "pvalue": test.pvalue if test is not None else float("nan")})
    return [Table("gibbs", rows)], {"h": g.h, "v": v}


def _run_empirical_field(cfg, threads):
    v = cfg.get("initial", "v", 0.5)
    ell = cfg.get("options", "ell", 0.5)
    deltas = tuple(cfg.get("options", "deltas") or DEFAULT_DELTAS)
    m = cfg.sections["model"]

    def one(e):
        p = ModelParams.weakly_asymmetric(m["b1"], e, v)
        seed = int(np.random.SeedSequence([cfg.seed, int(round(1e6 * e))]).generate_state(1)[0])
        drivers = KeyedDrivers(seed)
        f1 = sample_empirical_field(p, v, ell, drivers, cfg.replicas)
        drivers2 = KeyedDrivers(seed + 1)
        f2 = sample_empirical_field(p, v, ell, drivers2, cfg.replicas)
        fam = default_test_family(ell)
        pair = np.array([empirical_pairing(f1, f) for f in fam])
        diff = cminus1_seminorm(f1 - f2, ell, deltas, fam)
        return {"eps": e, "replicas": cfg.replicas, "mu": p.mu,
                "pairing_mean": float(pair.mean()),
                "pairing_stderr": float(pair.std(ddof=1) / math.sqrt(pair.size)),
                "seminorm_difference_mean": float(np.mean(diff)),
                "seminorm_difference_stderr": float(np.std(diff, ddof=1) / math.sqrt(diff.size))
                if diff.size > 1 else float("nan")}

    rows = _map(one, cfg.get("grid", "eps"), threads)
    return [Table("empirical_field", rows)], {"points": len(rows)}


HANDLERS = {
    "simulate": _run_simulate,
    "kernel-table": _run_kernel_table,
    "duality": _run_duality,
    "quadvar": _run_quadvar,
    "stationarity": _run_stationarity,
    "self-averaging": _run_self_averaging,
    "scaling-sweep": _run_scaling_sweep,
    "gibbs-sample": _run_gibbs,
    "empirical-field": _run_empirical_field,
}


# --- run / replay / report --------------------------------------------------

def default_output_root():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def output_dir(cfg, out=None):
    if out is not None:
        return Path(out)
    if cfg.get("experiment", "out"):
        return Path(cfg.get("experiment", "out"))
    return default_output_root() / f"{cfg.kind}-seed{cfg.seed}"


def run(cfg, out=None, threads=None):
    """Validate, dispatch, write the tables and ``record.json``; return the record.

    On failure every file this run wrote is removed again.
    """
    cfg.validate()
    threads = threads or cfg.get("experiment", "threads", 1)
    outdir = output_dir(cfg, out)
    writer = _Writer(outdir)
    t0 = time.perf_counter()
    try:
        tables, summary = HANDLERS[cfg.kind](cfg, threads)
        t1 = time.perf_counter()
        manifest = [writer.write(t) for t in tables]
        rec = RunRecord(cfg.to_text(), __version__,
                        {"compute": t1 - t0, "total": time.perf_counter() - t0},
                        manifest, summary)
        (outdir / "record.json").write_text(rec.to_json())
    except BaseException:
        writer.cleanup()
        raise
    return rec


@dataclass
class ReplayResult:
    matches: bool
    files: dict


def replay(record_path, threads=1):
    """Re-run a record's config in a scratch directory and compare table digests.

    A completed run is left untouched; this only verifies it.
    """
    rec = RunRecord.load(record_path)
    cfg = ExperimentConfig.from_text(rec.config)
    with tempfile.TemporaryDirectory() as tmp:
        new = run(cfg, out=Path(tmp) / "replay", threads=threads)
    old = {m["file"]: m["sha256"] for m in rec.manifest}
    fresh = {m["file"]: m["sha256"] for m in new.manifest}
    files = {k: old.get(k) == fresh.get(k) for k in sorted(set(old) | set(fresh))}
    return ReplayResult(all(files.values()), files)


def verify_outputs(out):
    """Check the files on disk against the manifest of ``out/record.json``."""
    rec = RunRecord.load(out)
    res = {}
    for m in rec.manifest:
        p = Path(out) / m["file"]
        res[m["file"]] = p.exists() and hashlib.sha256(p.read_bytes()).hexdigest() == m["sha256"]
    return res


def report(out):
    """Human-readable lines describing a finished run."""
    rec = RunRecord.load(out)
    cfg = ExperimentConfig.from_text(rec.config)
    lines = [f"kind: {cfg.kind}  seed: {cfg.seed}  version: {rec.version}"]
    for k, v in sorted(rec.wall_times.items()):
        lines.append(f"wall time {k}: {v:.3f} s")
    ok = verify_outputs(out)
    for m in rec.manifest:
        lines.append(f"{m['file']}: {m['rows']} rows, digest {'ok' if ok[m['file']] else 'MISMATCH'}")
    for k, v in sorted(rec.summary.items()):
        lines.append(f"{k}: {v}")
    return lines


# --- command line ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sixvertex", description="Stochastic six vertex experiments")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("run", "run an experiment from a config file"),
                        ("validate", "check a config file without running it"),
                        ("replay", "re-run a finished run and compare its tables"),
                        ("report", "summarise a finished run")):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("--config", type=Path, help="config file")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", type=Path, help=f"run directory (default under ${OUTPUT_ENV})")
        s.add_argument("--threads", type=int, default=None, help="workers across grid points")
        s.add_argument("--step-ic", action="store_true",
                       help="step initial condition with the narrow-wedge height shift")
    return p


def _config_from_args(args):
    if args.config is None:
        raise ConfigError("--config", "required for this verb")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.set("experiment", "seed", args.seed)
    if args.threads is not None:
        cfg.set("experiment", "threads", args.threads)
    if args.step_ic:
        cfg.sections["initial"] = {"kind": "step"}
        cfg.set("options", "step_shift", True)
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "validate":
            cfg = _config_from_args(args)
            print(f"ok: {cfg.kind}")
            return 0
        if args.verb == "run":
            cfg = _config_from_args(args)
            rec = run(cfg, out=args.out)
            for k, v in sorted(rec.summary.items()):
                print(f"{k}: {v}")
            print(f"wrote {output_dir(cfg, args.out)}")
            return 0
        out = args.out
        if out is None and args.config is not None:
            out = output_dir(_config_from_args(args))
        if out is None:
            raise ConfigError("--out", "required for this verb")
        if args.verb == "replay":
            res = replay(out, threads=args.threads or 1)
            for name, ok in res.files.items():
                print(f"{name}: {'identical' if ok else 'DIFFERS'}")
            return 0 if res.matches else 1
        for line in report(out):
            print(line)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
