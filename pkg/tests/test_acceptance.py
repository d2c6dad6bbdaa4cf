"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import itertools
import math
import time

import numpy as np

from oracles import pair_law, walk_pmf
from sixvertex.model_core import (
    ModelParams,
    expansion_check,
    kernel_moments,
    limiting_variance,
)
from sixvertex.bethe_kernel import (
    ContourSpec,
    KernelQuery,
    PairKernel,
    reversed_transition_prob,
    transition_prob,
    verify_bounds,
)
from sixvertex.dynamics import InitialCondition
from sixvertex.duality import DualityQuery, duality_check
from sixvertex.hopf_cole import quadvar_enumeration, self_averaging_stat, u_square_sum
from sixvertex.experiments import stationarity_suite

P = ModelParams(0.6, 0.3, 0.5)
STRICT = ContourSpec(fallback=False)


def _walk_law(t, n_max):
    pmf = np.array([walk_pmf(P.b1, P.b2, n) for n in range(n_max + 1)])
    law = np.array([1.0])
    for _ in range(t):
        law = np.convolve(law, pmf)[:n_max + 1]
    return law


def _chain_targets(src, t, x_max):
    law = pair_law(P.b1, P.b2, src, t, 0, x_max + 2)
    keys = [k for k in law if k[0] >= src[0] and k[1] >= src[1] and k[1] <= x_max]
    return np.array(keys), np.array([law[k] for k in keys])


def test_criterion_01_one_particle_kernel(verdict):
    start = time.perf_counter()
    worst = 0.0
    for t in range(1, 6):
        law = _walk_law(t, 10)
        for n in range(11):
            v = transition_prob(P, KernelQuery((0,), (n,), t), STRICT).value
            worst = max(worst, abs(v - law[n]))
    wall = time.perf_counter() - start
    verdict(1, "k=1 kernel vs walk law", worst < 1e-10 and wall < 2.0,
            f"max error {worst:.2e} (< 1e-10), {wall:.2f} s (< 2 s)")


def test_criterion_02_two_particle_kernel(verdict):
    start = time.perf_counter()
    worst, count = 0.0, 0
    for src in [(0, 1), (0, 3)]:
        for t in (1, 2, 3):
            tgt, expect = _chain_targets(src, t, x_max=16)
            vals = PairKernel(P, t, "U", STRICT).evaluate(src[0], src[1], tgt[:, 0], tgt[:, 1])[0]
            worst = max(worst, float(np.abs(vals - expect).max()))
            count += len(tgt)
    wall = time.perf_counter() - start
    verdict(2, "k=2 contour kernel vs enumeration", worst < 1e-8 and wall < 30.0,
            f"{count} target pairs, max error {worst:.2e} (< 1e-8), {wall:.1f} s (< 30 s)")


def test_criterion_03_reversal_identity(verdict):
    worst, worst_chain = 0.0, 0.0
    for src in [(0, 1), (0, 2), (0, 3)]:
        for t in (1, 2, 3):
            tgt, expect = _chain_targets(src, t, x_max=8)
            fwd = PairKernel(P, t, "U", STRICT).evaluate(src[0], src[1], tgt[:, 0], tgt[:, 1])[0]
            for (x1, x2), f, c in zip(tgt, fwd, expect):
                r = reversed_transition_prob(P, KernelQuery((x1, x2), src, t), STRICT).value
                worst = max(worst, abs(r - f))
                worst_chain = max(worst_chain, abs(r - c))
    ok = worst < 1e-8 and worst_chain < 1e-8
    verdict(3, "reversed kernel vs forward kernel", ok,
            f"max error {worst:.2e} vs contour, {worst_chain:.2e} vs chain (< 1e-8)")


def _duality_queries():
    H = ModelParams(0.6, 0.3, 0.5)
    Z = ModelParams.weakly_asymmetric(0.5, 0.04, 0.5)
    for t in (1, 2):
        for y in range(0, 6):
            yield H, DualityQuery((y,), "H", t)
            if y < 5:
                yield H, DualityQuery((y,), "Htilde", t)
        for pair in itertools.combinations(range(6), 2):
            yield H, DualityQuery(pair, "H", t)
            if pair[1] < 5:
                yield H, DualityQuery(pair, "Htilde", t)
                yield Z, DualityQuery(pair, "etaZ-pair", t)
            yield Z, DualityQuery(pair, "Z-pair", t)


def test_criterion_04_duality_suite(verdict):
    start = time.perf_counter()
    occ = [1, 0, 1, 1, 0, 1]
    exact_gap, mc_worst, n_exact, n_mc, failed = 0.0, 0.0, 0, 0, []
    for params, q in _duality_queries():
        rep = duality_check(params, q, occ, 0, N_left=1)
        exact_gap = max(exact_gap, rep.gap)
        n_exact += 1
        if not rep.passed:
            failed.append(("exact", q))
    # Monte Carlo: the two-point queries at the longest time
    for i, (params, q) in enumerate(_duality_queries()):
        if q.t != 2 or q.k != 2:
            continue
        rep = duality_check(params, q, occ, 0, N_left=1, mode="monte-carlo",
                            replicas=100_000, seed=100 + i)
        mc_worst = max(mc_worst, rep.gap / rep.sigma if rep.sigma else 0.0)
        n_mc += 1
        if not rep.passed:
            failed.append(("mc", q))
    wall = time.perf_counter() - start
    ok = exact_gap < 1e-10 and not failed and wall < 300.0
    verdict(4, "duality suite", ok,
            f"{n_exact} exact queries, max gap {exact_gap:.2e} (< 1e-10); {n_mc} MC queries "
            f"at 1e5 replicas, max |gap|/sigma {mc_worst:.2f} (<= 4); {wall:.0f} s (< 300 s)")


def test_criterion_05_martingale_structure(verdict):
    start = time.perf_counter()
    worst_mean = worst_cov = 0.0
    for params in (ModelParams.weakly_asymmetric(0.5, 0.04, 0.5), ModelParams(0.6, 0.3, 0.4)):
        for N_left, t in ((0, 0), (2, 3)):
            for occ in itertools.product((0, 1), repeat=5):
                rep = quadvar_enumeration(params, 0, np.array(occ, dtype=np.int8), t=t, N_left=N_left)
                worst_mean = max(worst_mean, float(np.abs(rep.mean).max()))
                worst_cov = max(worst_cov, float(rep.discrepancy.max()))
    wall = time.perf_counter() - start
    ok = worst_mean < 1e-12 and worst_cov < 1e-12 and wall < 60.0
    verdict(5, "martingale structure by enumeration", ok,
            f"max |E[m|F]| {worst_mean:.2e}, max covariance gap {worst_cov:.2e} (< 1e-12), "
            f"{wall:.1f} s (< 60 s)")


def test_criterion_06_stationarity(verdict):
    start = time.perf_counter()
    rep = stationarity_suite(P, 0.5, 100_000, horizon=128, times=(8, 32, 128),
                             offsets=(-64, -16, -4, -1, 1, 4, 16, 64), seed=6,
                             control_shift=0.05)
    wall = time.perf_counter() - start
    zs = [abs(r["z"]) for r in rep.rows if r["test"] in ("temporal", "spatial")]
    ok = rep.passed and rep.control_failed and wall < 600.0
    verdict(6, "stationarity at 1e5 replicas", ok,
            f"max |z| {max(zs):.2f} (<= 3), control failed: {rep.control_failed}, "
            f"{wall:.0f} s (< 600 s)")


def test_criterion_07_variance_limit(verdict):
    b1, rho = 0.5, 0.5
    nu = limiting_variance(b1)
    res = {}
    for eps in (1e-2, 1e-3, 1e-4):
        var = kernel_moments(ModelParams.weakly_asymmetric(b1, eps, rho))[1]
        res[eps] = abs(var - nu)
    C = res[1e-2] / math.sqrt(1e-2)
    ok = all(res[e] <= C * math.sqrt(e) for e in res)
    ratios = ", ".join(f"{res[e] / math.sqrt(e):.4f}" for e in res)
    verdict(7, "variance limit with C frozen at eps=1e-2", ok,
            f"|Var - nu*| / sqrt(eps) = {ratios} against C = {C:.4f}")


def test_criterion_08_gradient_decay(verdict):
    start = time.perf_counter()
    ts = [4, 8, 16, 32, 64]
    params = ModelParams.weakly_asymmetric(0.5, 0.01, 0.5)
    rep = verify_bounds(params, 0.5, 1.0, ts, [2, 4])
    mv = [max(r["max_abs_V"] for r in rep.rows if r["t"] == t) for t in ts]
    mg = [max(r["max_abs_gradV"] for r in rep.rows if r["t"] == t) for t in ts]
    sv = np.polyfit(np.log(ts), np.log(mv), 1)[0]
    sg = np.polyfit(np.log(ts), np.log(mg), 1)[0]
    wall = time.perf_counter() - start
    ok = -1.2 <= sv <= -0.8 and -1.7 <= sg <= -1.3 and rep.split_gap < 1e-10 and wall < 300.0
    verdict(8, "kernel and gradient decay", ok,
            f"slopes {sv:.3f} in [-1.2, -0.8] and {sg:.3f} in [-1.7, -1.3], "
            f"split gap {rep.split_gap:.2e} (< 1e-10), {wall:.0f} s (< 300 s)")


def test_criterion_09_self_averaging(verdict):
    start = time.perf_counter()
    est = []
    for eps in (0.25, 0.1, 0.04):
        p = ModelParams.weakly_asymmetric(0.5, eps, 0.5)
        s = self_averaging_stat(p, InitialCondition.bernoulli(0.5), int(round(1.0 / eps ** 2)),
                                0, 10_000, 11)
        est.append(s.estimate)
    wall = time.perf_counter() - start
    ratio = est[0] / est[-1]
    target = (0.25 / 0.04) ** 0.25
    decreasing = all(a > b for a, b in zip(est, est[1:]))
    ok = decreasing and target / 3 <= ratio <= 3 * target and wall < 1200.0
    verdict(9, "self-averaging", ok,
            f"statistic {', '.join(f'{e:.4f}' for e in est)}, ratio {ratio:.3f} "
            f"(target {target:.3f} within x3), {wall:.0f} s (< 1200 s)")


def test_criterion_10_expansions(verdict):
    grid = [1e-2, 1e-3, 1e-4, 1e-5]
    ok = True
    worst = 0.0
    for b1, rho in ((0.5, 0.5), (0.6, 0.3), (0.3, 0.8)):
        rows = expansion_check(b1, rho, grid)
        scaled = np.abs(rows[:, 1:]) / rows[:, :1]
        worst = max(worst, float(scaled.max()))
        # O(eps): scaled residuals stay bounded and settle to a constant
        ok &= bool(np.all(scaled[-1] <= 1.1 * scaled[-2] + 1e-6))
        ok &= bool(np.all(scaled <= 10.0))
    target = (1 - 0.5) / (1 + 0.5)
    u = [abs(u_square_sum(ModelParams.weakly_asymmetric(0.5, e, 0.5)) - target) / math.sqrt(e)
         for e in grid]
    ok &= max(u) < 2 * min(u)
    verdict(10, "expansions", ok,
            f"max |residual| / eps {worst:.3f}; |sum u^2 - (1-b1)/(1+b1)| / sqrt(eps) = "
            + ", ".join(f"{x:.4f}" for x in u))
