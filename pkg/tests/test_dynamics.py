import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sixvertex.model_core import ModelParams
from sixvertex.dynamics import (
    InitialCondition,
    KeyedDrivers,
    OccupationWindow,
    WindowOverflowError,
    heights_from_occupancy,
    height_observables,
    initial_heights,
    marginal_occupancy_law,
    parallel_step,
    parallel_step_law,
    run_batch,
    sample_gibbs,
    sequential_step,
    sequential_step_law,
    simulate,
    stationary_h,
    window_truncation,
)

P = ModelParams(0.6, 0.3, 0.5)


def test_drivers_are_keyed_by_site():
    d = KeyedDrivers(7)
    wide = d.uniforms(3, -100, 100)
    narrow = d.uniforms(3, -5, 5)
    assert np.array_equal(wide[95:106], narrow)
    assert d.uniform(3, 0) == wide[100, 0]
    assert d.uniform(3, 0) != d.uniform(4, 0)
    assert d.uniform(3, 0) != d.uniform(3, 0, "inject")
    assert KeyedDrivers(8).uniform(3, 0) != d.uniform(3, 0)


def test_heights_from_occupancy():
    occ = np.array([1, 0, 1, 1])
    assert heights_from_occupancy(0, occ).tolist() == [0, 0, 1, 2]
    assert heights_from_occupancy(0, occ, origin=-1).tolist() == [1, 1, 2, 3]
    assert heights_from_occupancy(0, occ, origin=2).tolist() == [-1, -1, 0, 1]
    with pytest.raises(ValueError):
        heights_from_occupancy(0, occ, origin=7)


def test_window_validation():
    with pytest.raises(ValueError):
        OccupationWindow(0, [0, 2, 1])
    with pytest.raises(ValueError):
        OccupationWindow(0, [0, 1], boundary="periodic")


def test_step_initial_condition():
    occ = InitialCondition.step().occupancy(-3, 4)
    hf = initial_heights(OccupationWindow(-3, occ), origin=0)
    x = np.arange(-3, 5)
    assert np.array_equal(hf.values, np.maximum(x, 0))


def _one_step_prob(positions, target, params, L=8):
    occ = [0] * L
    for y in positions:
        occ[y] = 1
    law = sequential_step_law(0, occ, params)
    key = [0] * L
    for y in target:
        key[y] = 1
    return law.get(tuple(key), 0.0)


def test_sequential_single_particle():
    for j in range(0, 5):
        expect = 0.6 if j == 0 else 0.4 * 0.7 * 0.3 ** (j - 1)
        assert _one_step_prob([0], [j], P) == pytest.approx(expect, rel=1e-14)


def test_sequential_pair_examples():
    # first particle stays, second moves one site
    assert _one_step_prob([0, 1], [0, 2], P) == pytest.approx(0.168, rel=1e-14)
    # first particle hits the second, which is pushed one site
    assert _one_step_prob([0, 1], [1, 2], P) == pytest.approx(0.28, rel=1e-14)


def test_sequential_law_sums_to_one():
    for occ in itertools.product((0, 1), repeat=5):
        assert sum(sequential_step_law(0, occ, P).values()) == pytest.approx(1.0, abs=1e-14)


def test_parallel_law_matches_sequential_law():
    worst = 0.0
    for occ in itertools.product((0, 1), repeat=3):
        par = marginal_occupancy_law(parallel_step_law(0, occ, P))
        seq = sequential_step_law(0, occ, P)
        keys = set(par) | set(seq)
        tv = 0.5 * sum(abs(par.get(k, 0.0) - seq.get(k, 0.0)) for k in keys)
        worst = max(worst, tv)
    assert worst < 1e-12


def test_vacuum_window_unchanged():
    w = OccupationWindow(0, np.zeros(10))
    hf, cross = parallel_step(initial_heights(w), P, KeyedDrivers(1))
    assert not hf.window.occupancy.any() and not cross.any()
    assert hf.t == 1


@settings(max_examples=40, deadline=None)
@given(occ=st.lists(st.integers(0, 1), min_size=3, max_size=12), seed=st.integers(0, 10 ** 6))
def test_parallel_and_sequential_agree_pathwise(occ, seed):
    d = KeyedDrivers(seed)
    L = len(occ)
    # pad on the right so no particle can leave within one step
    w = OccupationWindow(0, np.array(occ + [0] * 80))
    hf, _ = parallel_step(initial_heights(w), P, d)
    seq = sequential_step(w, P, d)
    n = min(hf.window.occupancy.size, seq.occupancy.size)
    assert np.array_equal(hf.window.occupancy[:n], seq.occupancy[:n])
    assert seq.occupancy[n:].sum() == 0 and hf.window.occupancy[n:].sum() == 0
    assert seq.occupancy.sum() == sum(occ)
    assert L <= n


def test_sequential_cap():
    w = OccupationWindow(0, np.array([0, 0, 1]))
    d = KeyedDrivers(0)
    for seed in range(200):
        d = KeyedDrivers(seed)
        try:
            sequential_step(w, P, d, cap=2)
        except WindowOverflowError:
            return
    pytest.fail("a particle at the right edge should eventually overflow the cap")


@settings(max_examples=30, deadline=None)
@given(occ=st.lists(st.integers(0, 1), min_size=4, max_size=20), seed=st.integers(0, 10 ** 6))
def test_height_invariants(occ, seed):
    w = OccupationWindow(-2, np.array(occ))
    tr = simulate(P, w, 5, KeyedDrivers(seed), origin=-3)
    obs = height_observables(tr)
    assert set(np.unique(obs["increments"])) <= {0, 1}
    assert np.array_equal(obs["increments"], tr.eta[:, 1:])
    drop = tr.N[:-1] - tr.N[1:]
    assert set(np.unique(drop)) <= {0, 1}
    assert np.array_equal(drop, tr.crossings)


def test_step_first_move_probability():
    # from the step condition the first particle (site 1) crosses column 1 w.p. 1 - b1
    law = parallel_step_law(-2, InitialCondition.step().occupancy(-2, 4), P)
    p_cross = sum(p for (occ, cr), p in law.items() if cr[3] == 1)
    assert p_cross == pytest.approx(1 - P.b1, abs=1e-14)


def test_stationary_h():
    assert stationary_h(0.0, P) == 0.0
    assert stationary_h(1.0, P) == 1.0
    # lone vertical lines turn right w.p. 1-b1, lone horizontal lines turn up w.p. 1-b2
    assert stationary_h(0.5, P) == pytest.approx(0.4 / 1.1, rel=1e-14)
    with pytest.raises(ValueError):
        stationary_h(1.5, P)


@settings(max_examples=60, deadline=None)
@given(v=st.floats(0.01, 0.99), b1=st.floats(0.05, 0.95), ratio=st.floats(0.05, 0.95))
def test_stationary_h_balances_vertex(v, b1, ratio):
    params = ModelParams(b1, b1 * ratio, 0.5)
    h = stationary_h(v, params)
    # exact law of the line leaving a vertex fed by Ber(h) and Ber(v)
    law = parallel_step_law(0, [1], params, inflow=h)
    law0 = parallel_step_law(0, [0], params, inflow=h)
    p_out = v * sum(p for (_, c), p in law.items() if c[0]) + (1 - v) * sum(
        p for (_, c), p in law0.items() if c[0])
    assert p_out == pytest.approx(h, abs=1e-13)


def test_window_truncation_bounds():
    assert window_truncation(0, 5, 1e-8, P) == 5
    a = window_truncation(10, 0, 1e-8, P)
    union = math.ceil((math.log(1e-8) - math.log(10)) / math.log(0.3))
    assert -a >= union
    # one decade of tolerance costs about log(10)/|log b1| sites
    step = window_truncation(10, 0, 1e-8, P) - window_truncation(10, 0, 1e-9, P)
    geo = math.log(10) / -math.log(P.b1)
    assert math.floor(geo) <= step <= math.ceil(geo) + 2
    with pytest.raises(ValueError):
        window_truncation(10, 0, 0.0, P)


def test_window_truncation_cutoffs_agree():
    reps, steps = 20000, 10
    a = window_truncation(steps, 0, 1e-8, P)
    ic = InitialCondition.bernoulli(0.5)
    finals = []
    for left in (a, a - 10):
        d = KeyedDrivers(5)
        occ = ic.occupancy(left, 40, d, reps)
        hf = run_batch(P, OccupationWindow(left, occ), steps, d)
        finals.append(hf.window.occupancy[:, -left:-left + 11])
    assert np.array_equal(finals[0], finals[1])


def _pattern_pvalue(bits, p):
    # chi-square of 4-site patterns against the product Bernoulli law
    k = bits.shape[1] // 4
    codes = (bits[:, :4 * k].reshape(-1, 4) * (1 << np.arange(4))).sum(axis=1)
    obs = np.bincount(codes, minlength=16)
    ones = np.array([bin(c).count("1") for c in range(16)])
    exp = obs.sum() * p ** ones * (1 - p) ** (4 - ones)
    return stats.chisquare(obs, exp).pvalue


def test_gibbs_row_and_column_are_product_bernoulli():
    v = 0.4
    g = sample_gibbs(P, v, (8, 8), KeyedDrivers(2), replicas=30000)
    row = g.vertical[:, 4, :]
    col = g.horizontal[:, :, 4]
    assert _pattern_pvalue(row, v) > 1e-3
    assert _pattern_pvalue(col, g.h) > 1e-3
    assert g.h == stationary_h(v, P)


def test_gibbs_frozen_boundaries():
    empty = sample_gibbs(P, 0.0, (5, 4), KeyedDrivers(0))
    assert not empty.vertical.any() and not empty.horizontal.any()
    full = sample_gibbs(P, 1.0, (5, 4), KeyedDrivers(0))
    assert full.vertical.all() and full.horizontal.all()


def test_gibbs_down_right_path():
    g = sample_gibbs(P, 0.5, (3, 2), KeyedDrivers(0))
    lines = g.along_path("RDRDR")
    assert [k for k, _ in lines] == ["v", "h", "v", "h", "v"]
    with pytest.raises(ValueError):
        g.along_path("RR")


def test_stationary_variances_small():
    v, reps, t = 0.5, 20000, 16
    h = stationary_h(v, P)
    d = KeyedDrivers(9)
    occ = InitialCondition.bernoulli(v).occupancy(-20, 40, d, reps)
    w = OccupationWindow(-20, occ, boundary="bernoulli-injection", h=h)
    start = heights_from_occupancy(-20, occ, origin=0)[:, 20]
    hf = run_batch(P, w, t, d, origin=0)
    checks = (
        (hf.at(0) - start, t * h * (1 - h)),
        (hf.at(10) - hf.at(0), 10 * v * (1 - v)),
    )
    for x, target in checks:
        se = target * math.sqrt(2.0 / (reps - 1))
        assert abs(x.var(ddof=1) - target) < 4 * se
