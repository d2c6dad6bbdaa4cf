import math

import numpy as np
import pytest

from oracles import walk_pmf
from sixvertex.model_core import ModelParams
from sixvertex.dynamics import InitialCondition
from sixvertex.duality import (
    DualityQuery,
    EnumerationLimitError,
    conditional_expectation_tables,
    duality_check,
    enumerate_window,
    kernel_side,
    observable,
    time_averaged_moments,
)

P = ModelParams(0.6, 0.3, 0.5)
W = ModelParams.weakly_asymmetric(0.5, 0.04, 0.5)
OCC6 = [1, 0, 1, 1, 0, 1]


def test_enumeration_empty_window():
    o = enumerate_window(P, 0, [0] * 5, 3)
    assert o.outcomes == {(0,) * 5: 1.0}


def test_enumeration_single_particle():
    o = enumerate_window(P, 0, [0, 0, 1, 0, 0, 0, 0], 1)
    for j in range(5):
        target = [0] * 7
        target[2 + j] = 1
        assert o.outcomes[tuple(target)] == pytest.approx(walk_pmf(0.6, 0.3, j), rel=1e-14)


def test_enumeration_pair_examples():
    o = enumerate_window(P, 0, [1, 1, 0, 0, 0], 1)
    assert o.outcomes[(1, 0, 1, 0, 0)] == pytest.approx(0.168, rel=1e-14)
    assert o.outcomes[(0, 1, 1, 0, 0)] == pytest.approx(0.28, rel=1e-14)


def test_enumeration_totality_and_caps():
    for t in range(1, 5):
        o = enumerate_window(P, 0, OCC6, t)
        assert o.total() == pytest.approx(1.0, abs=1e-12)
        # particles never appear from nowhere
        for occ in o.outcomes:
            assert sum(occ) <= sum(OCC6)
    with pytest.raises(EnumerationLimitError):
        enumerate_window(P, 0, [0] * 8, 1)
    with pytest.raises(EnumerationLimitError):
        enumerate_window(P, 0, [0] * 3, 5)


def test_query_validation():
    with pytest.raises(ValueError):
        DualityQuery((2, 1), "H", 1)
    with pytest.raises(ValueError):
        DualityQuery((1,), "Z-pair", 1)
    with pytest.raises(ValueError):
        DualityQuery((1,), "Q", 1)


def test_observable_values():
    occ = np.array([1, 0, 1])
    assert observable(P, "H", occ, 0, 2, 0, (1,))[0] == pytest.approx(P.tau ** 3)
    assert observable(P, "Htilde", occ, 0, 2, 0, (1,))[0] == pytest.approx(P.tau ** 3)
    assert observable(P, "Htilde", occ, 0, 2, 0, (0,))[0] == 0.0


def test_h_duality_one_particle():
    rep = duality_check(P, DualityQuery((3,), "H", 1), [0, 1, 0, 1, 1, 0], 0)
    assert rep.gap < 1e-12 and rep.passed


@pytest.mark.parametrize("tag", ["H", "Htilde"])
@pytest.mark.parametrize("t", [1, 2])
def test_h_duality_two_particles(tag, t):
    rep = duality_check(P, DualityQuery((1, 3), tag, t), OCC6, 0, N_left=1)
    assert rep.gap < 1e-10
    # both kernel forms are evaluated and agree
    assert abs(rep.rhs_forward - rep.rhs_reversed) < 1e-10


@pytest.mark.parametrize("tag", ["Z-pair", "etaZ-pair"])
@pytest.mark.parametrize("t", [1, 2])
def test_z_duality_exact(tag, t):
    rep = duality_check(W, DualityQuery((1, 3), tag, t), OCC6, 0, N_left=1)
    assert rep.gap < 1e-10


def test_z_duality_monte_carlo():
    rep = duality_check(W, DualityQuery((1, 4), "Z-pair", 2), OCC6, 0, N_left=1,
                        mode="monte-carlo", replicas=20000, seed=4)
    assert rep.passed
    assert abs(rep.gap) < 4 * rep.sigma
    assert rep.row()["pass"] == 1


def test_monte_carlo_calibration():
    q = DualityQuery((2,), "H", 2)
    zs = []
    for seed in range(30):
        rep = duality_check(P, q, OCC6, 0, mode="monte-carlo", replicas=2000, seed=seed)
        zs.append((rep.lhs - rep.rhs_forward) / rep.sigma)
    zs = np.array(zs)
    assert np.all(np.abs(zs) < 4.5)
    assert abs(zs.mean()) < 4 / math.sqrt(len(zs))
    assert 0.4 < zs.std() < 1.6


def test_kernel_side_needs_site_inside():
    with pytest.raises(ValueError):
        kernel_side(P, DualityQuery((4, 5), "Htilde", 1), OCC6, 0)


def test_conditional_tables_agree():
    tab = conditional_expectation_tables(W, [1, 0, 1, 1, 0, 0, 1], 0, 0, 2, [(1, 4), (0, 3), (2, 5)], N_left=1)
    assert tab.max_gap("Zg_gradient", "Zg_difference") < 1e-12
    assert tab.max_gap("Ztilde_direct", "Ztilde_sbp") < 1e-10
    assert tab.max_gap("Zg_gradient", "Zg_enumeration") < 1e-10
    assert tab.max_gap("Ztilde_direct", "Ztilde_enumeration") < 1e-10


def test_conditional_tables_empty_window():
    tab = conditional_expectation_tables(W, [0] * 6, 0, 0, 1, [(0, 3)])
    row = tab.rows[0]
    # eta vanishes, so only the -rho**2 Z Z part survives
    zz = row["Ztilde_enumeration"] / -W.rho ** 2
    assert row["Ztilde_direct"] == pytest.approx(-W.rho ** 2 * zz, abs=1e-14)
    assert row["Ztilde_sbp"] == pytest.approx(row["Ztilde_direct"], abs=1e-10)


def test_conditional_tables_reject_adjacent_pairs():
    with pytest.raises(ValueError):
        conditional_expectation_tables(W, OCC6, 0, 0, 1, [(1, 2)])


def test_time_averaged_moments_zero_horizon():
    est = time_averaged_moments(W, (0, 3), 0, 3, seed=0, initial=InitialCondition.step())
    Z = lambda k: W.tau ** (max(k, 0) - W.rho * k)
    xg = (W.eps ** 2 * (Z(1) - Z(0)) * Z(3) / W.sqrt_eps) ** 2
    xgg = (W.eps ** 2 * (1 - W.rho ** 2) * Z(0) * Z(3)) ** 2
    assert est.Xg == pytest.approx(xg, rel=1e-12)
    assert est.Xgg == pytest.approx(xgg, rel=1e-12)
    with pytest.raises(ValueError):
        time_averaged_moments(W, (0, 1), 2, 3, seed=0)
