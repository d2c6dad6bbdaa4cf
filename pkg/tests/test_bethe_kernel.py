import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pair_law, walk_pmf
from sixvertex.model_core import ModelParams
from sixvertex.bethe_kernel import (
    ContourError,
    ContourSpec,
    ExponentOverflowError,
    KernelQuery,
    PairKernel,
    SemigroupQuery,
    gradient_V,
    lead_tail_bound,
    one_particle_table,
    pole_inventory,
    quadrature,
    reversed_transition_prob,
    semigroup_V,
    tilting_prefactor,
    transition_prob,
    verify_bounds,
)

P = ModelParams(0.6, 0.3, 0.5)
W = ModelParams.weakly_asymmetric(0.6, 0.04, 0.5)
STRICT = ContourSpec(fallback=False)


def test_quadrature_residues():
    c = ContourSpec(radius=1.0, nodes=64)
    val, _, _ = quadrature(lambda z: 1.0 / z, c)
    assert abs(val - 1.0) < 1e-14
    val, _, _ = quadrature(lambda z: z ** 3, c)
    assert abs(val) < 1e-14
    p = 0.3 + 0.1j
    val, _, _ = quadrature(lambda z: 1.0 / (z - p), c)
    assert abs(val - 1.0) < 1e-12
    with pytest.raises(ContourError):
        quadrature(lambda z: z, ContourSpec(radius=None))


def test_query_validation():
    with pytest.raises(ValueError):
        KernelQuery((1, 0), (2, 3), 1)
    with pytest.raises(ValueError):
        KernelQuery((0, 1), (2, 3), -1)
    with pytest.raises(ValueError):
        SemigroupQuery((0, 2), (3, 4), 1, gradient="x1")
    with pytest.raises(ValueError):
        SemigroupQuery((0, 2), (3, 6), 1, gradient="z")


def test_one_particle_values():
    assert transition_prob(P, KernelQuery((0,), (0,), 1)).value == pytest.approx(0.6, abs=1e-13)
    for t in range(1, 5):
        tab = one_particle_table(P, t, 12)
        for n in range(13):
            v = transition_prob(P, KernelQuery((0,), (n,), t)).value
            assert v == pytest.approx(tab[n], abs=1e-12)


def test_zero_steps_is_identity():
    assert transition_prob(P, KernelQuery((0, 2), (0, 2), 0)).value == 1.0
    assert transition_prob(P, KernelQuery((0, 2), (0, 3), 0)).value == 0.0
    assert semigroup_V(W, SemigroupQuery((0, 2), (0, 2), 0)).value == 1.0


def test_pair_examples():
    assert transition_prob(P, KernelQuery((0, 1), (0, 2), 1), STRICT).value == pytest.approx(0.168, abs=1e-12)
    assert transition_prob(P, KernelQuery((0, 1), (1, 2), 1), STRICT).value == pytest.approx(0.28, abs=1e-12)


def _chain_targets(src, t, x_max=12):
    law = pair_law(P.b1, P.b2, src, t, 0, x_max + 2)
    keys = [k for k in law if k[0] >= src[0] and k[1] <= x_max]
    return np.array(keys), np.array([law[k] for k in keys])


def test_split_kernel_matches_chain():
    for src in [(0, 1), (0, 3), (2, 4)]:
        for t in (1, 2, 3):
            tgt, expect = _chain_targets(src, t)
            pk = PairKernel(P, t, "U", STRICT)
            vals = pk.evaluate(src[0], src[1], tgt[:, 0], tgt[:, 1])[0]
            assert np.max(np.abs(vals - expect)) < 1e-12


def test_circle_kernel_matches_chain():
    for src in [(0, 1), (0, 3)]:
        for t in (1, 2, 3):
            tgt, expect = _chain_targets(src, t, x_max=8)
            for (x1, x2), p in zip(tgt, expect):
                v = transition_prob(P, KernelQuery(src, (x1, x2), t), STRICT, "circle").value
                assert abs(v - p) < 1e-9


def test_pair_kernel_normalisation():
    for t in (1, 2, 4):
        pk = PairKernel(P, t, "U", STRICT)
        xs = np.arange(0, 60)
        X1, X2 = np.meshgrid(xs, xs, indexing="ij")
        keep = X1 < X2
        vals = pk.evaluate(0, 2, X1[keep], X2[keep])[0]
        assert vals.sum() == pytest.approx(1.0, abs=1e-8)


def test_reversal_identity():
    # the reflected model run from the target back to the source reproduces
    # the forward chain probability
    for t in (1, 2, 3):
        tgt, expect = _chain_targets((0, 2), t, x_max=8)
        for (x1, x2), p in zip(tgt, expect):
            v = reversed_transition_prob(P, KernelQuery((x1, x2), (0, 2), t), STRICT).value
            assert abs(v - p) < 1e-10


def test_radius_independence():
    q = KernelQuery((0, 2), (1, 4), 2)
    r = pole_inventory(P)["interaction_radius"]
    a = transition_prob(P, q, ContourSpec(radius=1.5 * r), "circle").value
    b = transition_prob(P, q, ContourSpec(radius=3.0 * r), "circle").value
    assert a == pytest.approx(b, abs=1e-10)
    with pytest.raises(ContourError):
        transition_prob(P, q, ContourSpec(radius=0.9 * r), "circle")


def test_overflow_guard():
    with pytest.raises(ExponentOverflowError):
        transition_prob(P, KernelQuery((0,), (500,), 2), ContourSpec(radius=1.5))


def test_lead_tail_bound_against_convolution():
    t = 5
    pmf = np.array([walk_pmf(P.b1, P.b2, n) for n in range(200)])
    law = np.array([1.0])
    for _ in range(t):
        law = np.convolve(law, pmf)[:200]
    for d in (0, 1, 3, 10, 30):
        assert lead_tail_bound(P, t, d) == pytest.approx(law[d:].sum(), rel=1e-9, abs=1e-300)
    assert lead_tail_bound(P, t, -4) == 1.0


def test_tilting_identity():
    for t in (1, 2):
        pk_u = PairKernel(W, t, "U", STRICT)
        for src, tgt in [((0, 2), (1, 4)), ((0, 1), (0, 3)), ((-1, 2), (2, 5))]:
            q = SemigroupQuery(src, tgt, t)
            v = semigroup_V(W, q, STRICT).value
            u = pk_u.evaluate(*src, *tgt)[0][0]
            assert abs(v - tilting_prefactor(W, q) * u) < 1e-8
            c = semigroup_V(W, q, ContourSpec(), method="circle").value
            assert abs(v - c) < 1e-8


def test_far_sources_use_exact_recursion():
    pk = PairKernel(W, 3, "V")
    X1, X2 = np.array([1]), np.array([3])
    for y1 in (-40, -20, -8):
        v = pk.evaluate(y1, y1 + 2, X1, X2)[0][0]
        exact, ok = pk.recursion(np.array([y1]), np.array([y1 + 2]), X1, X2)
        assert ok[0]
        assert abs(v - exact[0]) <= 1e-14 * max(1.0, abs(exact[0]))


@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 4), y1=st.integers(-6, 2), gap=st.integers(2, 4),
       dx=st.integers(-2, 4), dgap=st.integers(2, 5),
       grad=st.sampled_from(["x1", "x2", "y1", "y2"]))
def test_gradient_matches_difference(t, y1, gap, dx, dgap, grad):
    src = (y1, y1 + gap)
    tgt = (y1 + dx + math.floor(W.mu * t), y1 + dx + math.floor(W.mu * t) + dgap)
    q = SemigroupQuery(src, tgt, t, gradient=grad)
    a = gradient_V(W, q).value
    b = gradient_V(W, q, by_difference=True).value
    assert abs(a - b) < 1e-10


def test_gradient_without_selector_rejected():
    with pytest.raises(ValueError):
        gradient_V(W, SemigroupQuery((0, 2), (1, 4), 1))


def test_verify_bounds_split_consistency():
    rep = verify_bounds(W, 0.5, 1.0, [2, 3, 5], [1, 3], window=6)
    assert rep.split_gap < 1e-10
    assert rep.C_value > 0 and rep.C_gradient > 0
    assert {r["t"] for r in rep.rows} == {2, 3, 5}
    with pytest.raises(ValueError):
        verify_bounds(W, 0.5, 0.001, [2, 30], [1])


def test_free_part_at_time_zero():
    pk = PairKernel(W, 0, "V", STRICT)
    vals = pk.evaluate(0, 2, np.array([0, 0, 1]), np.array([2, 3, 2]), parts="free")[0]
    assert np.allclose(vals, [1.0, 0.0, 0.0], atol=1e-14)


def test_split_accurate_far_ahead_of_characteristic():
    # targets well ahead of the characteristic: summands of the residue line
    # are large unless it is moved to a smaller radius
    p = ModelParams.weakly_asymmetric(0.5, 0.01, 0.5)
    for t in (8, 16):
        pk = PairKernel(p, t, "V", STRICT)
        c = math.floor(p.mu * t)
        X1 = np.arange(c + 4, c + 22)
        X2 = X1 + 2
        Y1, Y2 = np.zeros_like(X1), np.full_like(X1, 2)
        vals = pk.evaluate(Y1, Y2, X1, X2)[0]
        exact, ok = pk.recursion(Y1, Y2, X1, X2)
        assert ok.all()
        assert np.max(np.abs(vals - exact)) < 1e-12
        free = pk.evaluate(Y1, Y2, X1, X2, parts="free")[0]
        inter = pk.evaluate(Y1, Y2, X1, X2, parts="int")[0]
        assert np.max(np.abs(free - inter - exact)) < 1e-12
