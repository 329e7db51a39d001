import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from energynas.pareto import (
    Constraints,
    FrontEntry,
    GradientEstimate,
    Observation,
    OracleError,
    alignment_scores,
    closed_form_two,
    dominates,
    estimate_gradients,
    hypervolume_2d,
    init_search,
    min_norm_direction,
    nearest_neighbors,
    nondominated_mask,
    normalize_energy,
    normalize_score,
    pareto_front,
    rank_candidates,
    run_search,
    search_iteration,
    select_best,
)


def entry(i, obj, emb=None):
    return FrontEntry(str(i), np.zeros(2) if emb is None else np.asarray(emb, float), obj)


def brute_mask(pts):
    return np.array([not any(dominates(q, p) for q in pts) for p in pts])


# -- normalization ---------------------------------------------------------

def test_normalize_energy_examples():
    assert normalize_energy([2, 4, 6]).tolist() == [0, 0.5, 1]
    assert normalize_energy([5, 5, 5]).tolist() == [0, 0, 0]
    assert normalize_energy([3]).tolist() == [0]


def test_normalize_score_examples():
    assert normalize_score([math.e, math.e**2]) == pytest.approx([1, 2])
    assert normalize_score([math.e, -math.inf]) == pytest.approx([1, 0])
    assert normalize_score([1.0]).tolist() == [0.0]
    assert normalize_score([-math.inf]).tolist() == [-1.0]


# -- dominance and fronts -----------------------------------------------------

def test_dominates_examples():
    assert dominates((1, 1), (2, 2))
    assert not dominates((1, 2), (2, 1)) and not dominates((2, 1), (1, 2))
    assert not dominates((1, 1), (1, 1))
    with pytest.raises(ValueError):
        dominates((1,), (1, 2))


def test_front_example():
    pts = [(1, 3), (2, 2), (3, 1), (3, 3)]
    front = pareto_front([entry(k, p) for k, p in enumerate(pts)])
    assert [e.objectives for e in front.entries] == [(1, 3), (2, 2), (3, 1)]
    assert pareto_front([entry("a", (1, 1))]).ids == ["a"]
    dup = pareto_front([entry("b", (1, 1)), entry("a", (1, 1))])
    assert dup.ids == ["a", "b"]


pts2 = st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=40)
pts3 = st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30)


@given(st.one_of(pts2, pts3))
def test_front_matches_brute_force(pts):
    arr = np.array(pts, float)
    assert np.array_equal(nondominated_mask(arr), brute_mask(arr))


@given(pts2)
def test_front_idempotent(pts):
    front = pareto_front([entry(k, p) for k, p in enumerate(pts)])
    again = pareto_front(front.entries)
    assert again.ids == front.ids


@given(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
def test_dominance_irreflexive_antisymmetric(a, b):
    assert not dominates(a, a)
    assert not (dominates(a, b) and dominates(b, a))


# -- hypervolume ---------------------------------------------------------------

def test_hypervolume_hand_example():
    # staircase (1,3),(2,2),(3,1) against ref (4,4): 1*1 + 1*2 + 1*3 = 6
    assert hypervolume_2d(np.array([(1, 3), (2, 2), (3, 1)]), (4, 4)) == 6.0
    assert hypervolume_2d(np.array([(5, 5)]), (4, 4)) == 0.0


def grid_hv(pts, ref):
    # oracle: union of rectangles via the sorted unique coordinates, exact fractions
    pts = [(Fraction(x), Fraction(y)) for x, y in pts if x < ref[0] and y < ref[1]]
    xs = sorted({p[0] for p in pts} | {Fraction(ref[0])})
    area = Fraction(0)
    for x0, x1 in zip(xs, xs[1:]):
        ys = [p[1] for p in pts if p[0] <= x0]
        if ys:
            area += (x1 - x0) * (Fraction(ref[1]) - min(ys))
    return float(area)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=25))
def test_hypervolume_oracle_and_monotone(pts):
    ref = (1.1, 1.1)
    hv = hypervolume_2d(np.array(pts), ref)
    assert hv == pytest.approx(grid_hv(pts, ref), abs=1e-12)
    assert hypervolume_2d(np.array(pts + [(0.5, 0.5)]), ref) >= hv


# -- gradients -------------------------------------------------------------------

def test_gradient_recovers_linear_field():
    rng = np.random.default_rng(0)
    w = np.array([[1.5, -2.0, 0.5], [0.0, 3.0, -1.0]])
    anchor = FrontEntry("a", np.zeros(3), (0.0, 0.0))
    nbrs = []
    for k in range(15):
        x = rng.normal(size=3)
        nbrs.append(FrontEntry(f"n{k}", x, tuple(w @ x + 0.0)))
    est = estimate_gradients(anchor, nbrs, ridge=1e-12)
    assert np.allclose(est.g, w, atol=1e-6)
    assert np.array_equal(estimate_gradients(anchor, nbrs).g, estimate_gradients(anchor, nbrs).g)


def test_gradient_dual_form_and_constant_field():
    rng = np.random.default_rng(1)
    anchor = FrontEntry("a", np.zeros(40), (1.0, 2.0))
    nbrs = [FrontEntry(f"n{k}", rng.normal(size=40), (1.0, 2.0)) for k in range(5)]
    assert np.allclose(estimate_gradients(anchor, nbrs).g, 0.0)
    with pytest.raises(ValueError, match="insufficient neighborhood"):
        estimate_gradients(anchor, nbrs[:2])


def test_nearest_neighbors_excludes_self_and_orders():
    a = entry("a", (0, 0), (0, 0))
    pool = [a, entry("c", (0, 0), (2, 0)), entry("b", (0, 0), (1, 0)), entry("d", (0, 0), (1, 0))]
    assert [e.arch_id for e in nearest_neighbors(a, pool, 2)] == ["b", "d"]


# -- min-norm direction --------------------------------------------------------

def test_min_norm_examples():
    r = min_norm_direction(np.array([[1.0, 0.0], [0.0, 1.0]]), (1, 1))
    assert r.lam == pytest.approx([0.5, 0.5], abs=1e-9) and r.g_star == pytest.approx([0.5, 0.5], abs=1e-9)
    g1 = np.array([0.3, -1.2])
    r = min_norm_direction(np.array([g1, g1]))
    assert r.g_star == pytest.approx(g1)
    r = min_norm_direction(np.array([g1, -g1]))
    assert r.converged and not r.g_star.any()


@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 100))
def test_min_norm_closed_form_and_ws_scaling(v, w1, w2, c):
    g = np.array(v).reshape(2, 3)
    r = min_norm_direction(g)
    if r.converged:
        return
    assert r.lam[0] == pytest.approx(closed_form_two(g[0], g[1]), abs=1e-6)
    a = min_norm_direction(g, (w1, w2))
    b = min_norm_direction(g, (c * w1, c * w2))
    assert np.allclose(a.lam_tilde, b.lam_tilde) and np.allclose(a.g_star, b.g_star)


def test_min_norm_rejects_bad_ws():
    with pytest.raises(ValueError):
        min_norm_direction(np.eye(2), (1.0, 0.0))


# -- ranking and selection --------------------------------------------------------

def test_alignment_cosine_extremum_and_zero_displacement():
    anchor = np.zeros((1, 2))
    g = np.array([[3.0, 4.0]])
    cands = np.array([[-0.6, -0.8], [0.8, -0.6], [0.0, 0.0]])
    s = alignment_scores(cands, anchor, g)
    assert s[0] == pytest.approx(5.0) and s[1] == pytest.approx(0.0) and s[2] == -np.inf
    anchors = [entry("A", (0, 0), (0, 0))]
    cands_e = [entry(n, (0, 0), c) for n, c in zip("xyz", cands)]
    assert rank_candidates(cands_e, anchors, g, 3) == ["x", "y"]
    with pytest.raises(ValueError):
        rank_candidates([], anchors, g, 3)


def test_rank_matches_brute_force():
    rng = np.random.default_rng(2)
    cands = [entry(f"c{k:03d}", (0, 0), rng.normal(size=5)) for k in range(100)]
    anchors = [entry(f"a{k}", (0, 0), rng.normal(size=5)) for k in range(4)]
    dirs = rng.normal(size=(4, 5))
    brute = []
    for c in cands:
        best = max(
            float(np.dot(c.embedding - a.embedding, -d) / np.linalg.norm(c.embedding - a.embedding))
            for a, d in zip(anchors, dirs)
        )
        brute.append((-best, c.arch_id))
    assert rank_candidates(cands, anchors, dirs, 10) == [i for _, i in sorted(brute)[:10]]


def _front3():
    # energy gradient shrinks toward the low-energy end, accuracy gradient toward the high end
    ents = [entry("lo", (0.0, 0.0)), entry("mid", (0.5, -0.5)), entry("hi", (1.0, -1.0))]
    grads = {
        "lo": GradientEstimate(np.array([[0.1, 0.0], [0.0, 2.0]]), "lo", 15),
        "mid": GradientEstimate(np.array([[1.0, 0.0], [0.0, 1.0]]), "mid", 15),
        "hi": GradientEstimate(np.array([[2.0, 0.0], [0.0, 0.1]]), "hi", 15),
    }
    return ents, grads


def test_select_best_examples():
    ents, grads = _front3()
    # norms with wd=(1,1): lo sqrt(4.01), mid sqrt(2), hi sqrt(4.01)
    assert select_best(ents, (1, 1), grads) == "mid"
    assert select_best(ents, (100, 1), grads) == "lo"
    assert select_best(ents, (1, 100), grads) == "hi"
    assert select_best(ents[:1], (1, 1), {}) == "lo"
    with pytest.raises(ValueError):
        select_best([], (1, 1), grads)


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 1000))
def test_select_best_wd_scale_invariant(w1, w2, c):
    ents, grads = _front3()
    assert select_best(ents, (w1, w2), grads) == select_best(ents, (c * w1, c * w2), grads)


# -- search loop ------------------------------------------------------------------

def _landscape(n=300, seed=0):
    rng = np.random.default_rng(seed)
    pool = {f"m{k:04d}": rng.uniform(size=4) for k in range(n)}
    truth = {i: Observation(float(1 + 10 * e[0] + e[1]), float(math.exp(1 + e[0] + 0.5 * e[2])), float(e[0])) for i, e in pool.items()}
    return pool, truth


def test_empty_constraints_run_full_budget_and_hv_monotone():
    pool, truth = _landscape()
    st0 = init_search(pool, truth, truth.__getitem__, seed=0, n_init=30, n_batch=5, max_iterations=4)
    final, status = run_search(st0, truth.__getitem__)
    assert status == "completed" and final.iteration == 4
    assert len(final.evaluated) == 30 + 4 * 5
    assert all(b >= a for a, b in zip(final.hv_history, final.hv_history[1:]))
    assert st0.iteration == 0 and len(st0.evaluated) == 30  # inputs untouched


def test_constraints_met_initially_skips_loop():
    pool, truth = _landscape()
    st0 = init_search(pool, truth, truth.__getitem__, seed=0, n_init=30, constraints=Constraints(max_energy_mJ=1e9))
    final, status = run_search(st0, truth.__getitem__)
    assert status == "constraints_met" and final.iteration == 0


def test_unreachable_constraints_exhaust_budget():
    pool, truth = _landscape()
    st0 = init_search(pool, truth, truth.__getitem__, seed=0, n_init=30, n_batch=5, max_iterations=2, constraints=Constraints(max_energy_mJ=0.0))
    final, status = run_search(st0, truth.__getitem__)
    assert status == "budget_exhausted" and final.iteration == 2


def test_oracle_failure_leaves_state_unchanged():
    pool, truth = _landscape()
    st0 = init_search(pool, truth, truth.__getitem__, seed=0, n_init=30, n_batch=5)

    def broken(i):
        raise RuntimeError("device offline")

    before = (st0.iteration, sorted(st0.evaluated), list(st0.hv_history))
    with pytest.raises(OracleError):
        search_iteration(st0, broken)
    assert (st0.iteration, sorted(st0.evaluated), list(st0.hv_history)) == before


def test_init_search_stratified_and_seeded():
    pool, truth = _landscape()
    a = init_search(pool, truth, truth.__getitem__, seed=3, n_init=40)
    b = init_search(pool, truth, truth.__getitem__, seed=3, n_init=40)
    assert sorted(a.evaluated) == sorted(b.evaluated)
    energies = sorted(truth[i].energy_mJ for i in pool)
    quart = [energies[len(energies) * q // 4] for q in (1, 2, 3)]
    counts = np.bincount(np.searchsorted(quart, [truth[i].energy_mJ for i in a.evaluated], side="right"), minlength=4)
    assert all(abs(c - 10) <= 1 for c in counts)
    with pytest.raises(ValueError):
        init_search(pool, truth, truth.__getitem__, seed=0, n_init=10_000)
