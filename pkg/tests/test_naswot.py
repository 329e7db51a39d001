import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from energynas.arch_space import CONV3X3, EDGES, SKIP, ZEROIZE, Architecture, sample_space
from energynas.naswot import (
    activation_codes,
    instantiate,
    int_det,
    kernel_matrix,
    naswot_score,
    probe_batch,
    score_architecture,
)

SINGLE_CONV = Architecture(tuple(CONV3X3 if e == (0, 3) else ZEROIZE for e in EDGES))


def test_ln16_example():
    codes = np.array([[0, 0, 0, 0], [1, 1, 1, 1]])
    assert np.array_equal(kernel_matrix(codes), [[4, 0], [0, 4]])
    s = naswot_score(codes)
    assert s.finite and s.n_s == pytest.approx(math.log(16), abs=1e-12)


def test_identical_rows_singular():
    s = naswot_score(np.array([[1, 0, 1], [1, 0, 1]]))
    assert not s.finite and s.n_s == float("-inf")


def test_b_two_monotone_in_hamming():
    u = 6
    scores = [naswot_score(np.array([[0] * u, [1] * d + [0] * (u - d)])).n_s for d in range(1, u + 1)]
    assert all(b > a for a, b in zip(scores, scores[1:]))


@given(st.integers(2, 8), st.integers(1, 40), st.integers(0, 2**31), st.randoms())
def test_kernel_properties(b, u, seed, rnd):
    codes = np.random.default_rng(seed).integers(0, 2, size=(b, u))
    k = kernel_matrix(codes)
    assert np.array_equal(k, k.T)
    assert np.all(np.diag(k) == u) and k.min() >= 0 and k.max() <= u
    assert np.linalg.eigvalsh(k.astype(float)).min() >= -1e-9
    ham = (codes[:, None, :] != codes[None, :, :]).sum(-1)
    assert np.array_equal(k, u - ham)
    perm = list(range(b))
    rnd.shuffle(perm)
    assert naswot_score(codes[perm]) == naswot_score(codes)


def test_relu_unit_hand_count():
    # one 3x3 conv per cell: 5 cells each of 16, 32, 64 channels plus two reduction blocks (32, 64)
    net = instantiate(SINGLE_CONV)
    assert net.relu_unit_count == 5 * 16 + 5 * 32 + 5 * 64 + 32 + 64 == 656
    full = instantiate(SINGLE_CONV, granularity="full")
    spatial = 5 * 16 * 64 + 5 * 32 * 16 + 5 * 64 * 4 + 32 * 16 + 64 * 4
    assert full.relu_unit_count == spatial == 9728
    codes = activation_codes(net, probe_batch(0))
    assert codes.codes.shape == (8, 656)


def test_weight_init_bounds_and_determinism():
    a, b, c = instantiate(SINGLE_CONV, 1), instantiate(SINGLE_CONV, 1), instantiate(SINGLE_CONV, 2)
    for la, lb, lc in zip(a.conv_layers(), b.conv_layers(), c.conv_layers()):
        assert np.array_equal(la.weight, lb.weight)
        assert not np.array_equal(la.weight, lc.weight)
        ks, _, cin, _ = la.weight.shape
        assert np.abs(la.weight).max() <= 1 / math.sqrt(cin * ks * ks)


def test_zero_weights_zero_codes():
    net = instantiate(SINGLE_CONV)
    for layer in net.conv_layers():
        layer.weight[...] = 0.0
    assert not activation_codes(net, probe_batch(0)).codes.any()


def test_duplicated_input_rows():
    net = instantiate(Architecture((CONV3X3,) * 6))
    x = probe_batch(3)
    x[1] = x[0]
    codes = activation_codes(net, x).codes
    assert np.array_equal(codes[0], codes[1])


def test_batch_too_small():
    net = instantiate(SINGLE_CONV)
    with pytest.raises(ValueError):
        activation_codes(net, probe_batch(0, batch=1))


def test_invalid_arch_rejected():
    with pytest.raises(ValueError, match="shape validation"):
        instantiate(Architecture((ZEROIZE,) * 6))


def test_score_determinism_and_timing():
    archs = sample_space(11, 20)
    score_architecture(archs[0])  # warm up
    t0 = time.perf_counter()
    first = [score_architecture(a, seed=0, probe_seed=0) for a in archs]
    per_arch = (time.perf_counter() - t0) / len(archs)
    assert per_arch <= 0.085
    assert first == [score_architecture(a, seed=0, probe_seed=0) for a in archs]


def test_skip_only_still_scores():
    s = score_architecture(Architecture((SKIP,) * 6))
    assert isinstance(s.finite, bool)


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_int_det_matches_float(n, seed):
    m = np.random.default_rng(seed).integers(-5, 6, size=(n, n))
    assert int_det(m) == round(np.linalg.det(m.astype(float)))
    assert int_det(np.zeros((3, 3), dtype=int)) == 0
