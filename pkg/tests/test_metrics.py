import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppgn.metrics import compute_metrics, round_half_up, stratified_split

ADJ2 = np.array([[False, True], [True, False]])


def test_perfect():
    r = compute_metrics([0, 1, 2, 2], [0, 1, 2, 2])
    assert r.f1 == r.lar == r.lar1hop == 1.0


def test_hand_confusion():
    r = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1])
    assert np.allclose(r.precision, [1, 2 / 3])
    assert np.allclose(r.recall, [0.5, 1])
    assert np.allclose(r.f, [2 / 3, 0.8])
    assert r.f1 == pytest.approx(11 / 15, abs=1e-15)
    assert r.lar == 0.75
    assert r.lar1hop == 0.75
    assert compute_metrics([0, 0, 1, 1], [0, 1, 1, 1], ADJ2).lar1hop == 1.0


def test_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        compute_metrics([0, 1], [0])


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lar_le_one_hop(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 10))
    adj = rng.uniform(size=(c, c)) < 0.3
    adj = adj | adj.T
    np.fill_diagonal(adj, False)
    y = rng.integers(c, size=int(rng.integers(1, 50)))
    p = rng.integers(c, size=len(y))
    r = compute_metrics(y, p, adj)
    assert r.lar <= r.lar1hop <= 1.0
    assert 0.0 <= r.f1 <= 1.0


def test_permutation_invariant(rng):
    y = rng.integers(5, size=40)
    p = rng.integers(5, size=40)
    perm = rng.permutation(40)
    a, b = compute_metrics(y, p), compute_metrics(y[perm], p[perm])
    assert (a.f1, a.lar) == pytest.approx((b.f1, b.lar), abs=1e-15)


def test_round_half_up():
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4999) == 2
    assert round_half_up(0.5) == 1


def test_split_full_labels():
    lab, unl = stratified_split(np.repeat(np.arange(3), 4), 1.0, 0)
    assert len(lab) == 12 and len(unl) == 0


def test_split_counts():
    y = np.repeat(np.arange(4), 10)
    lab, unl = stratified_split(y, 0.25, 0)
    assert np.array_equal(np.bincount(y[lab]), [3, 3, 3, 3])
    assert len(lab) == 12 and len(unl) == 28
    assert np.array_equal(np.sort(np.concatenate([lab, unl])), np.arange(40))


def test_split_seeds():
    y = np.repeat(np.arange(4), 10)
    a, _ = stratified_split(y, 0.25, 1)
    b, _ = stratified_split(y, 0.25, 2)
    assert not np.array_equal(a, b)
    assert np.array_equal(np.bincount(y[a]), np.bincount(y[b]))
    assert np.array_equal(a, stratified_split(y, 0.25, 1)[0])


def test_split_bad_rate():
    with pytest.raises(ValueError):
        stratified_split([0, 1], 0.0, 0)
