import json

import numpy as np
import pytest

from helpers import random_mlp_policy, random_tabular_policy
from privest.errors import ConfigError
from privest.policy import (
    HistoryWindow,
    MlpPolicy,
    TabularPolicy,
    batch_windows,
    log_prob_grad,
    policy_dist,
    policy_from_checkpoint,
    window_at,
)
from privest.seeding import substream


def test_history_window_shape_contract():
    HistoryWindow((1, 2, 3), (0, 1))
    with pytest.raises(ConfigError):
        HistoryWindow((1, 2), (0, 1))


def test_window_padding_only_leading():
    w = window_at([4, 2, 7], [1, 0, 1], t=1, depth=2, pad_z=9, pad_x=5)
    assert w.z_cells == (9, 4, 2)
    assert w.xhat_cells == (5, 1)


def test_batch_windows_align_with_scalar_windows():
    rng = substream(4, 0)
    z = rng.integers(0, 3, size=(2, 5))
    a = rng.integers(0, 2, size=(2, 5))
    zw, xw = batch_windows(z, a, depth=2, pad_z=3, pad_x=2)
    for k in range(2):
        for t in range(5):
            w = window_at(z[k], a[k], t, 2, 3, 2)
            row = k * 5 + t
            assert tuple(zw[row]) == w.z_cells
            assert tuple(xw[row]) == w.xhat_cells


def test_uniform_for_equal_logits():
    pol = TabularPolicy(1, 3, 4)
    dist = policy_dist(pol, HistoryWindow((0, 1), (2,)))
    assert np.allclose(dist, 0.25, atol=1e-12)


def test_softmax_shift_invariance():
    rng = substream(8, 0)
    pol = random_tabular_policy(rng, nz=3, m=4, depth=1)
    w = HistoryWindow((0, 1), (2,))
    d1 = policy_dist(pol, w)
    pol.logits = pol.logits + 3.7
    d2 = policy_dist(pol, w)
    assert np.allclose(d1, d2, atol=1e-12)


def test_softmax_two_cell_values():
    pol = TabularPolicy(0, 2, 2)
    pol.logits[:] = [np.log(1.0), np.log(3.0)]
    dist = policy_dist(pol, HistoryWindow((1,), ()))
    assert np.allclose(dist, [0.25, 0.75], atol=1e-12)


def test_tabular_grad_closed_form():
    rng = substream(21, 0)
    pol = random_tabular_policy(rng, nz=2, m=3, depth=1)
    w = HistoryWindow((1, 0), (2,))
    probs = policy_dist(pol, w)
    g = log_prob_grad(pol, w, 2).reshape(pol.n_keys, 3)
    key = pol.key_of(np.array([[1, 0]]), np.array([[2]]))[0]
    expected = -probs.copy()
    expected[2] += 1.0
    assert np.allclose(g[key], expected, atol=1e-12)
    g[key] = 0.0
    assert np.allclose(g, 0.0, atol=1e-15)


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_score_mean_zero(kind):
    rng = substream(33, 0)
    if kind == "tabular":
        pol = random_tabular_policy(rng, nz=3, m=3, depth=1)
    else:
        pol = random_mlp_policy(rng, nz=3, m=3, depth=1)
    w = HistoryWindow((2, 0), (3 if kind == "mlp" else 1,))
    probs = policy_dist(pol, w)
    total = sum(p * log_prob_grad(pol, w, i) for i, p in enumerate(probs))
    assert np.max(np.abs(total)) < 1e-10


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_log_prob_grad_matches_finite_differences(kind):
    rng = substream(55, 3)
    n_checks = 100
    max_rel = 0.0
    for _ in range(n_checks):
        if kind == "tabular":
            pol = random_tabular_policy(rng, nz=2, m=3, depth=1)
        else:
            pol = random_mlp_policy(rng, nz=2, m=3, depth=1, hidden=6)
        w = HistoryWindow(tuple(rng.integers(0, 3, 2)), (int(rng.integers(0, 4)),))
        a = int(rng.integers(0, 3))
        g = log_prob_grad(pol, w, a)
        theta = pol.params_vector()
        h = 1e-5
        idx = rng.integers(0, len(theta), size=min(12, len(theta)))
        for i in idx:
            tp = theta.copy()
            tp[i] += h
            pol.set_params_vector(tp)
            up = np.log(policy_dist(pol, w)[a])
            tp[i] -= 2 * h
            pol.set_params_vector(tp)
            dn = np.log(policy_dist(pol, w)[a])
            pol.set_params_vector(theta)
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), 1e-8)
            max_rel = max(max_rel, abs(g[i] - fd) / denom)
    assert max_rel < 1e-6


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_dist_normalized_and_positive(kind):
    rng = substream(70, 1)
    for _ in range(25):
        if kind == "tabular":
            pol = random_tabular_policy(rng, nz=4, m=5, depth=2, scale=4.0)
        else:
            pol = random_mlp_policy(rng, nz=4, m=5, depth=2)
        zw = rng.integers(0, 5, size=(7, 3))
        xw = rng.integers(0, 6, size=(7, 2))
        dist = pol.dist_batch(zw, xw)
        assert np.all(dist > 0)
        assert np.allclose(dist.sum(axis=1), 1.0, atol=1e-9)


def test_shape_mismatch_raises():
    pol = TabularPolicy(1, 3, 2)
    with pytest.raises(ConfigError):
        pol.dist_batch(np.zeros((1, 3), dtype=int), np.zeros((1, 1), dtype=int))


def test_accumulate_score_matches_sum_of_rows():
    rng = substream(91, 0)
    pol = random_mlp_policy(rng, nz=3, m=3, depth=1, hidden=5)
    zw = rng.integers(0, 4, size=(6, 2))
    xw = rng.integers(0, 4, size=(6, 1))
    acts = rng.integers(0, 3, size=6)
    weights = rng.standard_normal(6)
    total = np.zeros_like(pol.params_vector())
    pol.accumulate_score(zw, xw, acts, weights, total)
    manual = np.zeros_like(total)
    for i in range(6):
        manual += weights[i] * pol.log_prob_grad(
            HistoryWindow(tuple(zw[i]), tuple(xw[i])), int(acts[i]))
    assert np.allclose(total, manual, atol=1e-10)


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_checkpoint_round_trip(kind):
    rng = substream(17, 2)
    if kind == "tabular":
        pol = random_tabular_policy(rng, nz=3, m=4, depth=1)
    else:
        pol = random_mlp_policy(rng, nz=3, m=4, depth=1, hidden=7)
    doc = json.loads(json.dumps(pol.to_checkpoint()))
    clone = policy_from_checkpoint(doc)
    zw = rng.integers(0, 4, size=(5, 2))
    xw = rng.integers(0, 5, size=(5, 1))
    assert np.allclose(pol.dist_batch(zw, xw), clone.dist_batch(zw, xw), atol=0)
