"""Selection, aggregation, InfoNCE, and the K schedule."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from chimera.selective_distillation import (
    DecaySchedule,
    aggregate_global,
    decayed_k,
    gumbel_topk,
    select_global,
    sgd_loss,
    similarity_scores,
)


def test_similarity_zero_input():
    s = similarity_scores(torch.zeros(3, 3, 8), torch.randn(8))
    assert torch.equal(s, torch.zeros(9))


def test_similarity_single_position():
    f = np.ones((1, 1, 4))
    s = similarity_scores(f, np.ones(4))
    np.testing.assert_allclose(s, [2.0])


def test_similarity_matches_loop_oracle():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 3, 8))
    c = rng.normal(size=8)
    got = similarity_scores(f, c)
    want = [sum(f[i, j, d] * c[d] for d in range(8)) / math.sqrt(8)
            for i in range(3) for j in range(3)]
    np.testing.assert_allclose(got, want, atol=1e-6)
    got_t = similarity_scores(torch.from_numpy(f), torch.from_numpy(c))
    np.testing.assert_allclose(got_t.numpy(), want, atol=1e-6)


def test_similarity_dimension_mismatch():
    with pytest.raises(ValueError, match="d_emb"):
        similarity_scores(np.zeros((2, 2, 8)), np.zeros(6))


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40),
       st.integers(1, 40), st.integers(0, 2 ** 31))
@settings(max_examples=80, deadline=None)
def test_noise_off_equals_sort_oracle(scores, k, _seed):
    s = np.array(scores)
    k = min(k, s.size)
    got = gumbel_topk(s, k, tau=0.07, noise=False)
    order = sorted(range(s.size), key=lambda i: (-s[i], i))
    assert list(got) == order[:k]
    assert len(set(got.tolist())) == k


def test_exhaustive_selection_returns_all():
    s = np.random.default_rng(1).normal(size=12)
    rng = np.random.default_rng(2)
    assert set(gumbel_topk(s, 12, 0.07, rng=rng, noise=True).tolist()) == set(range(12))
    assert set(gumbel_topk(s, 12, 0.07, noise=False).tolist()) == set(range(12))


def test_ties_break_to_lower_index():
    s = np.array([1.0, 2.0, 2.0, 1.0, 2.0])
    assert list(gumbel_topk(s, 3, 1.0, noise=False)) == [1, 2, 4]


def test_gumbel_selection_frequencies_match_scaled_softmax():
    """k=1 selection frequencies estimate softmax(S/tau); chi-square p > 0.01."""
    s = np.array([0.4, -0.3, 0.8, 0.1])
    tau = 0.5
    rng = np.random.default_rng(123)
    n = 100_000
    keys = s / tau - np.log(-np.log(rng.random((n, 4))))
    counts = np.bincount(np.argmax(keys, axis=1), minlength=4)

    rng2 = np.random.default_rng(123)
    picks = np.array([gumbel_topk(s, 1, tau, rng=rng2, noise=True)[0] for _ in range(500)])
    counts_fn = np.bincount(picks, minlength=4)

    expected = np.exp(s / tau) / np.exp(s / tau).sum()
    p_batch = stats.chisquare(counts, expected * n).pvalue
    p_fn = stats.chisquare(counts_fn, expected * 500).pvalue
    assert p_batch > 0.01, (counts / n, expected)
    assert p_fn > 0.01, (counts_fn / 500, expected)


def test_gumbel_topk_errors():
    s = np.zeros(4)
    with pytest.raises(ValueError, match="out of range"):
        gumbel_topk(s, 0, 0.07, noise=False)
    with pytest.raises(ValueError, match="out of range"):
        gumbel_topk(s, 5, 0.07, noise=False)
    with pytest.raises(ValueError, match="tau"):
        gumbel_topk(s, 1, 0.0, noise=False)
    with pytest.raises(ValueError, match="rng"):
        gumbel_topk(s, 1, 0.07, noise=True)


def test_aggregate_singleton():
    f = torch.randn(1, 6)
    w, g = aggregate_global(f, torch.randn(6))
    torch.testing.assert_close(w, torch.ones(1))
    torch.testing.assert_close(g, f[0])


def test_aggregate_identical_rows():
    row = torch.randn(8)
    f = row.expand(5, 8)
    w, g = aggregate_global(f, torch.randn(8))
    torch.testing.assert_close(w, torch.full((5,), 0.2))
    torch.testing.assert_close(g, row)


def test_aggregate_matches_sum_oracle():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(5, 8))
    c = rng.normal(size=8)
    w, g = aggregate_global(torch.from_numpy(f), torch.from_numpy(c))
    raw = [sum(f[k, d] * c[d] for d in range(8)) / math.sqrt(8) for k in range(5)]
    e = [math.exp(r - max(raw)) for r in raw]
    w_ref = [v / sum(e) for v in e]
    g_ref = [sum(w_ref[k] * f[k, d] for k in range(5)) for d in range(8)]
    np.testing.assert_allclose(w.numpy(), w_ref, atol=1e-6)
    np.testing.assert_allclose(g.numpy(), g_ref, atol=1e-6)
    assert abs(float(w.sum()) - 1.0) <= 1e-6
    assert (w >= 0).all()


def test_aggregate_empty_selection():
    with pytest.raises(ValueError, match="non-empty"):
        aggregate_global(torch.zeros(0, 4), torch.zeros(4))


def test_select_global_invariants():
    torch.manual_seed(0)
    f_c = torch.randn(4, 4, 8)
    c_g = torch.randn(8)
    sel, f_g = select_global(f_c, c_g, k=5, tau=0.07, rng=np.random.default_rng(0))
    assert len(set(sel.indices.tolist())) == 5
    assert abs(float(sel.weights.sum()) - 1.0) <= 1e-6
    assert f_g.shape == (8,)
    torch.testing.assert_close(f_g, sel.weights @ sel.f_k)


def test_sgd_loss_single_sample_is_zero():
    loss = sgd_loss(torch.randn(1, 8), torch.randn(1, 8), tau=0.07)
    assert float(loss) == 0.0


def test_sgd_loss_orthonormal_pair():
    f = torch.eye(2, dtype=torch.float64)
    loss = sgd_loss(f, f.clone(), tau=1.0)
    want = -math.log(math.e / (math.e + 1.0))
    assert abs(float(loss) - want) <= 1e-9
    assert abs(want - 0.3133) <= 5e-5


def test_sgd_loss_matches_brute_force_and_fd():
    rng = np.random.default_rng(4)
    f = torch.tensor(rng.normal(size=(4, 8)), requires_grad=True)
    c = torch.tensor(rng.normal(size=(4, 8)))
    tau = 0.07
    loss = sgd_loss(f, c, tau)

    ref = 0.0
    fn, cn = f.detach().numpy(), c.numpy()
    for i in range(4):
        logits = [float(fn[i] @ cn[j]) / tau for j in range(4)]
        m = max(logits)
        ref += -((logits[i] - m) - math.log(sum(math.exp(l - m) for l in logits)))
    ref /= 4
    assert abs(loss.detach().item() - ref) <= 1e-8

    loss.backward()
    eps = 1e-6
    for idx in [(0, 0), (1, 3), (3, 7)]:
        analytic = f.grad[idx].item()
        with torch.no_grad():
            orig = f[idx].item()
            f[idx] = orig + eps
            up = float(sgd_loss(f, c, tau))
            f[idx] = orig - eps
            down = float(sgd_loss(f, c, tau))
            f[idx] = orig
        numeric = (up - down) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom <= 1e-4, idx


def test_sgd_loss_batch_permutation_invariant():
    rng = np.random.default_rng(5)
    f = torch.tensor(rng.normal(size=(5, 6)))
    c = torch.tensor(rng.normal(size=(5, 6)))
    perm = torch.tensor([3, 0, 4, 1, 2])
    a = float(sgd_loss(f, c, 0.07))
    b = float(sgd_loss(f[perm], c[perm], 0.07))
    assert abs(a - b) <= 1e-10


def test_sgd_loss_stable_at_large_magnitude():
    f = torch.tensor([[1e4, 0.0], [0.0, -1e4]], dtype=torch.float64)
    c = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    loss = sgd_loss(f, c, tau=1.0)
    assert torch.isfinite(loss)


@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_sgd_loss_nonnegative(b, seed):
    rng = np.random.default_rng(seed)
    f = torch.tensor(rng.normal(size=(b, 4)))
    c = torch.tensor(rng.normal(size=(b, 4)))
    assert float(sgd_loss(f, c, 0.07)) >= 0.0


def test_sgd_loss_errors():
    with pytest.raises(ValueError, match="tau"):
        sgd_loss(torch.zeros(2, 4), torch.zeros(2, 4), 0.0)
    with pytest.raises(ValueError, match="mismatch"):
        sgd_loss(torch.zeros(2, 4), torch.zeros(3, 4), 0.07)


def test_decayed_k_reference_points():
    sched = DecaySchedule(k0=9000, rate=0.1, k_min=1, mode="decrease")
    assert decayed_k(0, sched, 10 ** 6) == 9000
    assert decayed_k(10, sched, 10 ** 6) == 8999
    assert decayed_k(0, sched, 256) == 256
    assert decayed_k(80_000, sched, 10 ** 6) == 1000
    assert decayed_k(10 ** 8, sched, 10 ** 6) == 1


def test_decayed_k_round_half_to_even():
    sched = DecaySchedule(k0=2, rate=0.5, k_min=1, mode="decrease")
    assert decayed_k(1, sched, 100) == 2   # round(1.5) -> 2
    sched = DecaySchedule(k0=3, rate=0.5, k_min=1, mode="decrease")
    assert decayed_k(1, sched, 100) == 2   # round(2.5) -> 2


def test_decayed_k_modes():
    cap = 500
    inc = DecaySchedule(k0=10, rate=2.0, k_min=1, mode="increase")
    assert decayed_k(0, inc, cap) == 10
    assert decayed_k(5, inc, cap) == 20
    assert decayed_k(10 ** 4, inc, cap) == cap
    none = DecaySchedule(k0=9000, rate=0.1, k_min=1, mode="none")
    assert decayed_k(0, none, cap) == cap
    assert decayed_k(700, none, cap) == cap
    assert decayed_k(700, none, 10 ** 6) == 9000


@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
@settings(max_examples=60, deadline=None)
def test_decayed_k_monotone_and_bounded(i, j):
    sched = DecaySchedule(k0=9000, rate=0.1, k_min=1, mode="decrease")
    cap = 4096
    lo, hi = min(i, j), max(i, j)
    a, b = decayed_k(lo, sched, cap), decayed_k(hi, sched, cap)
    assert a >= b
    assert 1 <= a <= cap and 1 <= b <= cap


def test_schedule_validation():
    with pytest.raises(ValueError, match="mode"):
        DecaySchedule(mode="linear")
    with pytest.raises(ValueError, match="k_min"):
        DecaySchedule(k0=5, k_min=9)
    with pytest.raises(ValueError, match="rate"):
        DecaySchedule(rate=-0.1)
