import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pathseek.attention import (
    AttentionTrace,
    cross_attention,
    head_average,
    joint_recalibrate,
    logit_scale,
    make_query,
    project_candidates,
)
from pathseek.dynamics import ModelConfig, ModelParams

from conftest import TINY_MODEL


def np_softmax(x):
    z = np.exp(x - x.max())
    return z / z.sum()


def small_params(seed=13, heads=2, head_dim=3, d_input=4, n_action=3):
    cfg = ModelConfig(**{**TINY_MODEL, "heads": heads, "head_dim": head_dim, "d_input": d_input, "n_synch_action": n_action, "seed": seed})
    return ModelParams(cfg)


def brute_force_scores(p, q, feats):
    W_k, b_k = p.attn_key.weight.detach().numpy(), p.attn_key.bias.detach().numpy()
    H, hd = p.config.heads, p.config.head_dim
    rows = []
    for h in range(H):
        logits = []
        for f in feats:
            k = W_k @ f + b_k
            logits.append(sum(q[h * hd + d] * k[h * hd + d] for d in range(hd)) / math.sqrt(hd))
        rows.append(np_softmax(np.array(logits)))
    return np.array(rows)


class TestQuery:
    def test_zero_weights_give_bias(self):
        p = small_params()
        with torch.no_grad():
            p.w_query.weight.zero_()
        q = make_query(p, torch.randn(3, dtype=torch.float64))
        assert torch.equal(q, p.w_query.bias)

    def test_identity_weights(self):
        p = small_params(heads=1, head_dim=3)
        with torch.no_grad():
            p.w_query.weight.copy_(torch.eye(3))
            p.w_query.bias.zero_()
        s = torch.tensor([0.2, -1.0, 3.0], dtype=torch.float64)
        assert torch.equal(make_query(p, s), s)

    def test_triple_loop_oracle(self):
        p = small_params(seed=5, heads=2, head_dim=2)
        W, b = p.w_query.weight.detach().numpy(), p.w_query.bias.detach().numpy()
        s = np.random.default_rng(5).normal(size=3)
        want = [sum(W[i, j] * s[j] for j in range(3)) + b[i] for i in range(4)]
        np.testing.assert_allclose(make_query(p, torch.from_numpy(s)).detach().numpy(), want, rtol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            make_query(small_params(), torch.zeros(5, dtype=torch.float64))


class TestCrossAttention:
    def test_single_candidate(self):
        p = small_params()
        f = torch.randn(1, 4, dtype=torch.float64)
        res = cross_attention(p, torch.randn(6, dtype=torch.float64), f)
        assert torch.allclose(res.scores, torch.ones(1, dtype=torch.float64))
        v = p.attn_value(f[0])
        assert torch.allclose(res.context, p.attn_out(v), atol=1e-14)

    def test_identical_keys_split_evenly(self):
        p = small_params()
        f = torch.randn(1, 4, dtype=torch.float64).repeat(2, 1)
        res = cross_attention(p, torch.randn(6, dtype=torch.float64), f)
        np.testing.assert_allclose(res.scores.detach().numpy(), [0.5, 0.5], atol=1e-15)

    def test_brute_force_softmax(self):
        p = small_params(seed=13)
        rng = np.random.default_rng(13)
        feats, q = rng.normal(size=(5, 4)), rng.normal(size=6)
        res = cross_attention(p, torch.from_numpy(q), feats)
        per_head = brute_force_scores(p, q, feats)
        np.testing.assert_allclose(res.weights.detach().numpy(), per_head, atol=1e-9)
        np.testing.assert_allclose(res.scores.detach().numpy(), per_head.mean(0), atol=1e-9)

    def test_errors(self):
        p = small_params()
        q = torch.zeros(6, dtype=torch.float64)
        with pytest.raises(ValueError, match="non-empty"):
            cross_attention(p, q, np.zeros((0, 4)))
        bad = np.zeros((2, 4))
        bad[1, 2] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            cross_attention(p, q, bad)
        with pytest.raises(ValueError, match="dim"):
            cross_attention(p, q, np.zeros((2, 5)))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 12), seed=st.integers(0, 2**31))
    def test_simplex_and_permutation_equivariance(self, n, seed):
        p = small_params()
        rng = np.random.default_rng(seed)
        feats, q = rng.normal(size=(n, 4)) * 3, torch.from_numpy(rng.normal(size=6) * 3)
        res = cross_attention(p, q, feats)
        w = res.weights.detach().numpy()
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-9)
        assert abs(res.scores.sum().item() - 1) < 1e-9
        perm = rng.permutation(n)
        res2 = cross_attention(p, q, feats[perm])
        np.testing.assert_allclose(res2.scores.detach().numpy(), res.scores.detach().numpy()[perm], atol=1e-12)
        np.testing.assert_allclose(res2.context.detach().numpy(), res.context.detach().numpy(), atol=1e-12)

    def test_context_is_weighted_values(self):
        p = small_params()
        feats = np.random.default_rng(1).normal(size=(4, 4))
        res = cross_attention(p, torch.randn(6, dtype=torch.float64), feats)
        _, values = project_candidates(p, feats)
        mix = torch.einsum("hn,hnd->hd", res.weights, values).reshape(-1)
        assert torch.allclose(res.context, p.attn_out(mix), atol=1e-14)


class TestHeadAverage:
    def test_one_head_identity(self):
        w = torch.tensor([[0.2, 0.8]], dtype=torch.float64)
        assert torch.equal(head_average(w), w[0])

    def test_opposite_heads(self):
        w = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert head_average(w).tolist() == [0.5, 0.5]

    def test_column_mean(self):
        w = np.random.default_rng(0).dirichlet(np.ones(7), size=4)
        want = [sum(w[h, j] for h in range(4)) / 4 for j in range(7)]
        np.testing.assert_allclose(head_average(torch.from_numpy(w)).numpy(), want, atol=1e-15)


class TestJointRecalibrate:
    def test_single(self):
        p = small_params()
        out = joint_recalibrate(p, torch.randn(6, dtype=torch.float64), np.ones((1, 4)))
        assert out.tolist() == [1.0]

    def test_equal_logits_uniform(self):
        p = small_params()
        out = joint_recalibrate(p, torch.zeros(6, dtype=torch.float64), np.random.default_rng(0).normal(size=(4, 4)))
        np.testing.assert_allclose(out.detach().numpy(), 0.25, atol=1e-15)

    def test_subset_renormalises(self):
        p = small_params(heads=1, head_dim=6)
        rng = np.random.default_rng(3)
        feats, q = rng.normal(size=(6, 4)), rng.normal(size=6)
        keys, _ = project_candidates(p, feats)
        logits = (keys[0].detach().numpy() @ q) / math.sqrt(6)
        subset = [1, 3, 4]
        out = joint_recalibrate(p, torch.from_numpy(q), feats[subset])
        np.testing.assert_allclose(out.detach().numpy(), np_softmax(logits[subset]), atol=1e-12)
        full = np_softmax(logits)
        np.testing.assert_allclose(out.detach().numpy(), full[subset] / full[subset].sum(), atol=1e-12)

    def test_literal_temperature_applied_once(self):
        p = small_params(heads=1, head_dim=6)
        rng = np.random.default_rng(4)
        feats, q = rng.normal(size=(5, 4)), rng.normal(size=6)
        keys, _ = project_candidates(p, feats)
        raw = keys[0].detach().numpy() @ q
        for literal, denom in [(False, 6), (True, p.config.d_model)]:
            assert logit_scale(p, literal) == pytest.approx(1 / math.sqrt(denom))
            out = joint_recalibrate(p, torch.from_numpy(q), feats, literal=literal)
            np.testing.assert_allclose(out.detach().numpy(), np_softmax(raw / math.sqrt(denom)), atol=1e-12)

    def test_empty_subset(self):
        with pytest.raises(ValueError):
            joint_recalibrate(small_params(), torch.zeros(6, dtype=torch.float64), np.zeros((0, 4)))


class TestTrace:
    def test_append(self):
        t = AttentionTrace()
        t.append(1, 0, np.array([3, 1]), torch.tensor([0.4, 0.6]))
        assert len(t) == 1
        assert t.entries[0] == (1, 0, [3, 1], [pytest.approx(0.4), pytest.approx(0.6)])
