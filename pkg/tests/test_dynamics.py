import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from pathseek.dynamics import (
    ModelConfig,
    ModelParams,
    decayed_sync,
    init_state,
    load_checkpoint,
    neuron_update,
    push_history,
    sample_pairs,
    save_checkpoint,
    synapse_step,
    sync_update,
)

from conftest import TINY_MODEL, zero_module


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * w + b


def np_of(t):
    return t.detach().numpy()


class TestConfig:
    def test_rejects_too_many_pairs(self):
        with pytest.raises(ValueError, match="n_synch_out"):
            ModelConfig(d_model=4, n_synch_out=7).validate()

    @pytest.mark.parametrize("field", ["d_model", "heads", "memory_length"])
    def test_rejects_zero(self, field):
        with pytest.raises(ValueError, match=field):
            ModelConfig(**{field: 0}).validate()

    def test_dropout_range(self):
        with pytest.raises(ValueError, match="dropout"):
            ModelConfig(dropout=1.0).validate()

    @settings(max_examples=40, deadline=None)
    @given(d=st.integers(2, 40), seed=st.integers(0, 2**31), frac=st.floats(0.01, 1.0))
    def test_pairs_distinct_and_off_diagonal(self, d, seed, frac):
        total = d * (d - 1) // 2
        n = max(1, int(frac * total))
        pairs = sample_pairs(d, n, np.random.default_rng(seed))
        assert pairs.shape == (n, 2)
        assert np.all(pairs[:, 0] < pairs[:, 1])
        assert pairs.min() >= 0 and pairs.max() < d
        assert len({tuple(p) for p in pairs}) == n

    def test_decays_non_negative(self, tiny_params):
        with torch.no_grad():
            tiny_params.decay_out_raw.fill_(-30.0)
        assert (tiny_params.decay_out >= 0).all()

    def test_same_seed_same_weights(self, tiny_config):
        a, b = ModelParams(tiny_config), ModelParams(tiny_config)
        for (n, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, y), n


class TestInitState:
    def test_two_calls_identical(self, tiny_params):
        a, b = init_state(tiny_params), init_state(tiny_params)
        for k, v in a.snapshot().items():
            w = b.snapshot()[k]
            assert torch.equal(v, w) if isinstance(v, torch.Tensor) else v == w

    def test_reflects_start_e(self, tiny_params):
        with torch.no_grad():
            tiny_params.start_e.fill_(0.25)
        assert torch.all(init_state(tiny_params).e == 0.25)

    def test_history_zero_and_tick_zero(self, tiny_params):
        s = init_state(tiny_params)
        assert s.history.shape == (8, 3)
        assert torch.all(s.history == 0)
        assert s.tick == 0
        assert torch.all(s.alpha_out == 0) and torch.all(s.beta_out == 0)


class TestSynapse:
    def test_zero_weights_give_zero(self, tiny_params):
        zero_module(tiny_params.synapse)
        h = synapse_step(tiny_params, torch.randn(8, dtype=torch.float64), torch.randn(4, dtype=torch.float64))
        assert torch.all(h == 0)

    def test_identity_slice(self):
        p = ModelParams(ModelConfig(**{**TINY_MODEL, "synapse_depth": 1}))
        with torch.no_grad():
            w = torch.zeros(8, 12, dtype=torch.float64)
            w[:, :8] = torch.eye(8)
            p.synapse[0].weight.copy_(w)
            p.synapse[0].bias.zero_()
        e = torch.linspace(-1, 1, 8, dtype=torch.float64)
        assert torch.equal(synapse_step(p, e, torch.ones(4, dtype=torch.float64)), e)

    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    def test_matches_straight_line_oracle(self, depth):
        cfg = ModelConfig(d_model=4, d_input=3, n_synch_out=3, n_synch_action=3, heads=1, head_dim=2, synapse_depth=depth, seed=11)
        p = ModelParams(cfg)
        e = np.random.default_rng(0).normal(size=4)
        b = np.random.default_rng(1).normal(size=3)
        W = [(np_of(l.weight), np_of(l.bias)) for l in p.synapse]
        N = [(np_of(n.weight), np_of(n.bias)) for n in p.synapse_norms]

        x = np.concatenate([e, b])
        if depth == 1:
            want = W[0][0] @ x + W[0][1]
        else:
            x = gelu(layer_norm(W[0][0] @ x + W[0][1], *N[0]))
            i = 1
            while i < depth - 1:
                y = x
                for j in range(i, min(i + 2, depth - 1)):
                    y = gelu(layer_norm(W[j][0] @ y + W[j][1], *N[j]))
                x = x + y
                i += 2
            want = W[-1][0] @ x + W[-1][1]
        got = np_of(synapse_step(p, torch.from_numpy(e), torch.from_numpy(b)))
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_rejects_bad_input(self, tiny_params):
        with pytest.raises(ValueError, match="shape"):
            synapse_step(tiny_params, torch.zeros(7, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        bad = torch.zeros(4, dtype=torch.float64)
        bad[1] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            synapse_step(tiny_params, torch.zeros(8, dtype=torch.float64), bad)

    def test_dropout_only_with_generator(self):
        p = ModelParams(ModelConfig(**{**TINY_MODEL, "dropout": 0.5}))
        e, b = torch.ones(8, dtype=torch.float64), torch.ones(4, dtype=torch.float64)
        assert torch.equal(synapse_step(p, e, b), synapse_step(p, e, b))
        g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
        assert torch.equal(synapse_step(p, e, b, g1), synapse_step(p, e, b, g2))
        assert not torch.equal(synapse_step(p, e, b, torch.Generator().manual_seed(3)), synapse_step(p, e, b))


class TestHistory:
    def test_single_push(self, tiny_params):
        s = init_state(tiny_params)
        v = torch.arange(8, dtype=torch.float64)
        push_history(s, v)
        assert torch.all(s.history[:, :2] == 0)
        assert torch.equal(s.history[:, 2], v)

    def test_overflow_drops_oldest(self, tiny_params):
        s = init_state(tiny_params)
        vs = [torch.full((8,), float(k), dtype=torch.float64) for k in range(1, 5)]
        for v in vs:
            push_history(s, v)
        assert torch.equal(s.history, torch.stack(vs[1:], 1))

    def test_sliding_window_oracle(self):
        p = ModelParams(ModelConfig(**{**TINY_MODEL, "memory_length": 7}))
        s = init_state(p)
        seq = np.random.default_rng(4).normal(size=(50, 8))
        for k, v in enumerate(seq):
            push_history(s, torch.from_numpy(v))
            window = seq[max(0, k - 6):k + 1].T
            expect = np.zeros((8, 7))
            expect[:, 7 - window.shape[1]:] = window
            np.testing.assert_array_equal(np_of(s.history), expect)

    def test_dimension_mismatch(self, tiny_params):
        with pytest.raises(ValueError):
            push_history(init_state(tiny_params), torch.zeros(3, dtype=torch.float64))


class TestNeuronUpdate:
    def test_zero_weights_give_bias(self, tiny_params):
        with torch.no_grad():
            tiny_params.nlm_w1.zero_()
            tiny_params.nlm_w2.zero_()
            tiny_params.nlm_b2.copy_(torch.arange(8, dtype=torch.float64))
        s = init_state(tiny_params)
        push_history(s, torch.randn(8, dtype=torch.float64))
        assert torch.equal(neuron_update(tiny_params, s), torch.arange(8, dtype=torch.float64))

    def test_hand_computation(self):
        cfg = ModelConfig(d_model=2, d_input=2, memory_length=2, memory_hidden=2, n_synch_out=1, n_synch_action=1, heads=1, head_dim=1)
        p = ModelParams(cfg)
        w1 = np.array([[[0.5, -1.0], [2.0, 0.25]], [[1.0, 1.0], [-0.5, 0.75]]])
        b1 = np.array([[0.1, -0.2], [0.0, 0.3]])
        w2 = np.array([[1.5, -2.0], [0.5, 0.25]])
        b2 = np.array([0.05, -0.1])
        with torch.no_grad():
            for t, v in [(p.nlm_w1, w1), (p.nlm_b1, b1), (p.nlm_w2, w2), (p.nlm_b2, b2)]:
                t.copy_(torch.from_numpy(v))
        s = init_state(p)
        push_history(s, torch.tensor([0.3, -0.7], dtype=torch.float64))
        push_history(s, torch.tensor([1.1, 0.4], dtype=torch.float64))
        hist = np_of(s.history)
        want = []
        for d in range(2):
            hidden = [gelu(sum(hist[d, m] * w1[d, m, k] for m in range(2)) + b1[d, k]) for k in range(2)]
            want.append(sum(hidden[k] * w2[d, k] for k in range(2)) + b2[d])
        np.testing.assert_allclose(np_of(neuron_update(p, s)), want, rtol=1e-13)

    def test_permutation_symmetry(self, tiny_params):
        s = init_state(tiny_params)
        for _ in range(3):
            push_history(s, torch.randn(8, dtype=torch.float64))
        base = neuron_update(tiny_params, s)
        perm = torch.randperm(8, generator=torch.Generator().manual_seed(2))
        with torch.no_grad():
            for t in (tiny_params.nlm_w1, tiny_params.nlm_b1, tiny_params.nlm_w2, tiny_params.nlm_b2):
                t.copy_(t[perm])
        s.history = s.history[perm]
        assert torch.allclose(neuron_update(tiny_params, s), base[perm], rtol=0, atol=1e-15)


def direct_sync(prods, r):
    t = len(prods)
    w = np.exp(-np.outer(t - 1 - np.arange(t), r))
    return (w * prods).sum(0) / np.sqrt(w.sum(0))


class TestSync:
    def test_closed_form_zero_decay(self):
        a = b = torch.zeros(1, dtype=torch.float64)
        k = 0.37
        for t in range(1, 26):
            a, b, s = decayed_sync(a, b, torch.tensor([k], dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
            assert float(s) == pytest.approx(k * math.sqrt(t), rel=1e-12)

    def test_first_tick_is_product(self, tiny_params):
        s = init_state(tiny_params)
        e = torch.randn(8, dtype=torch.float64)
        rep = sync_update(tiny_params, s, e)
        pairs = tiny_params.pairs_out
        assert torch.allclose(rep.s_out, e[pairs[:, 0]] * e[pairs[:, 1]], rtol=0, atol=1e-15)
        assert torch.all(s.beta_out > 0)
        assert torch.equal(s.s_action, rep.s_action)

    def test_matches_direct_sum_over_50_ticks(self, tiny_params):
        with torch.no_grad():
            tiny_params.decay_out_raw.copy_(torch.linspace(-2, 2, 4, dtype=torch.float64))
        s = init_state(tiny_params)
        es = np.random.default_rng(9).normal(size=(50, 8))
        pairs = tiny_params.pairs_out.numpy()
        r = np_of(tiny_params.decay_out)
        for t in range(50):
            rep = sync_update(tiny_params, s, torch.from_numpy(es[t]))
            prods = es[:t + 1, pairs[:, 0]] * es[:t + 1, pairs[:, 1]]
            np.testing.assert_allclose(np_of(rep.s_out), direct_sync(prods, r), rtol=1e-9, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(r=st.floats(0.0, 5.0), ticks=st.integers(1, 100), seed=st.integers(0, 2**31))
    def test_recurrence_equals_direct_sum(self, r, ticks, seed):
        prods = np.random.default_rng(seed).normal(size=(ticks, 3))
        a = b = torch.zeros(3, dtype=torch.float64)
        decay = torch.full((3,), r, dtype=torch.float64)
        for t in range(ticks):
            a, b, s = decayed_sync(a, b, torch.from_numpy(prods[t]), decay)
        np.testing.assert_allclose(np_of(s), direct_sync(prods, np.full(3, r)), rtol=1e-9, atol=1e-9)


class TestDeterminismAndCheckpoint:
    def run(self, params, inputs):
        s = init_state(params)
        out = []
        for b in inputs:
            h = synapse_step(params, s.e, b)
            push_history(s, h)
            s.e = neuron_update(params, s)
            out.append(sync_update(params, s, s.e).s_out)
        return torch.stack(out)

    def test_bit_identical_trajectories(self, tiny_config):
        inputs = [torch.randn(4, dtype=torch.float64, generator=torch.Generator().manual_seed(k)) for k in range(6)]
        a = self.run(ModelParams(tiny_config), inputs)
        b = self.run(ModelParams(tiny_config), inputs)
        assert torch.equal(a, b)
        assert torch.isfinite(a).all()

    def test_checkpoint_round_trip(self, tiny_params, tmp_path):
        with torch.no_grad():
            tiny_params.decay_out_raw.normal_(generator=torch.Generator().manual_seed(0))
        path = tmp_path / "m.pspm"
        save_checkpoint(tiny_params, path)
        assert path.read_bytes()[:4] == b"PSPM"
        back = load_checkpoint(path)
        assert back.config == tiny_params.config
        for k, v in tiny_params.state_dict().items():
            assert torch.equal(back.state_dict()[k], v), k

    def test_checkpoint_errors(self, tiny_params, tmp_path):
        path = tmp_path / "m.pspm"
        save_checkpoint(tiny_params, path)
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
        path.write_bytes(raw[:40])
        with pytest.raises(ValueError):
            load_checkpoint(path)
