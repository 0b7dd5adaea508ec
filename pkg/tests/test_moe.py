"""Gate / expert mixture tests: simplex weights, top-k, conditional
computation, expert kinds, gradient isolation."""

import numpy as np
import pytest

from camenn import autograd as ag
from camenn.autograd import Tensor, backward
from camenn.encoder import EncoderConfig, encoder_forward, init_encoder_params
from camenn.errors import ConfigError
from camenn.gradcheck import check_gradients
from camenn.moe import (MoeConfig, expert_forward, gate_forward, init_expert_params,
                        init_gate_params, init_tower_params, moe_forward,
                        tower_forward)

D = 8


@pytest.fixture
def enc():
    return EncoderConfig(d_model=D, num_heads=2)


def build_params(moe_cfg, enc, seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    params.update(init_gate_params(D, moe_cfg.num_experts, rng))
    params.update(init_expert_params(moe_cfg, enc, rng))
    params.update(init_tower_params(enc, rng))
    params.update(init_encoder_params(enc, rng, "encoder.shared"))
    return params


def rand_rows(L=4, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((L, D)))


class TestConfig:
    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            MoeConfig(expert_kind="lstm")

    def test_bad_top_k(self):
        with pytest.raises(ConfigError):
            MoeConfig(num_experts=2, top_k=3)


class TestGate:
    def test_zero_projection_gives_uniform(self, enc):
        moe_cfg = MoeConfig(num_experts=4, top_k=4)
        params = build_params(moe_cfg, enc)
        params["gate.cvr.wg"] = Tensor(np.zeros((D, 4)), requires_grad=True)
        g = gate_forward("cvr", rand_rows(), params, moe_cfg)
        np.testing.assert_allclose(g.data, [0.25] * 4)

    def test_top_k_renormalization_arithmetic(self, enc):
        # force pre-top-k weights [0.4, 0.3, 0.2, 0.1] via direct logits
        moe_cfg = MoeConfig(num_experts=4, top_k=2)
        params = build_params(moe_cfg, enc)
        target = np.array([0.4, 0.3, 0.2, 0.1])
        # one-row input of ones makes pooled = ones; wg row sums = logits
        params["gate.ita.wg"] = Tensor(
            np.tile(np.log(target) / D, (D, 1)), requires_grad=True)
        g = gate_forward("ita", Tensor(np.ones((1, D))), params, moe_cfg)
        np.testing.assert_allclose(g.data, [4 / 7, 3 / 7, 0.0, 0.0], atol=1e-12)

    def test_top_k_equals_m_is_dense(self, enc):
        for seed in range(10):
            dense_cfg = MoeConfig(num_experts=4, top_k=4)
            params = build_params(dense_cfg, enc, seed)
            x = rand_rows(seed=seed + 100)
            g_dense = gate_forward("tia", x, params, dense_cfg)
            np.testing.assert_allclose(g_dense.data.sum(), 1.0, atol=1e-12)
            # top_k == M never zeroes an entry
            assert np.all(g_dense.data > 0)

    def test_simplex_property_many_inputs(self, enc):
        moe_cfg = MoeConfig(num_experts=5, top_k=3)
        params = build_params(moe_cfg, enc)
        for seed in range(100):
            g = gate_forward("cvr", rand_rows(seed=seed), params, moe_cfg).data
            assert np.all(g >= 0)
            assert abs(g.sum() - 1.0) < 1e-9
            assert np.count_nonzero(g) == 3

    def test_tie_break_lower_index(self, enc):
        moe_cfg = MoeConfig(num_experts=4, top_k=1)
        params = build_params(moe_cfg, enc)
        params["gate.cvr.wg"] = Tensor(np.zeros((D, 4)), requires_grad=True)
        g = gate_forward("cvr", rand_rows(), params, moe_cfg)
        np.testing.assert_allclose(g.data, [1.0, 0.0, 0.0, 0.0])


class TestExperts:
    @pytest.mark.parametrize("kind", ["transformer", "mlp_relu", "recurrent"])
    def test_shape_contract(self, enc, kind):
        moe_cfg = MoeConfig(num_experts=1, top_k=1, expert_kind=kind)
        params = build_params(moe_cfg, enc)
        out = expert_forward(kind, rand_rows(5), params, enc, "expert.0")
        assert out.shape == (5, D)

    @pytest.mark.parametrize("kind", ["transformer", "mlp_relu", "recurrent"])
    def test_gradient_check(self, enc, kind):
        moe_cfg = MoeConfig(num_experts=1, top_k=1, expert_kind=kind)
        params = build_params(moe_cfg, enc, seed=3)
        expert_params = {n: p for n, p in params.items() if n.startswith("expert.0")}
        x = Tensor(np.random.default_rng(9).standard_normal((3, D)) + 0.1,
                   requires_grad=True)
        w = Tensor(np.random.default_rng(10).standard_normal((3, D)))
        targets = dict(expert_params)
        targets["x"] = x
        check_gradients(
            lambda: ag.tensor_sum(ag.mul(
                expert_forward(kind, x, params, enc, "expert.0"), w)),
            targets, max_entries=5)


class TestMoeForward:
    def test_single_expert_degenerate(self, enc):
        moe_cfg = MoeConfig(num_experts=1, top_k=1)
        params = build_params(moe_cfg, enc)
        e_input = rand_rows(4, 1)
        x = encoder_forward(e_input, params, enc, "encoder.shared")
        out = moe_forward("cvr", e_input, x, params, moe_cfg, enc)
        expected = expert_forward("transformer", x, params, enc, "expert.0")
        np.testing.assert_array_equal(out.data, expected.data)

    def test_zero_weight_expert_skipped(self, enc, monkeypatch):
        moe_cfg = MoeConfig(num_experts=2, top_k=1)
        params = build_params(moe_cfg, enc)
        calls = []
        import camenn.moe as moe_mod
        real = moe_mod.expert_forward

        def spy(kind, x, params, enc_cfg, prefix, mask=None):
            calls.append(prefix)
            return real(kind, x, params, enc_cfg, prefix, mask)

        monkeypatch.setattr(moe_mod, "expert_forward", spy)
        e_input = rand_rows(3, 2)
        x = encoder_forward(e_input, params, enc, "encoder.shared")
        moe_mod.moe_forward("ita", e_input, x, params, moe_cfg, enc)
        assert len(calls) == 1  # only the selected expert ran

    def test_dense_vs_skip_agree(self, enc):
        moe_cfg = MoeConfig(num_experts=4, top_k=2)
        params = build_params(moe_cfg, enc, seed=5)
        for seed in range(5):
            e_input = rand_rows(4, seed + 50)
            x = encoder_forward(e_input, params, enc, "encoder.shared")
            sparse = moe_forward("tia", e_input, x, params, moe_cfg, enc)
            dense = moe_forward("tia", e_input, x, params, moe_cfg, enc,
                                force_dense=True)
            scale = max(1.0, np.abs(dense.data).max())
            assert np.abs(sparse.data - dense.data).max() / scale < 1e-12

    def test_literal_mode_runs_and_differs(self, enc):
        conv = MoeConfig(num_experts=2, top_k=2, gating_mode="conventional")
        lit = MoeConfig(num_experts=2, top_k=2, gating_mode="literal")
        params = build_params(conv, enc, seed=6)
        e_input = rand_rows(3, 60)
        x = encoder_forward(e_input, params, enc, "encoder.shared")
        a = moe_forward("cvr", e_input, x, params, conv, enc)
        b = moe_forward("cvr", e_input, x, params, lit, enc)
        assert a.shape == b.shape == (3, D)
        assert not np.allclose(a.data, b.data)


class TestTower:
    def test_distinct_tasks_distinct_outputs(self, enc):
        moe_cfg = MoeConfig(num_experts=2, top_k=2)
        params = build_params(moe_cfg, enc, seed=7)
        xk = rand_rows(4, 70)
        out_ita = tower_forward("ita", xk, params, enc)
        out_cvr = tower_forward("cvr", xk, params, enc)
        assert out_ita.shape == out_cvr.shape
        assert not np.allclose(out_ita.data, out_cvr.data)

    def test_gradient_isolation_across_towers(self, enc):
        moe_cfg = MoeConfig(num_experts=2, top_k=2)
        params = build_params(moe_cfg, enc, seed=8)
        e_input = rand_rows(3, 80)
        x = encoder_forward(e_input, params, enc, "encoder.shared")
        xk = moe_forward("ita", e_input, x, params, moe_cfg, enc)
        loss = ag.tensor_sum(tower_forward("ita", xk, params, enc))
        backward(loss)
        for name, p in params.items():
            if name.startswith("tower.ita"):
                assert p.grad is not None, name
            if name.startswith(("tower.cvr", "tower.tia")):
                assert p.grad is None, name
