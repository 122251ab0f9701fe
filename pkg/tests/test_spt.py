"""Spatial transformer: proprio injection, attention invariances, staging."""

import numpy as np
import pytest

from mvpolicy import nn
from mvpolicy.rope import PositionGrid
from mvpolicy.spt import (SptConfig, attention_block, init_attention_stack,
                          init_proprio, init_spt, inject_proprio, spt_forward)
from mvpolicy.tensor import ShapeError, Tensor, grad_check

CFG = SptConfig(dim=12, heads=2, view_layers=1, scene_layers=1, ffn_mult=2)


def spt_params(cfg=CFG, seed=0, proprio_dim=5, randomize=True):
    params = {}
    rng = np.random.default_rng(seed)
    init_spt(params, "spt", cfg, proprio_dim, rng, proprio_hidden=8)
    if randomize:
        for k, p in params.items():
            if k.endswith(".w") and p.data.max() == p.data.min() == 0.0:
                p.data[:] = (rng.standard_normal(p.shape) * 0.3).astype(np.float32)
    return params


def grid(coords):
    return PositionGrid.all_valid(np.asarray(coords, dtype=np.float64))


class TestProprioInjection:
    def test_zero_init_is_identity(self):
        params = {}
        init_proprio(params, "spt", 5, 8, 12, np.random.default_rng(0))
        tokens = Tensor(np.random.default_rng(1).normal(size=(2, 3, 12))
                        .astype(np.float32))
        p = Tensor(np.random.default_rng(2).normal(size=(2, 5)).astype(np.float32))
        out = inject_proprio(tokens, p, params, "spt")
        np.testing.assert_array_equal(out.data, tokens.data)

    def test_same_increment_for_all_tokens(self):
        params = spt_params()
        tokens = Tensor(np.zeros((1, 4, 12), dtype=np.float32))
        p = Tensor(np.ones((1, 5), dtype=np.float32))
        out = inject_proprio(tokens, p, params, "spt")
        np.testing.assert_array_equal(out.data[0, 0], out.data[0, 3])

    def test_gradient_to_proprio(self):
        base = {}
        rng = np.random.default_rng(3)
        init_proprio(base, "spt", 5, 8, 12, rng)
        base["spt.proprio.fc2.w"].data[:] = rng.standard_normal(
            base["spt.proprio.fc2.w"].shape).astype(np.float32) * 0.3
        params64 = nn.cast_params(base, np.float64)
        tokens = rng.normal(size=(1, 4, 12))

        def f(p):
            out = inject_proprio(Tensor(tokens, dtype=np.float64), p, params64, "spt")
            return (out * out).sum()

        rep = grad_check(f, [Tensor(rng.normal(size=(1, 5)))], tol=1e-6)
        assert rep.passed, rep.max_rel_err


class TestAttentionBlock:
    def test_zero_init_residual_identity(self):
        # freshly initialized block: zero output projection and zero FFN
        # second layer leave the tokens unchanged
        params = spt_params(randomize=False)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 1, 12))
                   .astype(np.float32))
        out = attention_block(x, params, "spt.view0", CFG)
        np.testing.assert_array_equal(out.data, x.data)

    def test_attention_rows_sum_to_one(self):
        params = spt_params(seed=5)
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 7, 12)).astype(np.float32))
        pos = grid(rng.normal(size=(2, 7, 3)))
        from mvpolicy.rope import axial_sincos
        cos, sin = axial_sincos(pos, CFG.bank(), dtype=np.float32)
        _, attn = attention_block(x, params, "spt.view0", CFG, cos, sin,
                                  return_weights=True)
        sums = attn.data.sum(axis=-1)
        np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)

    def test_logits_invariant_under_global_translation(self):
        params = spt_params(seed=7)
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(100):
            x = Tensor(rng.normal(size=(1, 5, 12)).astype(np.float64))
            coords = rng.normal(size=(1, 5, 3))
            delta = rng.normal(size=3)
            params64 = nn.cast_params(params, np.float64)
            from mvpolicy.rope import axial_sincos
            c1, s1 = axial_sincos(grid(coords), CFG.bank(), dtype=np.float64)
            c2, s2 = axial_sincos(grid(coords + delta), CFG.bank(), dtype=np.float64)
            _, a1 = attention_block(x, params64, "spt.view0", CFG, c1, s1,
                                    return_weights=True)
            _, a2 = attention_block(x, params64, "spt.view0", CFG, c2, s2,
                                    return_weights=True)
            worst = max(worst, np.abs(a1.data - a2.data).max())
        assert worst < 1e-5

    def test_logits_change_under_independent_shifts(self):
        params = spt_params(seed=9)
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(1, 5, 12)).astype(np.float64))
        coords = rng.normal(size=(1, 5, 3))
        shifts = rng.normal(size=(1, 5, 3))  # different per token
        params64 = nn.cast_params(params, np.float64)
        from mvpolicy.rope import axial_sincos
        c1, s1 = axial_sincos(grid(coords), CFG.bank(), dtype=np.float64)
        c2, s2 = axial_sincos(grid(coords + shifts), CFG.bank(), dtype=np.float64)
        _, a1 = attention_block(x, params64, "spt.view0", CFG, c1, s1,
                                return_weights=True)
        _, a2 = attention_block(x, params64, "spt.view0", CFG, c2, s2,
                                return_weights=True)
        assert np.abs(a1.data - a2.data).max() > 1e-4


class TestSptForward:
    def views_case(self, cfg=CFG, b=1, v=2, n=4, seed=11):
        rng = np.random.default_rng(seed)
        tokens = rng.normal(size=(b, v, n, cfg.dim)).astype(np.float32)
        text = rng.normal(size=(b, 2, cfg.dim)).astype(np.float32)
        coords = rng.normal(size=(b, v, n, 3))
        return tokens, text, coords

    def test_single_view_no_text_collapses_to_plain_stack(self):
        params = spt_params(seed=12)
        tokens, _, coords = self.views_case(v=1)
        out = spt_forward(Tensor(tokens), None, grid(coords),
                          Tensor(np.zeros((1, 5), dtype=np.float32)),
                          params, "spt", CFG)
        assert out.shape == (1, 4, 12)

    def test_view_permutation_equivariance(self):
        params = spt_params(seed=13)
        tokens, text, coords = self.views_case(v=3)
        p = Tensor(np.ones((1, 5), dtype=np.float32))
        out = spt_forward(Tensor(tokens), Tensor(text), grid(coords), p,
                          params, "spt", CFG).data
        perm = [2, 0, 1]
        out_p = spt_forward(Tensor(tokens[:, perm]), Tensor(text),
                            grid(coords[:, perm]), p, params, "spt", CFG).data
        n = 4
        spatial = out[:, :3 * n].reshape(1, 3, n, CFG.dim)
        spatial_p = out_p[:, :3 * n].reshape(1, 3, n, CFG.dim)
        np.testing.assert_allclose(spatial_p, spatial[:, perm], atol=1e-5)
        np.testing.assert_allclose(out_p[:, 3 * n:], out[:, 3 * n:], atol=1e-5)

    def test_view_stage_isolation(self):
        """Stage-one outputs of view b are bit-identical when view a changes."""
        cfg = SptConfig(dim=12, heads=2, view_layers=2, scene_layers=0, ffn_mult=2)
        params = spt_params(cfg=cfg, seed=14)
        tokens, _, coords = self.views_case(cfg=cfg, v=2)
        p = Tensor(np.zeros((1, 5), dtype=np.float32))
        out1 = spt_forward(Tensor(tokens), None, grid(coords), p, params,
                           "spt", cfg).data
        perturbed = tokens.copy()
        perturbed[:, 0] += 1.0
        out2 = spt_forward(Tensor(perturbed), None, grid(coords), p, params,
                           "spt", cfg).data
        n = 4
        assert np.array_equal(out1[:, n:2 * n], out2[:, n:2 * n])
        assert not np.array_equal(out1[:, :n], out2[:, :n])

    def test_learned_absolute_mode(self):
        cfg = SptConfig(dim=12, heads=2, view_layers=1, scene_layers=1,
                        ffn_mult=2, use_rope=False, abs_tokens=8)
        params = spt_params(cfg=cfg, seed=15)
        tokens, text, coords = self.views_case(cfg=cfg, v=2, n=4)
        out = spt_forward(Tensor(tokens), Tensor(text), grid(coords),
                          Tensor(np.zeros((1, 5), dtype=np.float32)),
                          params, "spt", cfg)
        assert out.shape == (1, 10, 12)
        assert "spt.abs_embed" in params

    def test_rope_on_features_mode(self):
        cfg = SptConfig(dim=12, heads=2, view_layers=1, scene_layers=1,
                        ffn_mult=2, rope_mode="features")
        params = spt_params(cfg=cfg, seed=16)
        tokens, text, coords = self.views_case(cfg=cfg, v=2, n=4)
        out = spt_forward(Tensor(tokens), Tensor(text), grid(coords),
                          Tensor(np.zeros((1, 5), dtype=np.float32)),
                          params, "spt", cfg)
        assert out.shape == (1, 10, 12)

    def test_end_to_end_gradient(self):
        cfg = SptConfig(dim=6, heads=1, view_layers=1, scene_layers=1, ffn_mult=2)
        params = nn.cast_params(spt_params(cfg=cfg, seed=17), np.float64)
        rng = np.random.default_rng(18)
        tokens = rng.normal(size=(1, 2, 4, 6))
        text = rng.normal(size=(1, 2, 6))
        coords = rng.normal(size=(1, 2, 4, 3))
        pg = grid(coords)

        def f(t, tx, p):
            out = spt_forward(t, tx, pg, p, params, "spt", cfg)
            return (out * out).sum()

        rep = grad_check(f, [Tensor(tokens), Tensor(text),
                             Tensor(rng.normal(size=(1, 5)))], tol=1e-4)
        assert rep.passed, rep.max_rel_err

    def test_dim_constraints(self):
        with pytest.raises(ShapeError):
            SptConfig(dim=10, heads=2)   # not divisible by 6
        with pytest.raises(ShapeError):
            SptConfig(dim=18, heads=4)   # heads do not divide dim
        with pytest.raises(ShapeError):
            SptConfig(dim=18, heads=2)   # odd head dim breaks rotation pairs
