"""Compiled kernels agree with their numpy reference implementations."""

import numpy as np
import pytest

from mvpolicy import _kernels as K

needs_native = pytest.mark.skipif(K.backend_name() != "native",
                                  reason="compiled extension not built")


class TestDispatch:
    def test_backend_reported(self):
        assert K.backend_name() in ("native", "numpy")

    def test_f64_always_uses_numpy_path(self):
        # float64 is the verification dtype; it must bypass the f32 kernels
        x = np.random.default_rng(0).normal(size=(4, 5))
        out = K.softmax_rows(x)
        np.testing.assert_allclose(out, K.np_softmax_rows(x), rtol=1e-15)


@needs_native
class TestNativeEquivalence:
    def test_gelu(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=10_000).astype(np.float32) * 3
        np.testing.assert_allclose(K.native_gelu_fwd(x), K.np_gelu_fwd(x),
                                   rtol=2e-6, atol=2e-6)

    def test_softmax_rows(self):
        rng = np.random.default_rng(2)
        x = (rng.normal(size=(64, 57)) * 5).astype(np.float32)
        a = K.softmax_rows(x)
        b = K.np_softmax_rows(x)
        np.testing.assert_allclose(a, b, rtol=3e-5, atol=1e-7)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)

    def test_softmax_rows_bwd(self):
        rng = np.random.default_rng(3)
        p = K.np_softmax_rows(rng.normal(size=(16, 9)).astype(np.float32))
        g = rng.normal(size=(16, 9)).astype(np.float32)
        np.testing.assert_allclose(K.softmax_rows_bwd(p, g),
                                   K.np_softmax_rows_bwd(p, g),
                                   rtol=3e-5, atol=1e-6)

    def test_convex_fwd_and_bwd(self):
        rng = np.random.default_rng(4)
        patch = rng.normal(size=(2, 5, 4, 9)).astype(np.float32)
        wl = rng.normal(size=(2, 5, 4, 9, 9)).astype(np.float32)
        out_n, ws_n = K.convex_fwd(patch, wl)
        out_r, ws_r = K.np_convex_fwd(patch, wl)
        np.testing.assert_allclose(out_n, out_r, rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(ws_n, ws_r, rtol=1e-4, atol=1e-6)
        g = rng.normal(size=out_n.shape).astype(np.float32)
        dp_n, dw_n = K.convex_bwd(g, ws_n, patch, True, True)
        dp_r, dw_r = K.np_convex_bwd(g, ws_r, patch, True, True)
        np.testing.assert_allclose(dp_n, dp_r, rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(dw_n, dw_r, rtol=1e-4, atol=1e-5)

    def test_adam_step(self):
        rng = np.random.default_rng(5)
        shapes = dict(p=rng.normal(size=301).astype(np.float32),
                      g=rng.normal(size=301).astype(np.float32),
                      m=rng.normal(size=301).astype(np.float32) * 0.1,
                      v=(rng.normal(size=301).astype(np.float32) * 0.1) ** 2)
        a = {k: v.copy() for k, v in shapes.items()}
        b = {k: v.copy() for k, v in shapes.items()}
        args = (1e-3, 0.9, 0.999, 1e-8, 0.271, 0.0109)
        K.adam_step(a["p"], a["g"], a["m"], a["v"], *args)
        K.np_adam_step(b["p"], b["g"], b["m"], b["v"], *args)
        for k in ("p", "m", "v"):
            np.testing.assert_allclose(a[k], b[k], rtol=2e-5, atol=1e-7)

    def test_forced_numpy_fallback(self, monkeypatch):
        # non-contiguous inputs silently fall back to numpy
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 10)).astype(np.float32)[:, ::2]
        assert not x.flags.c_contiguous
        np.testing.assert_allclose(K.softmax_rows(x), K.np_softmax_rows(x),
                                   rtol=1e-6)


class TestEndToEndBackendConsistency:
    def test_policy_forward_close_across_backends(self, tmp_path):
        """One forward pass agrees between numpy and native within f32 noise."""
        import subprocess, sys, os, textwrap
        script = textwrap.dedent("""
            import numpy as np
            from mvpolicy import _kernels
            from mvpolicy.model import ModelConfig, init_policy, policy_forward
            from mvpolicy.rope import PositionGrid
            cfg = ModelConfig(views=2, image_hw=(32, 32), vocab_size=14,
                              text_dim=12, sem_channels=(8, 12), dep_channels=(8, 12),
                              fusion_strides=(4,), heads=2, view_layers=1,
                              scene_layers=1, ffn_mult=2, bins_per_axis=8,
                              use_sgm=False)
            params = init_policy(cfg, seed=3)
            rng = np.random.default_rng(0)
            rgb = rng.uniform(size=(1, 2, 3, 32, 32)).astype(np.float32)
            depth = rng.uniform(0.5, 1.5, size=(1, 2, 32, 32)).astype(np.float32)
            ids = np.array([[1, 2, 3, 4]])
            prop = rng.normal(size=(1, 5)).astype(np.float32)
            n = cfg.tokens_per_view
            pos = PositionGrid.all_valid(rng.normal(size=(1, 2, n, 3)))
            out = policy_forward(params, None, cfg, rgb, depth, ids, prop, pos)
            print(_kernels.backend_name())
            np.save("OUT", out.heat_logits.data)
        """)
        outs = {}
        for forced, env_val in (("native", None), ("numpy", "1")):
            env = dict(os.environ)
            if env_val:
                env["MVPOLICY_NO_NATIVE"] = env_val
            p = tmp_path / forced
            p.mkdir()
            r = subprocess.run([sys.executable, "-c",
                                script.replace("OUT", str(p / "out.npy"))],
                               env=env, capture_output=True, text=True)
            assert r.returncode == 0, r.stderr
            outs[forced] = (r.stdout.strip(), np.load(p / "out.npy"))
        if outs["native"][0] != "native":
            pytest.skip("extension not built")
        assert outs["numpy"][0] == "numpy"
        np.testing.assert_allclose(outs["native"][1], outs["numpy"][1],
                                   rtol=2e-4, atol=2e-5)
