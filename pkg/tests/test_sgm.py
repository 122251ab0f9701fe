"""Gated fusion: endpoint identities, convexity, gradients, noise bound."""

import numpy as np
import pytest

from mvpolicy import nn
from mvpolicy.encoders import FeatureMap
from mvpolicy.sgm import fuse, gate, init_gates, sgm_forward
from mvpolicy.tensor import ShapeError, Tensor, grad_check


def fm(arr, stride=8):
    return FeatureMap(Tensor(np.asarray(arr, dtype=np.float32)), stride)


def gate_params(c, seed=0, zero=True):
    params = {}
    rng = np.random.default_rng(seed)
    init_gates(params, "sgm", [c], rng)
    if not zero:
        # randomize the output layer so gates vary
        params["sgm.gate0.fc2.w"].data[:] = rng.standard_normal(
            params["sgm.gate0.fc2.w"].shape).astype(np.float32) * 0.5
    return params


class TestGate:
    def test_zero_init_gate_is_half_everywhere(self):
        params = gate_params(c=6)
        rng = np.random.default_rng(1)
        e = fm(rng.normal(size=(2, 6, 4, 4)))
        r = fm(rng.normal(size=(2, 6, 4, 4)))
        g = gate(e, r, params, "sgm.gate0")
        np.testing.assert_array_equal(g.data.data, np.full((2, 6, 4, 4), 0.5,
                                                           dtype=np.float32))

    def test_open_interval(self):
        params = gate_params(c=4, zero=False)
        rng = np.random.default_rng(2)
        for _ in range(10):
            e = fm(rng.normal(size=(1, 4, 3, 3)) * 2)
            r = fm(rng.normal(size=(1, 4, 3, 3)) * 2)
            g = gate(e, r, params, "sgm.gate0").data.data
            assert np.all(g > 0.0) and np.all(g < 1.0)

    def test_shape_mismatch(self):
        params = gate_params(c=4)
        with pytest.raises(ShapeError):
            gate(fm(np.zeros((1, 4, 3, 3))), fm(np.zeros((1, 4, 2, 2))),
                 params, "sgm.gate0")

    def test_gradients_through_gate_and_fuse(self):
        c = 4
        params64 = nn.cast_params(gate_params(c, zero=False), np.float64)
        rng = np.random.default_rng(3)
        e = rng.normal(size=(1, c, 2, 2))
        r = rng.normal(size=(1, c, 2, 2))

        def f(ev, rv, w1, b1, w2, b2):
            local = {"sgm.gate0.fc1.w": w1, "sgm.gate0.fc1.b": b1,
                     "sgm.gate0.fc2.w": w2, "sgm.gate0.fc2.b": b2}
            g = gate(FeatureMap(ev, 8), FeatureMap(rv, 8), local, "sgm.gate0")
            out = fuse(FeatureMap(ev, 8), FeatureMap(rv, 8), g)
            return (out.data * out.data).sum()

        rep = grad_check(
            f, [Tensor(e), Tensor(r),
                params64["sgm.gate0.fc1.w"], params64["sgm.gate0.fc1.b"],
                params64["sgm.gate0.fc2.w"], params64["sgm.gate0.fc2.b"]],
            tol=1e-4)
        assert rep.passed, rep.max_rel_err


class TestFuse:
    def test_endpoints_exact(self):
        rng = np.random.default_rng(4)
        e = fm(rng.normal(size=(2, 3, 4, 4)))
        r = fm(rng.normal(size=(2, 3, 4, 4)))
        ones = fm(np.ones((2, 3, 4, 4)))
        zeros = fm(np.zeros((2, 3, 4, 4)))
        assert np.array_equal(fuse(e, r, ones).data.data, r.data.data)
        assert np.array_equal(fuse(e, r, zeros).data.data, e.data.data)

    def test_midpoint(self):
        e = fm(np.full((1, 1, 1, 1), 2.0))
        r = fm(np.full((1, 1, 1, 1), 4.0))
        g = fm(np.full((1, 1, 1, 1), 0.5))
        assert fuse(e, r, g).data.data[0, 0, 0, 0] == 3.0

    def test_convex_bound_100k_random_elements(self):
        rng = np.random.default_rng(5)
        n = 100_000
        e = rng.normal(size=n).astype(np.float32)
        r = rng.normal(size=n).astype(np.float32)
        g = rng.uniform(size=n).astype(np.float32)
        out = fuse(fm(e.reshape(1, 1, 1, -1)), fm(r.reshape(1, 1, 1, -1)),
                   fm(g.reshape(1, 1, 1, -1))).data.data.reshape(-1)
        lo = np.minimum(e, r)
        hi = np.maximum(e, r)
        violations = int((out < lo).sum() + (out > hi).sum())
        assert violations == 0

    def test_equal_streams_passthrough(self):
        rng = np.random.default_rng(6)
        v = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        g = fm(rng.uniform(size=(1, 2, 3, 3)).astype(np.float32))
        out = fuse(fm(v), fm(v), g).data.data
        np.testing.assert_allclose(out, v, rtol=1e-6, atol=1e-7)


class TestNoiseResponseBound:
    def test_fused_perturbation_bounded_by_gated_raw_perturbation(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            e = rng.normal(size=(1, 4, 5, 5)).astype(np.float32)
            r = rng.normal(size=(1, 4, 5, 5)).astype(np.float32)
            delta = rng.normal(size=(1, 4, 5, 5)).astype(np.float32) * 0.3
            g = rng.uniform(size=(1, 4, 5, 5)).astype(np.float32)
            base = fuse(fm(e), fm(r), fm(g)).data.data
            pert = fuse(fm(e), fm(r + delta), fm(g)).data.data
            lhs = np.linalg.norm(pert - base)
            rhs = np.linalg.norm(g * delta)
            assert lhs <= rhs * (1 + 1e-5)


class TestMultiScale:
    def test_single_scale_reduces_to_gate_fuse(self):
        c = 4
        params = gate_params(c, zero=False)
        rng = np.random.default_rng(8)
        e = fm(rng.normal(size=(1, c, 4, 4)), stride=8)
        r = fm(rng.normal(size=(1, c, 4, 4)), stride=8)
        merged, gates = sgm_forward([e], [r], params, "sgm", [8], token_stride=8)
        direct = fuse(e, r, gate(e, r, params, "sgm.gate0"))
        np.testing.assert_array_equal(merged.data.data, direct.data.data)
        assert len(gates) == 1

    def test_two_scale_coarse_upsampled_and_summed(self):
        c = 4
        params = {}
        rng = np.random.default_rng(9)
        init_gates(params, "sgm", [c, c], rng)
        e4 = fm(rng.normal(size=(1, c, 8, 8)), stride=4)
        r4 = fm(rng.normal(size=(1, c, 8, 8)), stride=4)
        e8 = fm(rng.normal(size=(1, c, 4, 4)), stride=8)
        r8 = fm(rng.normal(size=(1, c, 4, 4)), stride=8)
        merged, gates = sgm_forward([e4, e8], [r4, r8], params, "sgm",
                                    [4, 8], token_stride=8)
        assert merged.stride == 8 and merged.data.shape == (1, c, 4, 4)
        assert len(gates) == 2
        # zero-init gates -> both scales average their two streams
        up = np.repeat(np.repeat(0.5 * (e8.data.data + r8.data.data), 2, -2), 2, -1)
        fine = 0.5 * (e4.data.data + r4.data.data)
        summed = fine + up
        pooled = summed.reshape(1, c, 4, 2, 4, 2).mean(axis=(-3, -1))
        np.testing.assert_allclose(merged.data.data, pooled, rtol=1e-5)

    def test_full_sgm_gradient(self):
        c = 4
        base = {}
        rng = np.random.default_rng(10)
        init_gates(base, "sgm", [c, c], rng)
        for k in base:
            base[k].data[:] = rng.standard_normal(base[k].shape).astype(np.float32) * 0.3
        params64 = nn.cast_params(base, np.float64)
        e4 = rng.normal(size=(1, c, 4, 4))
        r4 = rng.normal(size=(1, c, 4, 4))
        e8 = rng.normal(size=(1, c, 2, 2))
        r8 = rng.normal(size=(1, c, 2, 2))

        def f(a, b, cc, d):
            merged, _ = sgm_forward(
                [FeatureMap(a, 4), FeatureMap(cc, 8)],
                [FeatureMap(b, 4), FeatureMap(d, 8)],
                params64, "sgm", [4, 8], token_stride=8)
            return (merged.data * merged.data).sum()

        rep = grad_check(f, [Tensor(e4), Tensor(r4), Tensor(e8), Tensor(r8)],
                         tol=1e-4)
        assert rep.passed, rep.max_rel_err
