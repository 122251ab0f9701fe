"""Finite-difference verification of every differentiable operation.

Each entry builds a tiny float64 instance of one operation (or of a whole
module forward), wraps it in a scalar objective, and compares reverse-mode
gradients against central differences. Instances are kept small so the
whole suite over many random seeds stays fast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .action_head import (LossWeights, RotationBins, _convex_combine,
                          decode_heatmap, init_heatmap_decoder,
                          init_rotation_gripper, local_token_features)
from .encoders import TrunkSpec, encode_depth, encode_semantic, init_depth_encoder, init_semantic
from .rope import PositionGrid, apply_rope, build_frequencies
from .sgm import fuse, gate, init_gates, sgm_forward
from .spt import SptConfig, attention_block, init_spt, inject_proprio, spt_forward
from .encoders import FeatureMap
from .tensor import (Tensor, bce_with_logit, conv2d, grad_check, matmul,
                     softmax, softmax_ce, upsample_nearest2, avgpool2,
                     take_rows)

__all__ = ["SuiteResult", "run_grad_suite", "SUITE"]


@dataclass
class SuiteResult:
    name: str
    seeds: int
    max_rel_err: float
    passed: bool


def _rand_params(initializer, rng, scale=0.4):
    params = {}
    initializer(params, rng)
    for k, p in params.items():
        if k.endswith(".w") and float(np.abs(p.data).max()) == 0.0:
            p.data[:] = (rng.standard_normal(p.shape) * scale).astype(np.float32)
    return nn.cast_params(params, np.float64)


def _case_elementwise(rng):
    a = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(3,)))
    return lambda x, y: ((x * y).sigmoid() + (x + y).gelu()
                         + (x - y) / (y * y + 2.0)).sum(), [a, b]


def _case_matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    return lambda x, y: (matmul(x, y) ** 2.0).sum(), [a, b]


def _case_conv(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    b = Tensor(rng.normal(size=(3,)))
    return lambda xv, wv, bv: conv2d(xv, wv, bv, stride=2, padding=1).gelu().sum(), [x, w, b]


def _case_softmax_ce(rng):
    logits = Tensor(rng.normal(size=(4, 6)) * 2)
    targets = rng.integers(0, 6, size=4)
    return lambda l: softmax_ce(l, targets), [logits]


def _case_softmax_ce_dense(rng):
    from .tensor import softmax_ce_dense
    logits = Tensor(rng.normal(size=(3, 7)) * 2)
    q = rng.uniform(size=(3, 7))
    q[1] = 0.0  # masked row
    q[0] /= q[0].sum()
    q[2] /= q[2].sum()
    w = rng.uniform(0.2, 1.0, size=3)
    return lambda l: softmax_ce_dense(l, q, w), [logits]


def _case_bce(rng):
    x = Tensor(rng.normal(size=(5,)))
    t = rng.integers(0, 2, size=5).astype(float)
    return lambda l: bce_with_logit(l, t), [x]


def _case_softmax(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(3, 5)))
    return lambda l, ww: (softmax(l, axis=-1) * ww).sum(), [x, w]


def _case_structure(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    tab = Tensor(rng.normal(size=(5, 3)))
    idx = rng.integers(0, 5, size=4)
    return (lambda xv, tv: (avgpool2(upsample_nearest2(xv)) ** 2.0).sum()
            + (take_rows(tv, idx) * 0.5).sum(), [x, tab])


def _case_norms(rng):
    x = Tensor(rng.normal(size=(1, 4, 3, 3)))
    params = {}
    nn.init_groupnorm(params, "gn", 4)
    nn.init_layernorm(params, "ln", 9)
    params = nn.cast_params(params, np.float64)
    for p in params.values():
        p.data += rng.normal(size=p.shape) * 0.2

    def f(xv, gs, gb, ls, lb):
        local = {"gn.scale": gs, "gn.shift": gb, "ln.scale": ls, "ln.shift": lb}
        h = nn.groupnorm(xv, local, "gn", groups=2)
        flat = h.reshape((4, 9))
        return (nn.layernorm(flat, local, "ln") ** 2.0).sum()

    return f, [x, params["gn.scale"], params["gn.shift"],
               params["ln.scale"], params["ln.shift"]]


def _case_rope(rng):
    bank = build_frequencies(12)
    pos = PositionGrid.all_valid(rng.normal(size=(4, 3)))
    f = Tensor(rng.normal(size=(4, 12)))
    return lambda t: (apply_rope(t, pos, bank) ** 2.0).sum(), [f]


def _case_semantic_encoder(rng):
    spec = TrunkSpec(3, (4, 6))
    params = _rand_params(
        lambda p, r: init_semantic(p, "sem", spec, vocab_size=6, text_dim=6, rng=r),
        rng)
    ids = np.array([[1, 2]])
    img = Tensor(rng.normal(size=(1, 3, 8, 8)))

    def f(x):
        stages, f_text = encode_semantic(x, ids, params, spec)
        return (stages[-1].data ** 2.0).sum() + (f_text * 0.5).sum()

    return f, [img]


def _case_depth_encoder(rng):
    spec = TrunkSpec(2, (4, 6))
    params = _rand_params(
        lambda p, r: init_depth_encoder(p, "dep", spec, r), rng)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)))

    def f(xv):
        return (encode_depth(xv, params, spec)[-1].data ** 2.0).sum()

    return f, [x]


def _case_gate_fuse(rng):
    c = 4
    params = _rand_params(lambda p, r: init_gates(p, "sgm", [c], r), rng)
    e = Tensor(rng.normal(size=(1, c, 3, 3)))
    r_ = Tensor(rng.normal(size=(1, c, 3, 3)))

    def f(ev, rv):
        g = gate(FeatureMap(ev, 8), FeatureMap(rv, 8), params, "sgm.gate0")
        return (fuse(FeatureMap(ev, 8), FeatureMap(rv, 8), g).data ** 2.0).sum()

    return f, [e, r_]


def _case_sgm_multiscale(rng):
    c = 4
    params = _rand_params(lambda p, r: init_gates(p, "sgm", [c, c], r), rng)
    e4 = Tensor(rng.normal(size=(1, c, 4, 4)))
    r4 = Tensor(rng.normal(size=(1, c, 4, 4)))
    e8 = Tensor(rng.normal(size=(1, c, 2, 2)))
    r8 = Tensor(rng.normal(size=(1, c, 2, 2)))

    def f(a, b, cc, d):
        merged, _ = sgm_forward([FeatureMap(a, 4), FeatureMap(cc, 8)],
                                [FeatureMap(b, 4), FeatureMap(d, 8)],
                                params, "sgm", [4, 8], token_stride=8)
        return (merged.data ** 2.0).sum()

    return f, [e4, r4, e8, r8]


def _case_proprio(rng):
    params = _rand_params(lambda p, r: init_proprio_local(p, r), rng)
    tokens = Tensor(rng.normal(size=(1, 4, 12)))
    prop = Tensor(rng.normal(size=(1, 5)))
    return (lambda t, pv: (inject_proprio(t, pv, params, "spt") ** 2.0).sum(),
            [tokens, prop])


def init_proprio_local(params, rng):
    from .spt import init_proprio
    init_proprio(params, "spt", 5, 8, 12, rng)


def _case_attention(rng):
    cfg = SptConfig(dim=12, heads=2, view_layers=1, scene_layers=0, ffn_mult=2)
    params = _rand_params(lambda p, r: init_spt(p, "spt", cfg, 5, r,
                                                proprio_hidden=8), rng)
    from .rope import axial_sincos
    pos = PositionGrid.all_valid(rng.normal(size=(1, 5, 3)))
    cos, sin = axial_sincos(pos, cfg.bank(), dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 5, 12)))
    return (lambda t: (attention_block(t, params, "spt.view0", cfg, cos, sin)
                       ** 2.0).sum(), [x])


def _case_spt_two_stage(rng):
    cfg = SptConfig(dim=6, heads=1, view_layers=1, scene_layers=1, ffn_mult=2)
    params = _rand_params(lambda p, r: init_spt(p, "spt", cfg, 5, r,
                                                proprio_hidden=6), rng)
    pos = PositionGrid.all_valid(rng.normal(size=(1, 2, 4, 3)))
    tokens = Tensor(rng.normal(size=(1, 2, 4, 6)))
    text = Tensor(rng.normal(size=(1, 2, 6)))
    prop = Tensor(rng.normal(size=(1, 5)))

    def f(t, tx, pv):
        return (spt_forward(t, tx, pos, pv, params, "spt", cfg) ** 2.0).sum()

    return f, [tokens, text, prop]


def _case_heatmap_decoder(rng):
    params = _rand_params(
        lambda p, r: init_heatmap_decoder(p, "head", 6, 2, r), rng)
    tokens = Tensor(rng.normal(size=(1, 3, 3, 6)))
    return (lambda t: (decode_heatmap(t, params, "head", 2) ** 2.0).sum(),
            [tokens])


def _case_convex_combine(rng):
    patch = Tensor(rng.normal(size=(1, 3, 3, 4)))
    wl = Tensor(rng.normal(size=(1, 3, 3, 4, 9)))
    return (lambda p, w: (_convex_combine(p, w) ** 2.0).sum(), [patch, wl])


def _case_rotation_head(rng):
    params = _rand_params(
        lambda p, r: init_rotation_gripper(p, "head", dim=6, views=2, bins=8,
                                           rng=r, hidden=10), rng)
    tokens = Tensor(rng.normal(size=(1, 2, 3, 3, 6)))
    cells = np.array([[[1, 1], [0, 2]]])

    def f(t):
        from .action_head import predict_rotation_gripper
        rot, grip = predict_rotation_gripper(t, cells, params, "head", 8)
        return (rot ** 2.0).sum() + (grip.sigmoid()).sum()

    return f, [tokens]


def _case_action_loss(rng):
    from .action_head import Action, action_loss
    from .camera import CameraModel, Intrinsics, look_at_extrinsics
    cams = [CameraModel(Intrinsics(20.0, 20.0, 8.0, 8.0),
                        look_at_extrinsics([0.1, -0.7, 0.9], [0, 0, 0]), 16, 16),
            CameraModel(Intrinsics(20.0, 20.0, 8.0, 8.0),
                        look_at_extrinsics([-0.5, -0.5, 0.8], [0, 0, 0]), 16, 16)]
    target = Action([0.0, 0.0, 0.05], [0.1, -0.2, 0.3], 1.0)
    depths = np.full((1, 2, 16, 16), 2.0)
    bins = RotationBins(8)
    heat = Tensor(rng.normal(size=(1, 2, 16, 16)))
    rot = Tensor(rng.normal(size=(1, 3, 8)))
    grip = Tensor(rng.normal(size=(1,)))

    def f(h, r, g):
        total, _ = action_loss(h, r, g, [target], [cams], depths, bins,
                               weights=LossWeights(1.0, 1.0, 1.0))
        return total

    return f, [heat, rot, grip]


SUITE = {
    "elementwise": _case_elementwise,
    "matmul": _case_matmul,
    "conv2d": _case_conv,
    "softmax": _case_softmax,
    "softmax_ce": _case_softmax_ce,
    "softmax_ce_dense": _case_softmax_ce_dense,
    "bce_with_logit": _case_bce,
    "structural": _case_structure,
    "normalizations": _case_norms,
    "rope_apply": _case_rope,
    "semantic_encoder": _case_semantic_encoder,
    "depth_encoder": _case_depth_encoder,
    "gate_fuse": _case_gate_fuse,
    "sgm_multiscale": _case_sgm_multiscale,
    "proprio_injection": _case_proprio,
    "attention_block": _case_attention,
    "spt_two_stage": _case_spt_two_stage,
    "heatmap_decoder": _case_heatmap_decoder,
    "convex_combine": _case_convex_combine,
    "rotation_gripper_head": _case_rotation_head,
    "action_loss": _case_action_loss,
}


def run_grad_suite(seeds: int = 20, tol: float = 1e-4, h: float = 1e-5,
                   log=None) -> list:
    """Run every case over ``seeds`` random instances; returns SuiteResults."""
    results = []
    for name, builder in SUITE.items():
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([hash32(name), s]))
            f, inputs = builder(rng)
            rep = grad_check(f, inputs, h=h, tol=tol)
            worst = max(worst, rep.max_rel_err)
        results.append(SuiteResult(name, seeds, float(worst), worst <= tol))
        if log:
            status = "pass" if results[-1].passed else "FAIL"
            log(f"{status}  {name:24s} max rel err {worst:.3e} over {seeds} seeds")
    return results


def hash32(name: str) -> int:
    import hashlib
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
