"""Compare the compiled kernels against their numpy references.

Run:  python3 benchmarks/bench_kernels.py

Times each kernel at training-realistic shapes and one full training step
per backend. The GELU rows document why its dispatch stays on numpy: the
vectorized scipy/numpy transcendentals beat a scalar libm loop.
"""

import os
import sys
import time

import numpy as np


def timeit(fn, repeat=20):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e3


def bench_kernels():
    from mvpolicy import _kernels as K
    rng = np.random.default_rng(0)
    rows = []

    x = (rng.normal(size=1_500_000) * 2).astype(np.float32)
    rows.append(("gelu_fwd 1.5M", timeit(lambda: K.np_gelu_fwd(x)),
                 timeit(lambda: K.native_gelu_fwd(x))
                 if K.backend_name() == "native" else float("nan")))

    a = (rng.normal(size=(3168, 198)) * 3).astype(np.float32)
    rows.append(("softmax 3168x198", timeit(lambda: K.np_softmax_rows(a)),
                 timeit(lambda: K.softmax_rows(a))))

    patch = rng.normal(size=(18, 8, 8, 256)).astype(np.float32)
    wl = rng.normal(size=(18, 8, 8, 256, 9)).astype(np.float32)
    rows.append(("convex_fwd 18x8x8x256",
                 timeit(lambda: K.np_convex_fwd(patch, wl), repeat=5),
                 timeit(lambda: K.convex_fwd(patch, wl), repeat=5)))
    g = rng.normal(size=patch.shape).astype(np.float32)
    _, ws = K.np_convex_fwd(patch, wl)
    rows.append(("convex_bwd",
                 timeit(lambda: K.np_convex_bwd(g, ws, patch, True, True), repeat=5),
                 timeit(lambda: K.convex_bwd(g, ws, patch, True, True), repeat=5)))

    p = rng.normal(size=500_000).astype(np.float32)
    gg = rng.normal(size=500_000).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    args = (1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
    rows.append(("adam 500k", timeit(lambda: K.np_adam_step(p, gg, m, v, *args)),
                 timeit(lambda: K.adam_step(p, gg, m, v, *args))))

    print(f"{'kernel':24s} {'numpy ms':>10s} {'native ms':>10s} {'speedup':>8s}")
    for name, np_ms, nat_ms in rows:
        ratio = np_ms / nat_ms if nat_ms == nat_ms and nat_ms > 0 else float("nan")
        print(f"{name:24s} {np_ms:10.2f} {nat_ms:10.2f} {ratio:8.2f}x")


def bench_train_step():
    from mvpolicy.model import ModelConfig, init_policy, policy_forward
    from mvpolicy.data import TASKS, generate_episode, NoiseSpec
    from mvpolicy.env import default_rig
    from mvpolicy.trainer import build_batch, FeatureCache
    from mvpolicy.action_head import action_loss
    from mvpolicy import nn, _kernels

    mcfg = ModelConfig(views=3, image_hw=(128, 128), vocab_size=14, text_dim=32,
                       sem_channels=(16, 36, 36), dep_channels=(16, 36, 36),
                       stage_strides=(4, 2, 2), fusion_strides=(8, 16),
                       heads=4, view_layers=2, scene_layers=2, ffn_mult=2,
                       use_sgm=False)
    rig = default_rig()
    eps = [generate_episode(TASKS["reach-sphere"], rig, seed=s) for s in range(3)]
    params = init_policy(mcfg, seed=0)
    opt = nn.Adam(params)
    samples = [(ep, k) for ep in eps for k in range(2)]
    rng = np.random.default_rng(1)
    cache = FeatureCache(mcfg, None)

    def step():
        batch = build_batch((samples * 2)[:6], mcfg, NoiseSpec.from_level("none"),
                            rng, use_augment=True, cache=cache)
        out = policy_forward(params, None, mcfg, batch["rgb"],
                             batch["obs_depth"], batch["tokens"],
                             batch["proprio"], batch["positions"])
        loss, _ = action_loss(out.heat_logits, out.rot_logits, out.grip_logits,
                              batch["targets"], batch["cameras"],
                              batch["clean_depth"], mcfg.bins())
        nn.zero_grads(params)
        loss.backward()
        opt.step(1e-3)

    print(f"train step ({_kernels.backend_name()} backend): "
          f"{timeit(step, repeat=6):.0f} ms")


if __name__ == "__main__":
    from mvpolicy import _kernels
    if "--step-only" in sys.argv:
        bench_train_step()
        raise SystemExit(0)
    print("backend:", _kernels.backend_name())
    bench_kernels()
    bench_train_step()
    if _kernels.backend_name() == "native":
        print("\nrerunning the end-to-end step with MVPOLICY_NO_NATIVE=1:")
        import subprocess
        env = dict(os.environ, MVPOLICY_NO_NATIVE="1")
        subprocess.run([sys.executable, __file__, "--step-only"], env=env)
