"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Reports per-kernel microseconds for shapes seen in the toy model (batch 32,
17 tokens, d=128; attention rows of 17; 25x25 and 167x167 similarity
matrices) plus one end-to-end MWA training step.
"""
import argparse
import timeit

import numpy as np

from mwadapter import kernels
from mwadapter.kernels import _reference


def cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32 * 17, 128)).astype(dtype)
    g, b = np.ones(128, dtype), np.zeros(128, dtype)
    dy = rng.normal(size=x.shape).astype(dtype)
    _, xhat, rstd = _reference.layer_norm_forward(x, g, b, 1e-5)
    att = rng.normal(size=(32 * 4 * 17, 17)).astype(dtype)
    att_y = _reference.softmax_forward(att)
    att_dy = rng.normal(size=att.shape).astype(dtype)
    h = rng.normal(size=(32 * 17, 512)).astype(dtype)
    _, t = _reference.gelu_forward(h)
    h_dy = rng.normal(size=h.shape).astype(dtype)
    sims = {n: rng.normal(size=(n, n)) for n in (25, 167)}
    return {
        "layer_norm_forward": lambda k: k.layer_norm_forward(x, g, b, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_backward(dy, xhat, rstd, g),
        "softmax_forward": lambda k: k.softmax_forward(att),
        "softmax_backward": lambda k: k.softmax_backward(att_y, att_dy),
        "gelu_forward": lambda k: k.gelu_forward(h),
        "gelu_backward": lambda k: k.gelu_backward(h, t, h_dy),
        "diagonal_ranks 25x25": lambda k: k.diagonal_ranks(sims[25]),
        "diagonal_ranks 167x167": lambda k: k.diagonal_ranks(sims[167]),
    }


def best_us(fn, repeat):
    number = 5
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def train_step_us(repeat):
    from mwadapter import AdapterConfig, BackboneConfig, Modality, MultiWayModel, attach_adapters, freeze_backbone
    from mwadapter.retrieval import encode, info_nce_loss
    from mwadapter.tensor import GradTape, backward

    m = MultiWayModel(BackboneConfig(), seed=0)
    attach_adapters(m, AdapterConfig())
    freeze_backbone(m)
    rng = np.random.default_rng(1)
    imgs = rng.normal(size=(32, 16, 48)).astype(np.float32)
    txts = rng.integers(0, 512, size=(32, 8))

    def step():
        with GradTape() as tape:
            loss = info_nce_loss(encode(imgs, Modality.VISION, m), encode(txts, Modality.LANGUAGE, m))
        backward(loss, tape)

    return min(timeit.repeat(step, number=1, repeat=repeat)) * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    modules = {"python": _reference}
    if "compiled" in backends:
        from mwadapter.kernels import _compiled

        modules["compiled"] = _compiled

    print(f"{'kernel':<26}{'python us':>12}{'compiled us':>14}{'speedup':>10}")
    for name, fn in cases(np.float32).items():
        t = {b: best_us(lambda: fn(mod), args.repeat) for b, mod in modules.items()}
        comp = t.get("compiled")
        extra = f"{comp:>14.1f}{t['python'] / comp:>9.2f}x" if comp else f"{'-':>14}{'-':>10}"
        print(f"{name:<26}{t['python']:>12.1f}{extra}")

    before = kernels.BACKEND
    steps = {}
    for b in modules:
        kernels.use_backend(b)
        steps[b] = train_step_us(max(2, args.repeat // 2))
    kernels.use_backend(before)
    line = f"{'MWA train step (B=32)':<26}{steps['python'] / 1e3:>10.1f}ms"
    if "compiled" in steps:
        line += f"{steps['compiled'] / 1e3:>12.1f}ms{steps['python'] / steps['compiled']:>9.2f}x"
    print(line)


if __name__ == "__main__":
    main()
