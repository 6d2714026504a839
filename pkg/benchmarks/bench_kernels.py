"""Compare the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Reports the best-of-``repeat`` wall time per call for each kernel at the
shapes the default policy sees during training (64 sequences of ~36 tokens,
hidden 64, 4 heads, vocab 42), plus one end-to-end SFT loss+gradient step
and one 80-rollout generation batch under each backend.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from aepolab import _kernels_py as py
from aepolab import kernels

try:
    from aepolab import _ckernels as ck
except ImportError:  # extension not built
    ck = None

BATCH, T, D, H, V = 64, 36, 64, 4, 42


def kernel_cases(rng):
    x = rng.standard_normal((BATCH, T, D))
    h = rng.standard_normal((BATCH, T, 4 * D))
    g = rng.standard_normal((BATCH, T, D))
    logits = rng.standard_normal((BATCH, T, V))
    q, k, v = (rng.standard_normal((BATCH, H, T, D // H)) for _ in range(3))
    ga = rng.standard_normal(q.shape)
    qd = rng.standard_normal((80, H, D // H))
    kc, vc = rng.standard_normal((80, H, 41, D // H)), rng.standard_normal((80, H, 41, D // H))
    probs = rng.dirichlet(np.ones(V), size=80)
    u = rng.random(80)

    def cases(mod):
        _, gcache = mod.gelu_forward(h)
        y, inv = mod.layer_norm_forward(x, 1e-5)
        _, att_p = mod.attention_forward(q, k, v)
        return {
            "gelu_forward": lambda: mod.gelu_forward(h),
            "gelu_backward": lambda: mod.gelu_backward(h, gcache),
            "layer_norm_forward": lambda: mod.layer_norm_forward(x, 1e-5),
            "layer_norm_backward": lambda: mod.layer_norm_backward(g, y, inv),
            "log_softmax": lambda: mod.log_softmax(logits),
            "attention_forward": lambda: mod.attention_forward(q, k, v),
            "attention_backward": lambda: mod.attention_backward(ga, q, k, v, att_p),
            "attention_decode": lambda: mod.attention_decode(qd, kc, vc, 30),
            "nucleus_sample": lambda: mod.nucleus_sample(probs, u, 1.0, 0.99),
        }

    return cases


def best(fn, repeat: int, number: int = 5) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def end_to_end(repeat: int) -> dict[str, float]:
    from aepolab.policy import ModelConfig, init_params, loss_gradient, track
    from aepolab.rollout import SamplingConfig, sample_batch
    from aepolab.tasks import TaskSpec, Vocab, generate_dataset
    from aepolab.trainer import WarmupConfig, _sft_batch, sft_loss

    spec = TaskSpec(n_train=200, n_eval=1)
    vocab = Vocab.for_spec(spec)
    train, _ = generate_dataset(spec)
    params = init_params(ModelConfig(vocab.size), 0)
    tokens, mask, plen = _sft_batch(train[:BATCH], np.random.default_rng(0), WarmupConfig())

    def sft_step():
        tr = track(params)
        loss_gradient(tr, sft_loss(tr, tokens, mask, plen))

    def generate():
        sample_batch(params, train[:16], SamplingConfig(), 0, 0, vocab.is_option)

    return {"sft_loss_and_grad": best(sft_step, repeat, 2), "generate_80": best(generate, repeat, 2)}


def use_backend(mod) -> None:
    for name in kernels._names:
        setattr(kernels, name, getattr(mod, name))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    if ck is None:
        print("compiled extension not available; build with `pip install -e .`", file=sys.stderr)
        return 1
    cases = kernel_cases(np.random.default_rng(0))
    results = {}
    py_cases, c_cases = cases(py), cases(ck)
    print(f"{'kernel':24s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name in py_cases:
        tp, tc = best(py_cases[name], args.repeat), best(c_cases[name], args.repeat)
        results[name] = {"python": tp, "cython": tc}
        print(f"{name:24s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f}x")
    saved = {name: getattr(kernels, name) for name in kernels._names}
    try:
        for label, mod in (("python", py), ("cython", ck)):
            use_backend(mod)
            for k, t in end_to_end(args.repeat).items():
                results.setdefault(k, {})[label] = t
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)
    for k in ("sft_loss_and_grad", "generate_80"):
        tp, tc = results[k]["python"], results[k]["cython"]
        print(f"{k:24s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
