"""Compare the compiled kernel extension with the numpy fallback.

Times each hot kernel on training-realistic shapes, then an end-to-end
training step with each backend. Select the backend under test with
NARFLOW_BACKEND={ext,py}; this script forks itself to time both.

    python benchmarks/bench_kernels.py            # table for both backends
    python benchmarks/bench_kernels.py --inner    # (internal) one backend
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def time_call(fn, reps=200, warmup=20):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def kernel_timings(dtype=np.float32):
    from narflow.backend import kernels

    rng = np.random.default_rng(0)
    rows, dim = 4096, 64
    x = np.ascontiguousarray(rng.standard_normal((rows, dim)).astype(dtype))
    dy = np.ascontiguousarray(rng.standard_normal((rows, dim)).astype(dtype))
    gain = np.ones(dim, dtype=dtype)
    bias = np.zeros(dim, dtype=dtype)

    out = {}
    y = kernels.softmax_fwd(x)
    out["softmax_fwd"] = time_call(lambda: kernels.softmax_fwd(x))
    out["softmax_bwd"] = time_call(lambda: kernels.softmax_bwd(y, dy))
    _, xhat, rstd = kernels.layernorm_fwd(x, gain, bias, 1e-5)
    out["layernorm_fwd"] = time_call(lambda: kernels.layernorm_fwd(x, gain, bias, 1e-5))
    out["layernorm_bwd"] = time_call(lambda: kernels.layernorm_bwd(xhat, rstd, gain, dy))

    ids = np.ascontiguousarray(rng.integers(0, 512, rows).astype(np.int64))
    dw = np.zeros((512, dim), dtype=dtype)
    out["embedding_bwd"] = time_call(lambda: kernels.embedding_bwd(ids, dy, dw))

    n = 512 * dim
    p = rng.standard_normal(n).astype(dtype)
    g = rng.standard_normal(n).astype(dtype)
    m = np.zeros(n, dtype=dtype)
    v = np.zeros(n, dtype=dtype)
    vh = np.zeros(n, dtype=dtype)
    out["adam_step"] = time_call(lambda: kernels.adam_step(p, g, m, v, vh, 1e-3, 0.9, 0.999, 1e-8, 3, True))
    return out


def train_step_timing():
    from narflow.config import RunConfig
    from narflow.data import BatchIterator, build_vocab, synth_corpus
    from narflow.model import LatentFlowModel
    from narflow.rng import RandomSource
    from narflow.training import AdamAmsgrad, clip_gradients, elbo_step

    cfg = RunConfig.build("tiny", overrides=["train.batch_sentences=64"])
    corpus = synth_corpus("lexical-swap", 64, (4, 16), 512, 1)
    sv, tv = build_vocab(corpus)
    rng = RandomSource(1)
    model = LatentFlowModel(len(sv), len(tv), cfg.model_config(), rng.spawn("model"))
    tc = cfg.train_config()
    src_b, tgt_b = next(iter(BatchIterator(corpus, sv, tv, 64, 2, 1).epoch(0)))
    model.initialize_actnorm(src_b, tgt_b, rng.spawn("init"))
    opt = AdamAmsgrad(model.parameters(), tc)
    params = model.parameters()

    def step(i):
        loss, _ = elbo_step(model, src_b, tgt_b, i, tc, rng.spawn(f"s{i}"))
        model.zero_grad()
        loss.backward()
        clip_gradients(params, tc.grad_clip)
        opt.step(1e-4)

    step(0)
    return time_call(lambda: step(1), reps=15, warmup=2)


def run_inner():
    from narflow.backend import backend_name

    result = {"backend": backend_name(), "kernels": kernel_timings(), "train_step": train_step_timing()}
    print(json.dumps(result))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--inner", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.inner:
        run_inner()
        return

    results = {}
    for mode in ("ext", "py"):
        env = dict(os.environ, NARFLOW_BACKEND=mode)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--inner"], env=env, capture_output=True, text=True
        )
        if proc.returncode != 0:
            print(f"{mode}: failed\n{proc.stderr}", file=sys.stderr)
            continue
        results[mode] = json.loads(proc.stdout.strip().splitlines()[-1])

    if "ext" not in results:
        print("compiled extension unavailable; showing numpy timings only")
    names = sorted(results["py"]["kernels"])
    print(f"{'kernel':>14} | {'numpy':>10} | {'compiled':>10} | speedup")
    print("-" * 54)
    for name in names:
        py_t = results["py"]["kernels"][name]
        line = f"{name:>14} | {py_t * 1e6:>8.1f}us"
        if "ext" in results:
            ext_t = results["ext"]["kernels"][name]
            line += f" | {ext_t * 1e6:>8.1f}us | {py_t / ext_t:>6.2f}x"
        print(line)
    py_s = results["py"]["train_step"]
    line = f"{'train step':>14} | {py_s * 1e3:>8.1f}ms"
    if "ext" in results:
        ext_s = results["ext"]["train_step"]
        line += f" | {ext_s * 1e3:>8.1f}ms | {py_s / ext_s:>6.2f}x"
    print(line)


if __name__ == "__main__":
    main()
