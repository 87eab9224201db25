"""Compare the compiled row kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Also times one full training step under each backend by re-importing the
package in a subprocess with NORMLAB_PURE_PYTHON set.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from normlab.kernels import available_backends, get_backend

STEP_SNIPPET = """
import time
from normlab import kernels
from normlab.model import ModelConfig
from normlab.strategies import NormStrategy
from normlab.tasks import TaskSpec
from normlab.trainer import TrainConfig, train
mc = ModelConfig(N=2, M=2, d_model=64, d_ffn=128, heads=4, vocab_size=16, max_len=9,
                 strategy=NormStrategy.branch_norm(2, 2), seed=0)
tc = TrainConfig(lr=1e-3, warmup_updates=10, max_updates=40, batch_size_tokens=288)
t0 = time.perf_counter()
train(mc, tc, TaskSpec("copy", 16, 4, 8))
print(kernels.BACKEND, (time.perf_counter() - t0) / 40 * 1e3)
"""


def kernel_cases(rows, width):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, width))
    dy = rng.normal(size=(rows, width))
    gain, bias = rng.normal(size=width), rng.normal(size=width)
    p, g, m, v = (rng.normal(size=rows * width) for _ in range(4))
    v = np.abs(v)

    def cases(k):
        y, xhat, rstd = k.layer_norm_forward(x, gain, bias, 1e-5)
        s = k.softmax_forward(x)
        return {
            "layer_norm_forward": lambda: k.layer_norm_forward(x, gain, bias, 1e-5),
            "layer_norm_backward": lambda: k.layer_norm_backward(dy, xhat, rstd, gain),
            "softmax_forward": lambda: k.softmax_forward(x),
            "softmax_backward": lambda: k.softmax_backward(s, dy),
            "adam_update": lambda: k.adam_update(p, g, m, v, 1e-3, 0.9, 0.98, 1e-8, 0.5, 0.5, 1.0),
        }

    return cases


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-step", action="store_true", help="skip the training-step comparison")
    args = ap.parse_args()
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    for rows, width in ((288, 64), (288 * 4, 9)):
        cases = kernel_cases(rows, width)
        timings = {b: {name: min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat * 1e6
                       for name, fn in cases(get_backend(b)).items()} for b in backends}
        print(f"\nrows={rows} width={width} (microseconds per call)")
        print(f"{'kernel':22s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
        for name in timings["python"]:
            vals = [timings[b][name] for b in backends]
            line = f"{name:22s}" + "".join(f"{t:12.1f}" for t in vals)
            if len(backends) > 1:
                line += f"{vals[0] / vals[1]:11.2f}x"
            print(line)
    if args.skip_step:
        return
    print("\nfull training step, N=M=2 d=64, 288 tokens (ms per step)")
    for pure in ("1", "0"):
        env = dict(os.environ, NORMLAB_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
        name, ms = out.stdout.split()
        print(f"  {name:8s} {float(ms):8.1f}")


if __name__ == "__main__":
    main()
