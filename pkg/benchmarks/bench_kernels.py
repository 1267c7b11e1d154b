"""Compare the compiled and numpy kernel backends.

Each backend runs in its own interpreter because the choice is made at import.

    python3 benchmarks/bench_kernels.py [--repeat N] [--size S]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from aranet import kernels, trainer
from aranet.arch import ArchConfig

repeat, size = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)

def best(fn):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

x = rng.standard_normal((2, 32, size, size)).astype(np.float32)
cols = kernels.im2col(x, 3, 1, 1)
mask = (rng.random((16, size, size)) < 0.02).astype(np.uint8)
mask[0, 0, 0] = 1

cfg = trainer.TrainConfig(arch=ArchConfig(input_size=size), batch_size=2, steps=1)
state = trainer.init_state(cfg)
xb = rng.random((2, 7, size, size), dtype=np.float32)
yb = rng.random((2, 1, size, size), dtype=np.float32)

out = {
    "backend": kernels.BACKEND,
    "im2col": best(lambda: kernels.im2col(x, 3, 1, 1)),
    "col2im": best(lambda: kernels.col2im(cols, x.shape, 3, 1, 1)),
    "edt_sq": best(lambda: kernels.edt_sq(mask, (3.0, 1.5, 1.5))),
    "train_step": best(lambda: trainer.train_step(state, xb, yb, cfg)),
}
print(json.dumps(out))
"""


def run(backend, repeat, size):
    env = dict(os.environ, ARANET_BACKEND=backend)
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat), str(size)],
                          env=env, capture_output=True, text=True)
    if proc.returncode:
        return None, proc.stderr.strip().splitlines()[-1]
    return json.loads(proc.stdout), None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)

    results = {}
    for backend in ("cython", "python"):
        res, err = run(backend, args.repeat, args.size)
        if res is None:
            print(f"{backend}: unavailable ({err})")
        else:
            results[backend] = res

    keys = ("im2col", "col2im", "edt_sq", "train_step")
    print(f"{'kernel':<12}" + "".join(f"{b + ' ms':>14}" for b in results) + f"{'speedup':>10}")
    for k in keys:
        row = f"{k:<12}" + "".join(f"{results[b][k] * 1e3:>14.3f}" for b in results)
        if len(results) == 2:
            row += f"{results['python'][k] / results['cython'][k]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
