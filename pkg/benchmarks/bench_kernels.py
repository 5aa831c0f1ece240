"""Compare the numba and numpy kernel paths.

Times one training step (forward + backward over all heads) and one block of
exact top-k neighbour selection, checks the two paths agree, and finally
times a short end-to-end training run under each backend in a subprocess
with ``CURA_DISABLE_NUMBA`` set accordingly.

    python3 benchmarks/bench_kernels.py [--repeats 50] [--skip-train]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cura import _kernels

TRAIN_SNIPPET = """
import time
from cura import _kernels, dataset, multihead
from cura.objective import ObjectiveConfig
ds = dataset.generate_synthetic(dataset.SynthConfig(n_samples=8000, seed=0))
folds = dataset.split_folds(ds, 5, 0.125, 0)
tr, va, _ = folds.fold(0)
clf = multihead.init_classifier(ds.dim, 32)
cfg = multihead.TrainConfig(max_epochs=4, warmup_epochs=2, patience=4)
multihead.train(clf.copy(), ds.subset(tr), ds.subset(va), ObjectiveConfig(lambda_coh=0.0), None,
                multihead.TrainConfig(max_epochs=1, warmup_epochs=0, patience=1))  # warm the JIT
t = time.perf_counter()
multihead.train(clf, ds.subset(tr), ds.subset(va), ObjectiveConfig(lambda_coh=0.0), None, cfg)
print(_kernels.backend(), time.perf_counter() - t)
"""


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times), float(np.median(times))


def bench_step(repeats, M=32, B=256, D=16, H=64):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(B, D))
    W1 = rng.uniform(-0.25, 0.25, size=(M, D, H))
    b1 = rng.uniform(-0.25, 0.25, size=(M, H))
    W2 = rng.uniform(-0.125, 0.125, size=(M, H))
    b2 = rng.uniform(-0.125, 0.125, size=M)
    dlogit = rng.normal(size=(M, B)) / (M * B)
    mask = _kernels.NO_MASK

    def step(fwd, bwd):
        S, A = fwd(X, W1, b1, W2, b2, mask)
        return S, bwd(X, A, mask, W2, dlogit)

    ref = step(_kernels.heads_forward_numpy, _kernels.heads_backward_numpy)
    got = step(_kernels.heads_forward_numba, _kernels.heads_backward_numba)
    diff = max(np.abs(ref[0] - got[0]).max(), *(np.abs(a - b).max() for a, b in zip(ref[1], got[1])))
    rows = []
    for name, fwd, bwd in (
        ("numpy", _kernels.heads_forward_numpy, _kernels.heads_backward_numpy),
        ("numba", _kernels.heads_forward_numba, _kernels.heads_backward_numba),
    ):
        rows.append((name, *best_of(lambda: step(fwd, bwd), repeats)))
    return f"train step M={M} B={B} D={D} H={H}", rows, diff


def bench_topk(repeats, rows_=512, cols=14000, k=100):
    rng = np.random.default_rng(1)
    dist = rng.uniform(0, 2, size=(rows_, cols))
    # coarse grid so ties actually occur
    dist = np.round(dist, 3)
    same = np.array_equal(_kernels.topk_rows_numpy(dist, k), _kernels.topk_rows_numba(dist, k))
    rows = []
    for name, fn in (("numpy", _kernels.topk_rows_numpy), ("numba", _kernels.topk_rows_numba)):
        rows.append((name, *best_of(lambda: fn(dist, k), max(3, repeats // 10))))
    return f"top-k block {rows_}x{cols} k={k}", rows, 0.0 if same else float("inf")


def bench_train():
    out = []
    for flag in ("1", "0"):
        env = dict(os.environ, CURA_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out.append((name, float(secs)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--skip-train", action="store_true", help="skip the end-to-end subprocess timing")
    args = ap.parse_args()

    if _kernels.numba is None:
        sys.exit("numba is not importable; nothing to compare")

    # compile once before timing
    bench_step(1)
    bench_topk(1, rows_=8, cols=64, k=4)

    for title, rows, diff in (bench_step(args.repeats), bench_topk(args.repeats)):
        print(title)
        base = rows[0][1]
        for name, best, median in rows:
            print(f"  {name:<6} best {best * 1e3:9.3f} ms  median {median * 1e3:9.3f} ms  speedup x{base / best:5.2f}")
        print(f"  max |numpy - numba| = {diff:.3e}")
    if not args.skip_train:
        print("4-epoch training run, 32 heads, 6125 rows")
        timings = bench_train()
        base = timings[0][1]
        for name, secs in timings:
            print(f"  {name:<6} {secs:8.3f} s  speedup x{base / secs:5.2f}")


if __name__ == "__main__":
    main()
