"""Compare the compiled and numpy gradient kernels.

Times the logistic gradient on one client of the default benchmark problem
(2000 samples, 20 features) for full-data and minibatch calls, then times a
short end-to-end FedSub run under each backend and reports the share of run
time spent evaluating client gradients.

Usage::

    python3 benchmarks/bench_kernels.py [--rounds 50] [--repeat 2000]
"""
import argparse
import cProfile
import os
import pstats
import subprocess
import sys
import timeit

import numpy as np

from fedsub import kernels
from fedsub.objectives import generate_clustered_data

END_TO_END = r"""
import cProfile, pstats, sys, time
import fedsub
from fedsub.federation import FedConfig, Federation
from fedsub.objectives import LogisticRegression, generate_clustered_data

rounds = int(sys.argv[1])
obj = LogisticRegression(generate_clustered_data(30, 60_000, 20, heterogeneity_noise=0.1, seed=0), lam=1e-4)
fed = Federation(FedConfig(rounds=rounds, local_steps=5, step_size=0.2, method="cd", rank=10), obj)
prof = cProfile.Profile()
t0 = time.perf_counter()
prof.enable()
for _ in range(rounds):
    fed.step()
prof.disable()
wall = time.perf_counter() - t0
stats = pstats.Stats(prof).stats
kernel = sum(v[3] for k, v in stats.items() if k[2] == "full_gradient")
total = sum(v[2] for v in stats.values())
print(fedsub.BACKEND, wall, kernel / total)
"""


def kernel_times(repeat: int, batch: int, seed: int = 0) -> dict[str, tuple[float, float]]:
    data = generate_clustered_data(30, 60_000, 20, heterogeneity_noise=0.1, seed=seed)
    A, y = data.features[0], data.labels[0]
    rng = np.random.default_rng(seed)
    w = 0.3 * rng.standard_normal(A.shape[1])
    idx = np.sort(rng.choice(A.shape[0], batch, replace=False)).astype(np.intp)
    out = {}
    for name, impl in kernels.backends().items():
        full = min(timeit.repeat(lambda: impl.logistic_grad(A, y, w, 1e-4), number=repeat, repeat=3)) / repeat
        mini = min(timeit.repeat(lambda: impl.logistic_grad(A, y, w, 1e-4, idx), number=repeat,
                                 repeat=3)) / repeat
        out[name] = (full * 1e6, mini * 1e6)
    return out


def end_to_end(rounds: int) -> list[tuple[str, float, float]]:
    rows = []
    for pure in ("0", "1"):
        env = dict(os.environ, FEDSUB_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", END_TO_END, str(rounds)], env=env,
                             capture_output=True, text=True, check=True)
        name, wall, share = res.stdout.split()
        rows.append((name, float(wall), float(share)))
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)

    print(f"logistic_grad, 2000 x 20 client, microseconds per call (best of 3 x {args.repeat})")
    print(f"{'backend':<8} {'full':>10} {'batch ' + str(args.batch):>10}")
    for name, (full, mini) in kernel_times(args.repeat, args.batch).items():
        print(f"{name:<8} {full:>10.1f} {mini:>10.1f}")

    print(f"\nFedSub run, n=30, tau=5, rank 10, {args.rounds} rounds")
    print(f"{'backend':<8} {'wall s':>8} {'gradient share':>13}")
    for name, wall, share in end_to_end(args.rounds):
        print(f"{name:<8} {wall:>8.2f} {share:>15.1%}")


if __name__ == "__main__":
    main()
