"""Compare the compiled and numpy kernel backends on Step-2 sized workloads.

Usage: python benchmarks/bench_kernels.py [--repeats 5] [--samples 2048]
"""

import argparse
import time

import numpy as np

from egl_lab import kernels
from egl_lab.datagen import DatasetSpec, generate
from egl_lab.problems import site_combinations


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def workloads(samples, seed=0):
    rng = np.random.default_rng(seed)
    topk_preds = rng.normal(size=(samples, 50))
    web_preds = np.ascontiguousarray(rng.uniform(0, 0.6, size=(samples, 5, 10)))
    combos = site_combinations(5, 2)
    port = generate(DatasetSpec("portfolio", num_instances=40, seed=seed))
    port_preds = np.ascontiguousarray(port.instances[0].labels + 0.01 * rng.normal(size=(samples // 8, 50)))
    return {
        "topk K=1 of 50": lambda b: b.topk_indices(topk_preds, 1),
        "web-adv 2 of 5 sites": lambda b: b.webadv_best_subsets(web_preds, combos),
        "portfolio Frank-Wolfe D=50": lambda b: b.frank_wolfe_batch(port_preds, port.q, 0.001, 10000, 1e-8),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--samples", type=int, default=2048)
    args = parser.parse_args(argv)
    backends = {"python": kernels.load_backend("python")}
    try:
        backends["cython"] = kernels.load_backend("cython")
    except ImportError:
        print("compiled extension not built; only the numpy backend is timed")
    print(f"{'workload':<30}" + "".join(f"{name:>12}" for name in backends) + f"{'speed-up':>10}")
    for label, fn in workloads(args.samples).items():
        times = {name: best_of(lambda b=b: fn(b), args.repeats) for name, b in backends.items()}
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<30}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times.values()) + f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
