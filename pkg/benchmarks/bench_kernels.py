"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --size 64 --repeat 5
"""
import argparse
import time

import numpy as np

from tvreg import _accel
from tvreg.similarity import linearize_sad
from tvreg.synthbench import make_case
from tvreg.tvsolver import DualState, SolverParams, solve_subproblem, update_h, update_q, update_w
from tvreg.volume import div_backward, warp_scalar, zero_field


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size):
    dims = (size,) * 3
    case = make_case("blobs", dims, size / 16, size / 6, seed=0, noise_sigma=0.01)
    lin = linearize_sad(case.moving, case.fixed, zero_field(dims))
    u = 0.5 * case.truth
    q = np.random.default_rng(0).normal(size=(3,) + dims)
    params = SolverParams(max_iters=50, delta=1e-12)

    def iteration():
        state = DualState.zeros(dims)
        for _ in range(10):
            update_w(state, lin, params)
            update_q(state, u, lin, params)
            update_h(state, lin, params)

    return {
        "warp_scalar": lambda: warp_scalar(case.moving, case.truth),
        "div_backward": lambda: div_backward(q),
        "10 solver iterations": iteration,
        "solve (50 iterations)": lambda: solve_subproblem(lin, u, params),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--threads", type=int)
    args = parser.parse_args(argv)
    if args.threads:
        _accel.set_threads(args.threads)
    results = {}
    for name in ("numpy", "numba"):
        if name == "numba" and not _accel.HAVE_NUMBA:
            continue
        with _accel.backend(name):
            results[name] = {k: best_of(fn, args.repeat) for k, fn in cases(args.size).items()}
    print(f"grid {args.size}^3, best of {args.repeat}")
    print(f"{'kernel':<24}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for k, t_np in results["numpy"].items():
        t_nb = results.get("numba", {}).get(k)
        if t_nb is None:
            print(f"{k:<24}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}")
        else:
            print(f"{k:<24}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
