"""Compare the compiled and pure-Python simulator kernels.

Usage: python benchmarks/bench_sim.py [--frames N] [--repeat R]

Both backends run the same rollout; the script checks that the outputs
are bit-identical and reports the best-of-R wall time for each.
"""
import argparse
import time

import numpy as np

from sawmotion import sim
from sawmotion.motiongen import TaskSpec, generate_reference


def _time_backend(name, robot, init, ref, repeat):
    sim.set_backend(name)
    best = float("inf")
    res = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        res = sim.rollout(robot, init, ref)
        best = min(best, time.perf_counter() - t0)
    return best, res


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--frames", type=int, default=600, help="rollout length (50 frames per second)")
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)

    robot = sim.RobotModel()
    ref = generate_reference(TaskSpec("walk", 0.5, args.frames * 0.02, seed=1))
    init = sim.init_state(robot, ref[0], jitter_seed=0)
    previous = sim.BACKEND
    results = {}
    try:
        for name in sim.available_backends():
            results[name] = _time_backend(name, robot, init, ref, args.repeat)
    finally:
        sim.set_backend(previous)

    for name, (t, _) in sorted(results.items()):
        print(f"{name:8s} {t * 1e3:9.3f} ms / rollout ({len(ref)} frames)")
    if "cython" in results:
        a, b = results["cython"][1], results["python"][1]
        same = a.executed == b.executed and a.fall_frame == b.fall_frame and np.array_equal(a.heights, b.heights)
        print(f"speedup  {results['python'][0] / results['cython'][0]:9.1f}x   bit-identical: {same}")
    else:
        print("compiled kernel not built; only the Python fallback was timed")


if __name__ == "__main__":
    main()
