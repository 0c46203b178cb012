"""Compare the compiled and pure-Python kernel backends.

Times one MLS-MPM substep and one full-frame render on the two-ball synthetic
scene for every available backend, and prints the median wall time per call
and the speedup over the Python fallback.

    python3 benchmarks/bench_kernels.py --particles 10000 --threads 1
"""
import argparse
import os
import statistics
import time

from splatsim import kernels, mpm
from splatsim.mpm import GridConfig, Material
from splatsim.render import render
from splatsim.synthetic import ball_scene, ring_cameras


def median_time(fn, repeats):
    fn()  # warm-up (imports, first-touch allocations)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench(backend, scene, camera, steps, repeats):
    materials = {1: Material(initial_velocity=(2.0, 0.0, 0.0)), 2: Material(initial_velocity=(1.0, -1.0, 0.0))}
    state = mpm.init_sim(scene, materials, GridConfig(64, 3.0 / 64), dt=2e-5, gravity=(0.0, 0.0, 0.0))
    step = median_time(lambda: mpm.simulate(state, steps, backend=backend), repeats) / steps
    frame = median_time(lambda: render(scene, camera, backend=backend), repeats)
    return step, frame


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=10_000, help="total Gaussians (split over two balls)")
    ap.add_argument("--steps", type=int, default=5, help="substeps per timed MPM sample")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", type=int, default=256, help="render width and height")
    ap.add_argument("--threads", type=int, default=None, help="pin SPLATSIM_NUM_THREADS")
    args = ap.parse_args()
    if args.threads:
        os.environ["SPLATSIM_NUM_THREADS"] = str(args.threads)

    scene = ball_scene(args.particles // 2, n_background=0)
    camera = ring_cameras(1, width=args.size, height=args.size, focal=280.0 * args.size / 256)[0]
    print(f"{len(scene)} particles/splats, {args.size}x{args.size} image, {kernels.num_threads()} thread(s)")
    print(f"{'backend':>8}  {'mpm step':>12}  {'render':>12}  {'step speedup':>12}  {'render speedup':>14}")
    base = None
    for backend in ["python"] + [b for b in kernels.available_backends() if b != "python"]:
        step, frame = bench(backend, scene, camera, args.steps, args.repeats)
        base = base or (step, frame)
        print(f"{backend:>8}  {step * 1e3:9.2f} ms  {frame * 1e3:9.2f} ms  "
              f"{base[0] / step:11.1f}x  {base[1] / frame:13.1f}x")
    if "cython" not in kernels.available_backends():
        print("compiled backend not built; install without SPLATSIM_NO_EXT to compare")


if __name__ == "__main__":
    main()
