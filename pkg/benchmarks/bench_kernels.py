"""Compare the compiled and pure-numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--rays N] [--samples S] [--repeat R]
"""

import argparse
import time

import numpy as np

from rigrefine._native import compiled_backend, python_backend
from rigrefine.field import VoxelField, ray_box_bounds, stratified_samples
from rigrefine.mesh import build_bvh, extract_isosurface


def _timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def make_problem(n_rays, n_samples, seed=0):
    rng = np.random.default_rng(seed)
    fld = VoxelField((-4, -4, -1), (4, 4, 3), resolutions=(16, 32, 64), n_cameras=1)
    fld.grid[:] = rng.normal(0, 0.3, fld.grid.size)
    o = rng.uniform(-1, 1, (n_rays, 3))
    d = rng.normal(size=(n_rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far, _ = ray_box_bounds(o, d, fld.lo, fld.hi)
    tv = stratified_samples(near, far, n_samples, rng.random((n_rays, n_samples)))
    app = np.zeros((n_rays, 3))
    bg = np.full(3, 0.5)
    return fld, o, d, far, tv, app, bg


def bench_render(backend, prob, repeat):
    fld, o, d, far, tv, app, bg = prob
    args = (*fld.kernel_args(), o, d, tv, far, app, bg, 0.0)
    fwd = _timeit(lambda: backend.render_forward(*args), repeat)
    n = o.shape[0]
    g_grid = np.zeros_like(fld.grid)

    def bwd():
        backend.render_backward(*fld.kernel_args(), o, d, tv, far, app, bg, np.ones((n, 3)), np.ones(n), np.zeros(n),
                                g_grid, np.zeros(3), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), 0.0)

    return fwd, _timeit(bwd, repeat)


def bench_adam(backend, n, repeat):
    rng = np.random.default_rng(1)
    p, g = rng.normal(size=n), rng.normal(size=n)
    m, v = np.zeros(n), np.zeros(n)
    return _timeit(lambda: backend.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1), repeat)


def bench_p2m(backend, n_points, repeat):
    mesh = extract_isosurface(lambda p: np.linalg.norm(p, axis=1), (-2, -2, -2), (2, 2, 2), 1.0, 24)
    bvh = build_bvh(mesh.triangles())
    pts = np.random.default_rng(2).uniform(-2, 2, (n_points, 3))
    return _timeit(lambda: backend.point_mesh_dist2_bvh(pts, bvh.tris, bvh.node_lo, bvh.node_hi, bvh.node_left,
                                                        bvh.node_right, bvh.node_start, bvh.node_count), repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=2048)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = [("python", python_backend)]
    if compiled_backend is not None:
        backends.insert(0, ("compiled", compiled_backend))
    else:
        print("compiled backend not built; timing the numpy fallback only")
    prob = make_problem(args.rays, args.samples)
    rows = {}
    for name, be in backends:
        fwd, bwd = bench_render(be, prob, args.repeat)
        rows[name] = {
            "render_forward": fwd,
            "render_backward": bwd,
            "adam_update(2M)": bench_adam(be, 2_000_000, args.repeat),
            "p2m_bvh": bench_p2m(be, args.points, args.repeat),
        }
    print(f"{'kernel':<18}" + "".join(f"{n:>12}" for n, _ in backends) + ("     speedup" if len(backends) == 2 else ""))
    for k in rows[backends[0][0]]:
        vals = [rows[n][k] for n, _ in backends]
        line = f"{k:<18}" + "".join(f"{v * 1e3:>10.1f}ms" for v in vals)
        if len(vals) == 2:
            line += f"{vals[1] / vals[0]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
