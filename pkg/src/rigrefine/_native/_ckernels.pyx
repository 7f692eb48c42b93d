# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: voxel-field volume rendering (forward/backward),
fused Adam update and BVH point-to-triangle distance.

Mirrors ``_pykernels``; see that module for the reference semantics.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs, floor, sqrt, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "cython"

cdef enum:
    MAX_LEVELS = 8


cdef inline double _softplus(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        e = exp(-x)
        return 1.0 / (1.0 + e)
    e = exp(x)
    return e / (1.0 + e)


cdef struct Grid:
    const double* data
    long offsets[MAX_LEVELS]
    long res[MAX_LEVELS * 3]
    double scale[MAX_LEVELS * 3]
    int n_levels
    double lo[3]
    double hi[3]


cdef Grid _make_grid(const double[::1] grid, const long[::1] offsets, const long[::1] res,
                     const double[::1] lo, const double[::1] hi) except *:
    cdef Grid g
    cdef int l, a
    if res.shape[0] % 3 or res.shape[0] > 3 * MAX_LEVELS:
        raise ValueError("res must hold 3 resolutions per level, at most MAX_LEVELS levels")
    g.data = &grid[0]
    g.n_levels = res.shape[0] // 3
    for a in range(3):
        g.lo[a] = lo[a]
        g.hi[a] = hi[a]
    for l in range(g.n_levels):
        g.offsets[l] = offsets[l]
        for a in range(3):
            g.res[l * 3 + a] = res[l * 3 + a]
            g.scale[l * 3 + a] = (res[l * 3 + a] - 1) / (hi[a] - lo[a])
    return g


cdef inline bint _inside(Grid* g, double* x) nogil:
    cdef int a
    for a in range(3):
        if not (x[a] >= g.lo[a] and x[a] <= g.hi[a]):
            return 0
    return 1


cdef inline void _lookup(Grid* g, double* x, double* f, double* dfdx, double* gf, double* g_grid) nogil:
    """Summed trilinear features at x.

    f (4) receives the features. If dfdx is not NULL it receives d f / d x (4x3).
    If g_grid is not NULL, gf (4) is scattered into it with the corner weights.
    """
    cdef int l, a, c, dx, dy, dz
    cdef long r, ry, rz, ix, iy, iz, base
    cdef double gc[3]
    cdef double fr[3]
    cdef double wx, wy, wz, w, sx, sy, sz
    cdef long i0[3]
    cdef const double* fv
    for c in range(4):
        f[c] = 0.0
    if dfdx != NULL:
        for c in range(12):
            dfdx[c] = 0.0
    for l in range(g.n_levels):
        ry = g.res[l * 3 + 1]
        rz = g.res[l * 3 + 2]
        for a in range(3):
            r = g.res[l * 3 + a]
            gc[a] = (x[a] - g.lo[a]) * g.scale[l * 3 + a]
            i0[a] = <long>floor(gc[a])
            if i0[a] < 0:
                i0[a] = 0
            if i0[a] > r - 2:
                i0[a] = r - 2
            fr[a] = gc[a] - i0[a]
        for dx in range(2):
            wx = fr[0] if dx else 1.0 - fr[0]
            sx = 1.0 if dx else -1.0
            ix = i0[0] + dx
            for dy in range(2):
                wy = fr[1] if dy else 1.0 - fr[1]
                sy = 1.0 if dy else -1.0
                iy = i0[1] + dy
                for dz in range(2):
                    wz = fr[2] if dz else 1.0 - fr[2]
                    sz = 1.0 if dz else -1.0
                    iz = i0[2] + dz
                    w = wx * wy * wz
                    base = g.offsets[l] + ((ix * ry + iy) * rz + iz) * 4
                    fv = g.data + base
                    for c in range(4):
                        f[c] += w * fv[c]
                    if dfdx != NULL:
                        for c in range(4):
                            dfdx[c * 3 + 0] += sx * wy * wz * g.scale[l * 3 + 0] * fv[c]
                            dfdx[c * 3 + 1] += sy * wx * wz * g.scale[l * 3 + 1] * fv[c]
                            dfdx[c * 3 + 2] += sz * wx * wy * g.scale[l * 3 + 2] * fv[c]
                    if g_grid != NULL:
                        for c in range(4):
                            g_grid[base + c] += w * gf[c]


def sample_points(const double[::1] grid, const long[::1] offsets, const long[::1] res,
                  const double[::1] lo, const double[::1] hi, double density_scale,
                  const double[:, ::1] pts, const double[:, ::1] app):
    cdef Grid g = _make_grid(grid, offsets, res, lo, hi)
    cdef Py_ssize_t n = pts.shape[0], i
    cdef int c
    cdef double x[3]
    cdef double f[4]
    sigma_a = np.zeros(n)
    rgb_a = np.zeros((n, 3))
    cdef double[::1] sigma = sigma_a
    cdef double[:, ::1] rgb = rgb_a
    with nogil:
        for i in range(n):
            x[0] = pts[i, 0]
            x[1] = pts[i, 1]
            x[2] = pts[i, 2]
            if _inside(&g, x):
                _lookup(&g, x, f, NULL, NULL, NULL)
                sigma[i] = _softplus(density_scale * f[0])
            else:
                f[1] = 0.0
                f[2] = 0.0
                f[3] = 0.0
            for c in range(3):
                rgb[i, c] = _sigmoid(f[c + 1] + app[i, c])
    return sigma_a, rgb_a


def render_forward(const double[::1] grid, const long[::1] offsets, const long[::1] res,
                   const double[::1] lo, const double[::1] hi, double density_scale,
                   const double[:, ::1] origins, const double[:, ::1] dirs,
                   const double[:, ::1] tvals, const double[::1] far,
                   const double[:, ::1] app, const double[::1] bg, double t_stop=0.0):
    cdef Grid g = _make_grid(grid, offsets, res, lo, hi)
    cdef Py_ssize_t n = tvals.shape[0], s = tvals.shape[1], r, i
    cdef int c
    cdef double x[3]
    cdef double f[4]
    cdef double trans, sigma, delta, alpha, w, ti
    color_a = np.zeros((n, 3))
    opacity_a = np.zeros(n)
    wdepth_a = np.zeros(n)
    tend_a = np.zeros(n)
    cdef double[:, ::1] color = color_a
    cdef double[::1] opacity = opacity_a
    cdef double[::1] wdepth = wdepth_a
    cdef double[::1] tend = tend_a
    with nogil:
        for r in range(n):
            trans = 1.0
            for i in range(s):
                if trans < t_stop:
                    break
                ti = tvals[r, i]
                if i + 1 < s:
                    delta = tvals[r, i + 1] - ti
                else:
                    delta = far[r] - ti
                if delta < 0:
                    delta = 0.0
                for c in range(3):
                    x[c] = origins[r, c] + ti * dirs[r, c]
                if not _inside(&g, x):
                    continue
                _lookup(&g, x, f, NULL, NULL, NULL)
                sigma = _softplus(density_scale * f[0])
                alpha = 1.0 - exp(-sigma * delta)
                w = trans * alpha
                for c in range(3):
                    color[r, c] += w * _sigmoid(f[c + 1] + app[r, c])
                opacity[r] += w
                wdepth[r] += w * ti
                trans = trans * exp(-sigma * delta)
            for c in range(3):
                color[r, c] += trans * bg[c]
            tend[r] = trans
    return color_a, opacity_a, wdepth_a, tend_a


def render_backward(const double[::1] grid, const long[::1] offsets, const long[::1] res,
                    const double[::1] lo, const double[::1] hi, double density_scale,
                    const double[:, ::1] origins, const double[:, ::1] dirs,
                    const double[:, ::1] tvals, const double[::1] far,
                    const double[:, ::1] app, const double[::1] bg,
                    const double[:, ::1] g_color, const double[::1] g_wdepth, const double[::1] g_opacity,
                    double[::1] g_grid, double[::1] g_bg, double[:, ::1] g_app,
                    double[:, ::1] g_origin, double[:, ::1] g_dir, double t_stop=0.0):
    cdef Grid g = _make_grid(grid, offsets, res, lo, hi)
    cdef Py_ssize_t n = tvals.shape[0], s = tvals.shape[1], r, i, s_used
    cdef int c, k
    cdef double x[3]
    cdef double f[4]
    cdef double gf[4]
    cdef double dfdx[12]
    cdef double gx[3]
    cdef double trans, delta, alpha, ti, after, payload, end_payload, gs, z, sg, col, glog
    cdef double* buf = <double*>malloc(s * 8 * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    # per-sample buffers: sigma, delta, trans_before, w, rgb(3), z
    cdef double* b_sigma = buf
    cdef double* b_delta = buf + s
    cdef double* b_trans = buf + 2 * s
    cdef double* b_w = buf + 3 * s
    cdef double* b_rgb = buf + 4 * s
    cdef double* b_z = buf + 7 * s
    try:
        with nogil:
            for r in range(n):
                trans = 1.0
                s_used = s
                for i in range(s):
                    if trans < t_stop:
                        s_used = i
                        break
                    ti = tvals[r, i]
                    if i + 1 < s:
                        delta = tvals[r, i + 1] - ti
                    else:
                        delta = far[r] - ti
                    if delta < 0:
                        delta = 0.0
                    b_delta[i] = delta
                    b_trans[i] = trans
                    for c in range(3):
                        x[c] = origins[r, c] + ti * dirs[r, c]
                    if not _inside(&g, x):
                        b_sigma[i] = 0.0
                        b_w[i] = 0.0
                        b_z[i] = 0.0
                        for c in range(3):
                            b_rgb[3 * i + c] = 0.0
                        continue
                    _lookup(&g, x, f, NULL, NULL, NULL)
                    z = density_scale * f[0]
                    b_z[i] = z
                    b_sigma[i] = _softplus(z)
                    alpha = 1.0 - exp(-b_sigma[i] * delta)
                    b_w[i] = trans * alpha
                    for c in range(3):
                        b_rgb[3 * i + c] = _sigmoid(f[c + 1] + app[r, c])
                    trans = trans * exp(-b_sigma[i] * delta)
                # trans now holds the residual transmittance
                end_payload = g_color[r, 0] * bg[0] + g_color[r, 1] * bg[1] + g_color[r, 2] * bg[2]
                for c in range(3):
                    g_bg[c] += trans * g_color[r, c]
                after = trans * end_payload
                for i in range(s_used - 1, -1, -1):
                    if b_w[i] == 0.0 and b_sigma[i] == 0.0:
                        continue
                    ti = tvals[r, i]
                    payload = (b_rgb[3 * i] * g_color[r, 0] + b_rgb[3 * i + 1] * g_color[r, 1]
                               + b_rgb[3 * i + 2] * g_color[r, 2] + g_wdepth[r] * ti + g_opacity[r])
                    # transmittance after sample i
                    gs = b_delta[i] * ((b_trans[i] - b_w[i]) * payload - after)
                    after += b_w[i] * payload
                    sg = _sigmoid(b_z[i])
                    gf[0] = gs * density_scale * sg
                    for c in range(3):
                        col = b_rgb[3 * i + c]
                        glog = b_w[i] * g_color[r, c] * col * (1.0 - col)
                        gf[c + 1] = glog
                        g_app[r, c] += glog
                    for c in range(3):
                        x[c] = origins[r, c] + ti * dirs[r, c]
                    _lookup(&g, x, f, dfdx, gf, &g_grid[0])
                    for c in range(3):
                        gx[c] = 0.0
                        for k in range(4):
                            gx[c] += gf[k] * dfdx[k * 3 + c]
                        g_origin[r, c] += gx[c]
                        g_dir[r, c] += ti * gx[c]
    finally:
        free(buf)


def adam_update(double[::1] params, const double[::1] grads, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    cdef Py_ssize_t n = params.shape[0], i
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double gi
    with nogil:
        for i in range(n):
            gi = grads[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            params[i] -= lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


# --------------------------------------------------------------------------
# point to triangle distance
# --------------------------------------------------------------------------


cdef inline double _dot(double* a, double* b) nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef double _pt_tri_d2(const double* p, const double* a, const double* b, const double* c) nogil:
    cdef double ab[3]
    cdef double ac[3]
    cdef double ap[3]
    cdef double bp[3]
    cdef double cp[3]
    cdef double q[3]
    cdef double d1, d2, d3, d4, d5, d6, va, vb, vc, v, w, denom
    cdef int k
    for k in range(3):
        ab[k] = b[k] - a[k]
        ac[k] = c[k] - a[k]
        ap[k] = p[k] - a[k]
        bp[k] = p[k] - b[k]
        cp[k] = p[k] - c[k]
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    if d1 <= 0 and d2 <= 0:
        for k in range(3):
            q[k] = a[k]
    elif d3 >= 0 and d4 <= d3:
        for k in range(3):
            q[k] = b[k]
    elif vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        for k in range(3):
            q[k] = a[k] + v * ab[k]
    elif d6 >= 0 and d5 <= d6:
        for k in range(3):
            q[k] = c[k]
    elif vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        for k in range(3):
            q[k] = a[k] + w * ac[k]
    elif va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        for k in range(3):
            q[k] = b[k] + w * (c[k] - b[k])
    else:
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        for k in range(3):
            q[k] = a[k] + ab[k] * v + ac[k] * w
    for k in range(3):
        q[k] = p[k] - q[k]
    return q[0] * q[0] + q[1] * q[1] + q[2] * q[2]


def point_triangle_dist2(const double[:, ::1] p, const double[:, ::1] a, const double[:, ::1] b,
                         const double[:, ::1] c):
    cdef Py_ssize_t n = p.shape[0], i
    out_a = np.empty(n)
    cdef double[::1] out = out_a
    with nogil:
        for i in range(n):
            out[i] = _pt_tri_d2(&p[i, 0], &a[i, 0], &b[i, 0], &c[i, 0])
    return out_a


def point_mesh_dist2_brute(const double[:, ::1] points, const double[:, :, ::1] tris):
    cdef Py_ssize_t n = points.shape[0], nt = tris.shape[0], i, j
    cdef double best, d
    out_a = np.empty(n)
    cdef double[::1] out = out_a
    with nogil:
        for i in range(n):
            best = INFINITY
            for j in range(nt):
                d = _pt_tri_d2(&points[i, 0], &tris[j, 0, 0], &tris[j, 1, 0], &tris[j, 2, 0])
                if d < best:
                    best = d
            out[i] = best
    return out_a


def point_mesh_dist2_bvh(const double[:, ::1] points, const double[:, :, ::1] tris,
                         const double[:, ::1] node_lo, const double[:, ::1] node_hi,
                         const long[::1] node_left, const long[::1] node_right,
                         const long[::1] node_start, const long[::1] node_count):
    cdef Py_ssize_t n = points.shape[0], i
    cdef long nd, j, top
    cdef double best, d, e, bd
    cdef int k
    cdef long* stack = <long*>malloc(256 * sizeof(long))
    if stack == NULL:
        raise MemoryError()
    out_a = np.empty(n)
    cdef double[::1] out = out_a
    try:
        with nogil:
            for i in range(n):
                best = INFINITY
                top = 0
                stack[top] = 0
                top += 1
                while top > 0:
                    top -= 1
                    nd = stack[top]
                    bd = 0.0
                    for k in range(3):
                        e = node_lo[nd, k] - points[i, k]
                        if points[i, k] - node_hi[nd, k] > e:
                            e = points[i, k] - node_hi[nd, k]
                        if e > 0:
                            bd += e * e
                    if bd > best * (1.0 + 1e-12) + 1e-300:
                        continue
                    if node_count[nd] > 0:
                        for j in range(node_start[nd], node_start[nd] + node_count[nd]):
                            d = _pt_tri_d2(&points[i, 0], &tris[j, 0, 0], &tris[j, 1, 0], &tris[j, 2, 0])
                            if d < best:
                                best = d
                    else:
                        stack[top] = node_right[nd]
                        top += 1
                        stack[top] = node_left[nd]
                        top += 1
                out[i] = best
    finally:
        free(stack)
    return out_a
