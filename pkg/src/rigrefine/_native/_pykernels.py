"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; selected
automatically when the extension is unavailable. Gradient buffers passed in
are accumulated into, never overwritten.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


# --------------------------------------------------------------------------
# field lookup
# --------------------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _trilinear(grid, offsets, res, lo, hi, pts, want_grad):
    """Summed features (P,4), inside mask (P,), corner indices/weights per level, spatial grads (P,4,3)."""
    p = pts.shape[0]
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    feats = np.zeros((p, 4))
    dfdx = np.zeros((p, 4, 3)) if want_grad else None
    corners = []
    span = hi - lo
    res = np.asarray(res, dtype=np.int64).reshape(-1, 3)
    for lvl in range(res.shape[0]):
        rx, ry, rz = (int(x) for x in res[lvl])
        scale = (res[lvl] - 1) / span
        g = (pts - lo) * scale
        i0 = np.clip(np.floor(g).astype(np.int64), 0, res[lvl] - 2)
        fr = g - i0
        lvl_grid = grid[offsets[lvl] : offsets[lvl] + rx * ry * rz * 4].reshape(rx, ry, rz, 4)
        idx_list, w_list = [], []
        for dx in (0, 1):
            wx = fr[:, 0] if dx else 1.0 - fr[:, 0]
            for dy in (0, 1):
                wy = fr[:, 1] if dy else 1.0 - fr[:, 1]
                for dz in (0, 1):
                    wz = fr[:, 2] if dz else 1.0 - fr[:, 2]
                    ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    w = wx * wy * wz
                    f = lvl_grid[ix, iy, iz]
                    feats += w[:, None] * f
                    flat = offsets[lvl] + ((ix * ry + iy) * rz + iz) * 4
                    idx_list.append(flat)
                    w_list.append(w)
                    if want_grad:
                        sx = 1.0 if dx else -1.0
                        sy = 1.0 if dy else -1.0
                        sz = 1.0 if dz else -1.0
                        dfdx[:, :, 0] += (sx * wy * wz * scale[0])[:, None] * f
                        dfdx[:, :, 1] += (sy * wx * wz * scale[1])[:, None] * f
                        dfdx[:, :, 2] += (sz * wx * wy * scale[2])[:, None] * f
        corners.append((np.stack(idx_list, 1), np.stack(w_list, 1)))
    feats[~inside] = 0.0
    if want_grad:
        dfdx[~inside] = 0.0
    return feats, inside, corners, dfdx


def sample_points(grid, offsets, res, lo, hi, density_scale, pts, app):
    """Decoded (sigma (P,), rgb (P,3)) at points; ``app`` (P,3) color-logit offsets."""
    pts = np.ascontiguousarray(pts, dtype=float)
    feats, inside, _, _ = _trilinear(grid, offsets, res, lo, hi, pts, False)
    sigma = np.where(inside, _softplus(density_scale * feats[:, 0]), 0.0)
    rgb = _sigmoid(feats[:, 1:] + app)
    return sigma, rgb


def _deltas(tvals, far):
    d = np.empty_like(tvals)
    d[:, :-1] = tvals[:, 1:] - tvals[:, :-1]
    d[:, -1] = far - tvals[:, -1]
    return np.maximum(d, 0.0)


def _forward_core(grid, offsets, res, lo, hi, density_scale, origins, dirs, tvals, far, app, want_grad, t_stop=0.0):
    n, s = tvals.shape
    pts = (origins[:, None, :] + tvals[..., None] * dirs[:, None, :]).reshape(-1, 3)
    feats, inside, corners, dfdx = _trilinear(grid, offsets, res, lo, hi, pts, want_grad)
    z = density_scale * feats[:, 0]
    sigma = np.where(inside, _softplus(z), 0.0).reshape(n, s)
    logits = feats[:, 1:].reshape(n, s, 3) + app[:, None, :]
    rgb = _sigmoid(logits)
    delta = _deltas(tvals, far)
    trans_step = np.exp(-sigma * delta)
    trans = np.ones((n, s + 1))
    trans[:, 1:] = np.cumprod(trans_step, axis=1)
    if t_stop > 0.0:
        # samples reached with transmittance below t_stop are dropped (early termination)
        dead = trans[:, :-1] < t_stop
        if np.any(dead):
            sigma = np.where(dead, 0.0, sigma)
            inside = inside & ~dead.reshape(-1)
            trans_step = np.where(dead, 1.0, trans_step)
            trans[:, 1:] = np.cumprod(trans_step, axis=1)
    alpha = 1.0 - trans_step
    w = trans[:, :-1] * alpha
    cache = dict(pts=pts, feats=feats, inside=inside, corners=corners, dfdx=dfdx, z=z, sigma=sigma,
                 rgb=rgb, delta=delta, trans=trans, w=w, alpha=alpha)
    return cache


def render_forward(grid, offsets, res, lo, hi, density_scale, origins, dirs, tvals, far, app, bg, t_stop=0.0):
    """Returns color (N,3), opacity (N,), weighted depth sum (N,), residual transmittance (N,).

    Samples reached with transmittance below ``t_stop`` are skipped.
    """
    c = _forward_core(grid, offsets, res, lo, hi, density_scale, origins, dirs, tvals, far, app, False, t_stop)
    w, trans = c["w"], c["trans"]
    t_end = trans[:, -1]
    color = np.sum(w[..., None] * c["rgb"], axis=1) + t_end[:, None] * bg
    opacity = np.sum(w, axis=1)
    wdepth = np.sum(w * tvals, axis=1)
    return color, opacity, wdepth, t_end


def render_backward(grid, offsets, res, lo, hi, density_scale, origins, dirs, tvals, far, app, bg,
                    g_color, g_wdepth, g_opacity, g_grid, g_bg, g_app, g_origin, g_dir, t_stop=0.0):
    """Accumulate gradients of the quadrature into the ``g_*`` buffers."""
    n, s = tvals.shape
    c = _forward_core(grid, offsets, res, lo, hi, density_scale, origins, dirs, tvals, far, app, True, t_stop)
    w, trans, rgb, delta = c["w"], c["trans"], c["rgb"], c["delta"]
    payload = np.einsum("nsc,nc->ns", rgb, g_color) + g_wdepth[:, None] * tvals + g_opacity[:, None]
    t_end = trans[:, -1]
    end_payload = g_color @ bg
    # suffix sums R_i = sum_{j>i} w_j a_j + T_end a_end
    wa = w * payload
    suffix = np.cumsum(wa[:, ::-1], axis=1)[:, ::-1]
    after = np.zeros_like(wa)
    after[:, :-1] = suffix[:, 1:]
    after += (t_end * end_payload)[:, None]
    g_sigma = delta * (trans[:, 1:] * payload - after)
    g_rgb = w[..., None] * g_color[:, None, :]
    g_logit = g_rgb * rgb * (1.0 - rgb)

    g_bg += t_end @ g_color
    g_app += g_logit.sum(axis=1)

    inside = c["inside"]
    df = np.zeros((n * s, 4))
    df[:, 0] = np.where(inside, g_sigma.reshape(-1) * density_scale * _sigmoid(c["z"]), 0.0)
    df[:, 1:] = np.where(inside[:, None], g_logit.reshape(-1, 3), 0.0)
    for idx, wts in c["corners"]:
        for k in range(8):
            contrib = wts[:, k : k + 1] * df
            for ch in range(4):
                np.add.at(g_grid, idx[:, k] + ch, contrib[:, ch])
    g_x = np.einsum("pc,pcd->pd", df, c["dfdx"]).reshape(n, s, 3)
    g_origin += g_x.sum(axis=1)
    g_dir += np.sum(g_x * tvals[..., None], axis=1)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def adam_update(params, grads, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam step ``step`` (1-based) with bias correction."""
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    params -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --------------------------------------------------------------------------
# point to triangle distance
# --------------------------------------------------------------------------


def point_triangle_dist2(p, a, b, c):
    """Squared distance from points p (N,3) to triangles (a, b, c) (N,3 each), elementwise."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    q = np.empty_like(p)
    done = np.zeros(p.shape[0], dtype=bool)

    def take(mask, val):
        sel = mask & ~done
        q[sel] = val[sel] if val.ndim == 2 else val
        done[sel] = True

    take((d1 <= 0) & (d2 <= 0), a)
    take((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)
        take((d6 >= 0) & (d5 <= d6), c)
        w_ac = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w_bc[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        face = a + ab * v[:, None] + ac * w[:, None]
    take(np.ones_like(done), face)
    diff = p - q
    return np.sum(diff * diff, -1)


def point_mesh_dist2_brute(points, tris):
    """Exhaustive min squared distance of each point to all triangles (T,3,3)."""
    points = np.asarray(points, dtype=float)
    out = np.full(points.shape[0], np.inf)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    for i, p in enumerate(points):
        pp = np.broadcast_to(p, a.shape)
        out[i] = np.min(point_triangle_dist2(pp, a, b, c))
    return out


def point_mesh_dist2_bvh(points, tris, node_lo, node_hi, node_left, node_right, node_start, node_count):
    """BVH traversal; identical arithmetic to the brute-force path."""
    points = np.asarray(points, dtype=float)
    out = np.empty(points.shape[0])
    for i, p in enumerate(points):
        best = np.inf
        stack = [0]
        while stack:
            nd = stack.pop()
            d = np.maximum(np.maximum(node_lo[nd] - p, 0.0), p - node_hi[nd])
            if float(d @ d) > best * (1.0 + 1e-12) + 1e-300:
                continue
            if node_count[nd] > 0:
                s0, cnt = node_start[nd], node_count[nd]
                t = tris[s0 : s0 + cnt]
                pp = np.broadcast_to(p, (cnt, 3))
                best = min(best, float(np.min(point_triangle_dist2(pp, t[:, 0], t[:, 1], t[:, 2]))))
            else:
                stack.append(node_right[nd])
                stack.append(node_left[nd])
        out[i] = best
    return out
