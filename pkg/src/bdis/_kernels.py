"""Compiled per-patch kernels shared by the search, window and fusion stages.

Each patch is described by its mean-normalized template (flattened row-major),
the template validity, the horizontal-gradient Jacobian and the sample grid
``xs`` (columns) x ``ys`` (rows) in level coordinates. The right image is read
at ``(xs[j] + u, ys[i])``.
"""
import numpy as np
from numba import njit, prange

# LK status codes
CONVERGED = 0
MAX_ITER = 1
OUT_OF_IMAGE = 2
HOPELESS = 3
DEGENERATE = 4


@njit(cache=True, inline="always")
def _sample(rd, rv, x, y):
    h, w = rd.shape
    if x < 0.0 or x > w - 1 or y < 0.0 or y > h - 1:
        return 0.0, False
    x0 = min(int(x), w - 2) if w > 1 else 0
    y0 = min(int(y), h - 2) if h > 1 else 0
    ax = x - x0
    ay = y - y0
    x1 = x0 + 1 if w > 1 else 0
    if ay == 0.0:
        ok = (rv[y0, x0] or ax == 1.0) and (rv[y0, x1] or ax == 0.0)
        return (1.0 - ax) * rd[y0, x0] + ax * rd[y0, x1], ok
    y1 = y0 + 1
    top = (1.0 - ax) * rd[y0, x0] + ax * rd[y0, x1]
    bot = (1.0 - ax) * rd[y1, x0] + ax * rd[y1, x1]
    ok = ((rv[y0, x0] or (ax == 1.0 or ay == 1.0)) and (rv[y0, x1] or (ax == 0.0 or ay == 1.0))
          and (rv[y1, x0] or ax == 1.0) and (rv[y1, x1] or ax == 0.0))
    return (1.0 - ay) * top + ay * bot, ok


@njit(cache=True)
def sum_squares(a):
    """Sequential row-major sum of squares, the order the level kernel uses."""
    acc = 0.0
    for v in a.ravel():
        acc += v * v
    return acc


@njit(cache=True)
def _finish(n, s_t, s_r, s_j, s_dd, s_jd, s_jj, min_count):
    # d = t - r; re-centering both sides over the n joint pixels gives
    # sum((d - mean d)^2) and sum(J (d - mean d)) from the raw sums.
    if n < min_count or n == 0:
        return np.inf, 0.0, 0.0, n
    md = (s_t - s_r) / n
    sse = s_dd - n * md * md
    if sse < 0.0:
        sse = 0.0
    return sse / n, s_jd - md * s_j, s_jj, n


@njit(cache=True)
def eval_residual(rd, rv, tmpl, tvalid, jac, xs, ys, u, min_count):
    """Mean-normalized residual of the template against the right image at ``u``.

    Returns ``(mse, numerator, hessian, count)`` where the LK update is
    ``numerator / hessian``. Both sides are re-centred over the pixels valid in
    template and right sample alike; ``count < min_count`` means unusable.
    """
    size = xs.shape[0]
    n = 0
    s_t = s_r = s_j = s_dd = s_jd = s_jj = 0.0
    for i in range(ys.shape[0]):
        y = ys[i]
        for j in range(size):
            k = i * size + j
            if not tvalid[k]:
                continue
            val, ok = _sample(rd, rv, xs[j] + u, y)
            if ok:
                t = tmpl[k]
                jk = jac[k]
                d = t - val
                n += 1
                s_t += t
                s_r += val
                s_j += jk
                s_dd += d * d
                s_jd += jk * d
                s_jj += jk * jk
    return _finish(n, s_t, s_r, s_j, s_dd, s_jd, s_jj, min_count)


@njit(cache=True)
def eval_aligned(rd, rv, tmpl, tvalid, jac, x0, y0, size, u, min_count):
    """``eval_residual`` for a patch on integer pixels ``(x0 + j, y0 + i)``.

    Every sample shares the same fractional offset, so the interpolation
    weight is constant over the patch.
    """
    h, w = rd.shape
    xf = x0 + u
    base = int(np.floor(xf))
    a = xf - base
    n = 0
    s_t = s_r = s_j = s_dd = s_jd = s_jj = 0.0
    for i in range(size):
        y = y0 + i
        for j in range(size):
            k = i * size + j
            if not tvalid[k]:
                continue
            c = base + j
            if a == 0.0:
                if c < 0 or c > w - 1 or not rv[y, c]:
                    continue
                val = rd[y, c]
            else:
                if c < 0 or c + 1 > w - 1 or not (rv[y, c] and rv[y, c + 1]):
                    continue
                val = rd[y, c] + a * (rd[y, c + 1] - rd[y, c])
            t = tmpl[k]
            jk = jac[k]
            d = t - val
            n += 1
            s_t += t
            s_r += val
            s_j += jk
            s_dd += d * d
            s_jd += jk * d
            s_jj += jk * jk
    return _finish(n, s_t, s_r, s_j, s_dd, s_jd, s_jj, min_count)


@njit(cache=True)
def _eval(rd, rv, tmpl, tvalid, jac, xs, ys, u, min_count, aligned):
    if aligned:
        return eval_aligned(rd, rv, tmpl, tvalid, jac, int(xs[0]), int(ys[0]), xs.shape[0], u,
                            min_count)
    return eval_residual(rd, rv, tmpl, tvalid, jac, xs, ys, u, min_count)


@njit(cache=True)
def lk_search(rd, rv, tmpl, tvalid, jac, hessian, xs, ys, u_init, max_iter,
              update_eps, good_mse, hopeless_ratio, min_improvement, min_count, aligned=False):
    """1-D inverse-compositional LK for one patch.

    Returns ``(u, status, iterations, final_mse, initial_mse)``. The search
    stops when the update drops below ``update_eps``, when the mean squared
    residual drops below ``good_mse``, or when one iteration improves the
    residual by less than ``min_improvement`` (relative). A step that increases the residual is undone. Any stop whose
    final relative residual exceeds ``hopeless_ratio`` is reported HOPELESS.
    """
    n_t = 0
    energy = 0.0
    for k in range(tmpl.shape[0]):
        if tvalid[k]:
            n_t += 1
            energy += tmpl[k] * tmpl[k]
    if n_t == 0 or energy <= 0.0:
        return u_init, DEGENERATE, 0, np.inf, np.inf
    energy /= n_t

    u = u_init
    best_u = u
    best_mse = np.inf
    prev_mse = np.inf
    init_mse = np.inf
    status = MAX_ITER
    it = 0
    while it < max_iter:
        mse, num, hess_j, cnt = _eval(rd, rv, tmpl, tvalid, jac, xs, ys, u, min_count, aligned)
        it += 1
        if cnt < min_count:
            status = OUT_OF_IMAGE
            break
        if it == 1:
            init_mse = mse
        if mse > best_mse:
            u = best_u
            status = CONVERGED
            break
        best_u = u
        best_mse = mse
        if prev_mse < np.inf and prev_mse > 0.0 and (prev_mse - mse) / prev_mse < min_improvement:
            status = CONVERGED
            break
        prev_mse = mse
        h = hessian if cnt == n_t else hess_j
        if h <= 0.0:
            status = DEGENERATE
            break
        delta = num / h
        u += delta
        if abs(delta) < update_eps or mse < good_mse:
            status = CONVERGED
            break

    if status == OUT_OF_IMAGE or status == DEGENERATE:
        return u, status, it, np.inf, init_mse
    final_mse, _, _, cnt = _eval(rd, rv, tmpl, tvalid, jac, xs, ys, u, min_count, aligned)
    if cnt < min_count or final_mse > best_mse:
        u = best_u
        final_mse = best_mse
    if status == CONVERGED and final_mse / energy > hopeless_ratio:
        status = HOPELESS
    return u, status, it, final_mse, init_mse


@njit(cache=True)
def window_residuals(rd, rv, tmpl, tvalid, jac, xs, ys, u, offsets, min_count, out_res, out_ok,
                     aligned=False):
    for m in range(offsets.shape[0]):
        mse, _, _, cnt = _eval(rd, rv, tmpl, tvalid, jac, xs, ys, u + offsets[m], min_count,
                               aligned)
        out_ok[m] = cnt >= min_count
        out_res[m] = mse if out_ok[m] else np.inf


def _level_impl(ld, lv, grad, rd, rv, px0, py0, size, u_init, max_iter, update_eps,
                good_mse, hopeless_ratio, min_improvement, min_valid_ratio, hess_eps,
                offsets, out_u, out_status, out_iter, out_res, out_wres, out_wok, out_vfrac):
    """Search and window-sample every grid patch of one level (integer-aligned patches)."""
    npx = size * size
    base = np.arange(size).astype(np.float64)
    for p in prange(px0.shape[0]):
        x0 = px0[p]
        y0 = py0[p]
        tmpl = np.empty(npx)
        tvalid = np.empty(npx, dtype=np.bool_)
        jac = np.empty(npx)
        n = 0
        s = 0.0
        for i in range(size):
            for j in range(size):
                k = i * size + j
                ok = lv[y0 + i, x0 + j]
                tvalid[k] = ok
                tmpl[k] = ld[y0 + i, x0 + j]
                jac[k] = grad[y0 + i, x0 + j]
                if ok:
                    n += 1
                    s += tmpl[k]
        out_vfrac[p] = n / npx
        for m in range(offsets.shape[0]):
            out_wok[p, m] = False
            out_wres[p, m] = np.inf
        if n / npx < min_valid_ratio:
            out_u[p] = u_init[p]
            out_status[p] = OUT_OF_IMAGE
            out_iter[p] = 0
            out_res[p] = np.inf
            continue
        mean = s / n
        hess = 0.0
        for k in range(npx):
            if tvalid[k]:
                tmpl[k] -= mean
                hess += jac[k] * jac[k]
            else:
                tmpl[k] = 0.0
        if hess < hess_eps:
            out_u[p] = u_init[p]
            out_status[p] = DEGENERATE
            out_iter[p] = 0
            out_res[p] = np.inf
            continue
        xs = base + x0
        ys = base + y0
        min_count = max(1, int(np.ceil(min_valid_ratio * n)))
        u, status, it, fres, _ = lk_search(rd, rv, tmpl, tvalid, jac, hess, xs, ys, u_init[p],
                                           max_iter, update_eps, good_mse, hopeless_ratio,
                                           min_improvement, min_count, True)
        out_u[p] = u
        out_status[p] = status
        out_iter[p] = it
        out_res[p] = fres
        if status == CONVERGED:
            window_residuals(rd, rv, tmpl, tvalid, jac, xs, ys, u, offsets, min_count,
                             out_wres[p], out_wok[p], True)


level_search = njit(cache=True)(_level_impl)
level_search_parallel = njit(cache=True, parallel=True)(_level_impl)


@njit(cache=True)
def fuse_patches(h, w, px0, py0, size, u, prob, sigma2, mask, keep):
    """Accumulate probability- and mask-weighted patch disparities per pixel.

    Returns per-pixel sums ``(sum_w, sum_wu, sum_wp, sum_w2s2)``.
    """
    sw = np.zeros((h, w))
    swu = np.zeros((h, w))
    swp = np.zeros((h, w))
    sws = np.zeros((h, w))
    for p in range(px0.shape[0]):
        if not keep[p]:
            continue
        x0 = px0[p]
        y0 = py0[p]
        up = u[p]
        pp = prob[p]
        sp = sigma2[p]
        for i in range(size):
            for j in range(size):
                wt = pp * mask[i, j]
                sw[y0 + i, x0 + j] += wt
                swu[y0 + i, x0 + j] += wt * up
                swp[y0 + i, x0 + j] += wt * pp
                sws[y0 + i, x0 + j] += wt * wt * sp
    return sw, swu, swp, sws
