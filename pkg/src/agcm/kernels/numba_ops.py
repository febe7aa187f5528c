"""Numba-compiled twins of the numpy kernels.

Loops are written single-threaded and in the same accumulation order as the
numpy backend, so results stay deterministic for a fixed seed regardless of
which backend is active.  fastmath is off: the gradient checks rely on
IEEE-faithful double arithmetic.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def leaky_relu_fwd(x, slope):
    out = np.empty_like(x)
    flat = x.ravel()
    oflat = out.ravel()
    for i in range(flat.size):
        v = flat[i]
        oflat[i] = v if v >= 0.0 else slope * v
    return out


@njit(cache=True)
def leaky_relu_bwd(x, gout, slope):
    gin = np.empty_like(x)
    xf = x.ravel()
    gf = gout.ravel()
    of = gin.ravel()
    for i in range(xf.size):
        of[i] = gf[i] if xf[i] >= 0.0 else slope * gf[i]
    return gin


@njit(cache=True)
def softmax_fwd(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            e = np.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s
    return out


@njit(cache=True)
def softmax_bwd(y, gout):
    n, k = y.shape
    gin = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += y[i, j] * gout[i, j]
        for j in range(k):
            gin[i, j] = y[i, j] * (gout[i, j] - dot)
    return gin


@njit(cache=True)
def layernorm_fwd(x, gamma, beta, eps):
    n, k = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty((n, 1))
    for i in range(n):
        mu = 0.0
        for j in range(k):
            mu += x[i, j]
        mu /= k
        var = 0.0
        for j in range(k):
            d = x[i, j] - mu
            var += d * d
        var /= k
        r = 1.0 / np.sqrt(var + eps)
        rstd[i, 0] = r
        for j in range(k):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def layernorm_bwd(xhat, rstd, gamma, gout):
    n, k = xhat.shape
    gx = np.empty_like(xhat)
    ggamma = np.zeros(k)
    gbeta = np.zeros(k)
    for i in range(n):
        mean_gh = 0.0
        mean_ghh = 0.0
        for j in range(k):
            gh = gout[i, j] * gamma[j]
            mean_gh += gh
            mean_ghh += gh * xhat[i, j]
            ggamma[j] += gout[i, j] * xhat[i, j]
            gbeta[j] += gout[i, j]
        mean_gh /= k
        mean_ghh /= k
        r = rstd[i, 0]
        for j in range(k):
            gh = gout[i, j] * gamma[j]
            gx[i, j] = r * (gh - mean_gh - xhat[i, j] * mean_ghh)
    return gx, ggamma, gbeta


@njit(cache=True)
def window_mean_fwd(s, h, w, win):
    b = s.shape[0]
    out = np.empty_like(s)
    rlo = (win - 1) // 2
    rhi = win // 2
    for ib in range(b):
        for r in range(h):
            r0 = max(r - rlo, 0)
            r1 = min(r + rhi, h - 1)
            for c in range(w):
                c0 = max(c - rlo, 0)
                c1 = min(c + rhi, w - 1)
                acc = 0.0
                cnt = 0
                for rr in range(r0, r1 + 1):
                    for cc in range(c0, c1 + 1):
                        acc += s[ib, rr * w + cc]
                        cnt += 1
                out[ib, r * w + c] = acc / cnt
    return out


@njit(cache=True)
def window_mean_bwd(gout, h, w, win):
    b = gout.shape[0]
    gin = np.zeros_like(gout)
    rlo = (win - 1) // 2
    rhi = win // 2
    for ib in range(b):
        for r in range(h):
            r0 = max(r - rlo, 0)
            r1 = min(r + rhi, h - 1)
            for c in range(w):
                c0 = max(c - rlo, 0)
                c1 = min(c + rhi, w - 1)
                cnt = (r1 - r0 + 1) * (c1 - c0 + 1)
                share = gout[ib, r * w + c] / cnt
                for rr in range(r0, r1 + 1):
                    for cc in range(c0, c1 + 1):
                        gin[ib, rr * w + cc] += share
    return gin


@njit(cache=True)
def block_mean(m, sy, sx):
    h, w = m.shape
    hp = h // sy
    wp = w // sx
    out = np.empty((hp, wp))
    for r in range(hp):
        for c in range(wp):
            acc = 0.0
            for dy in range(sy):
                for dx in range(sx):
                    acc += m[r * sy + dy, c * sx + dx]
            out[r, c] = acc / (sy * sx)
    return out


@njit(cache=True)
def bce_fwd(p, t, eps):
    out = np.empty_like(p)
    pf = p.ravel()
    tf = t.ravel()
    of = out.ravel()
    for i in range(pf.size):
        pc = min(max(pf[i], eps), 1.0 - eps)
        of[i] = -(tf[i] * np.log(pc) + (1.0 - tf[i]) * np.log(1.0 - pc))
    return out


@njit(cache=True)
def bce_bwd(p, t, gout, eps):
    gin = np.empty_like(p)
    pf = p.ravel()
    tf = t.ravel()
    gf = gout.ravel()
    of = gin.ravel()
    for i in range(pf.size):
        if pf[i] > eps and pf[i] < 1.0 - eps:
            of[i] = (pf[i] - tf[i]) / (pf[i] * (1.0 - pf[i])) * gf[i]
        else:
            of[i] = 0.0
    return gin


@njit(cache=True)
def adam_step(p, g, m, v, lr, b1, b2, eps, b1t, b2t):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        mf[i] = b1 * mf[i] + (1.0 - b1) * gf[i]
        vf[i] = b2 * vf[i] + (1.0 - b2) * gf[i] * gf[i]
        mhat = mf[i] / (1.0 - b1t)
        vhat = vf[i] / (1.0 - b2t)
        pf[i] -= lr * mhat / (np.sqrt(vhat) + eps)


@njit(cache=True)
def disk_union_map(h, w, cxs, cys, radius, falloff):
    out = np.zeros((h, w))
    for i in range(len(cxs)):
        cx = cxs[i]
        cy = cys[i]
        for r in range(h):
            for c in range(w):
                d = np.sqrt((c - cx) ** 2 + (r - cy) ** 2)
                if falloff > 0.0:
                    val = (radius + falloff - d) / falloff
                    val = min(max(val, 0.0), 1.0)
                else:
                    val = 1.0 if d <= radius else 0.0
                if val > out[r, c]:
                    out[r, c] = val
    return out
