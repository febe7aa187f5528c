"""Pure-numpy reference kernels.

Every function here has a numba twin in numba_ops.py with the same
signature and, for the accumulation-order-sensitive kernels (block_mean),
the same summation order, so the two backends agree to the last few ulps.
All arrays are float64.
"""

import numpy as np


def leaky_relu_fwd(x, slope):
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_bwd(x, gout, slope):
    return np.where(x >= 0.0, gout, slope * gout)


def softmax_fwd(x):
    """Row-wise softmax over the last axis of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gout):
    dot = (y * gout).sum(axis=1, keepdims=True)
    return y * (gout - dot)


def layernorm_fwd(x, gamma, beta, eps):
    """Normalize each row of a 2-D array; returns (y, xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gamma + beta, xhat, rstd


def layernorm_bwd(xhat, rstd, gamma, gout):
    n = xhat.shape[1]
    ggamma = (gout * xhat).sum(axis=0)
    gbeta = gout.sum(axis=0)
    gh = gout * gamma
    gx = rstd * (gh - gh.mean(axis=1, keepdims=True)
                 - xhat * (gh * xhat).mean(axis=1, keepdims=True))
    del n
    return gx, ggamma, gbeta


def _window_bounds(i, n, w):
    lo = max(i - (w - 1) // 2, 0)
    hi = min(i + w // 2, n - 1)
    return lo, hi


def window_mean_fwd(s, h, w, win):
    """Mean-filter rows of s, each row viewed as an h x w grid.

    The window at cell (r, c) spans rows [r - (win-1)//2, r + win//2]
    clipped to the grid (same for columns), so win = 1 is the identity.
    """
    if win == 1:
        return s.copy()
    b = s.shape[0]
    grid = s.reshape(b, h, w)
    out = np.zeros_like(grid)
    counts = np.zeros((h, w))
    rlo = (win - 1) // 2
    rhi = win // 2
    for dr in range(-rlo, rhi + 1):
        r0, r1 = max(0, -dr), min(h, h - dr)
        for dc in range(-rlo, rhi + 1):
            c0, c1 = max(0, -dc), min(w, w - dc)
            out[:, r0:r1, c0:c1] += grid[:, r0 + dr:r1 + dr, c0 + dc:c1 + dc]
            counts[r0:r1, c0:c1] += 1.0
    out /= counts
    return out.reshape(b, h * w)


def window_mean_bwd(gout, h, w, win):
    if win == 1:
        return gout.copy()
    b = gout.shape[0]
    counts = np.zeros((h, w))
    rlo = (win - 1) // 2
    rhi = win // 2
    for dr in range(-rlo, rhi + 1):
        r0, r1 = max(0, -dr), min(h, h - dr)
        for dc in range(-rlo, rhi + 1):
            c0, c1 = max(0, -dc), min(w, w - dc)
            counts[r0:r1, c0:c1] += 1.0
    weighted = gout.reshape(b, h, w) / counts
    gin = np.zeros((b, h, w))
    # cell (r2, c2) is inside the window of (r, c) iff r in [r2 - win//2, r2 + (win-1)//2]
    for dr in range(-rhi, rlo + 1):
        r0, r1 = max(0, -dr), min(h, h - dr)
        for dc in range(-rhi, rlo + 1):
            c0, c1 = max(0, -dc), min(w, w - dc)
            gin[:, r0:r1, c0:c1] += weighted[:, r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return gin.reshape(b, h * w)


def block_mean(m, sy, sx):
    """Non-overlapping block average of an (H, W) map.

    Accumulates each block sequentially in row-major order so the result is
    bit-identical to a literal double-loop sum.
    """
    h, w = m.shape
    hp, wp = h // sy, w // sx
    blocks = m.reshape(hp, sy, wp, sx).transpose(0, 2, 1, 3).reshape(hp, wp, sy * sx)
    acc = np.zeros((hp, wp))
    for k in range(sy * sx):
        acc += blocks[:, :, k]
    return acc / (sy * sx)


def bce_fwd(p, t, eps):
    pc = np.clip(p, eps, 1.0 - eps)
    return -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))


def bce_bwd(p, t, gout, eps):
    pc = np.clip(p, eps, 1.0 - eps)
    g = (pc - t) / (pc * (1.0 - pc)) * gout
    # clamp saturates the gradient outside [eps, 1 - eps]
    return np.where((p > eps) & (p < 1.0 - eps), g, 0.0)


def adam_step(p, g, m, v, lr, b1, b2, eps, b1t, b2t):
    """In-place Adam update; b1t/b2t are beta^t for bias correction."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    mhat = m / (1.0 - b1t)
    vhat = v / (1.0 - b2t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def disk_union_map(h, w, cxs, cys, radius, falloff):
    """Union of disks with a linear falloff band.

    Value 1 inside radius, linear ramp to 0 across (radius, radius+falloff],
    combined across centers by pointwise max.  Coordinates are (x, y) with
    x the column and y the row.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for cx, cy in zip(cxs, cys):
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        if falloff > 0.0:
            val = np.clip((radius + falloff - d) / falloff, 0.0, 1.0)
        else:
            val = (d <= radius).astype(np.float64)
        np.maximum(out, val, out=out)
    return out
