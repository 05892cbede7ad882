"""Compiled loops for the memory-bound parts of the tensor ops.

Matrix products and the im2col gather stay in numpy; these kernels cover
the scatters and per-channel reductions that numpy would otherwise do in
several passes.  All loops are serial so results do not depend on thread
count.
"""
import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def col2im(dcols, B, Hp, Wp, C, kh, kw, stride, Ho, Wo):
    dxp = np.zeros((B, Hp, Wp, C), dtype=dcols.dtype)
    r = 0
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                k = 0
                for u in range(kh):
                    for v in range(kw):
                        for c in range(C):
                            dxp[b, i * stride + u, j * stride + v, c] += dcols[r, k]
                            k += 1
                r += 1
    return dxp


@_jit
def maxpool_forward(x, size):
    B, H, W, C = x.shape
    Ho, Wo = H // size, W // size
    out = np.empty((B, Ho, Wo, C), dtype=x.dtype)
    arg = np.empty((B, Ho, Wo, C), dtype=np.int32)
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = x[b, i * size, j * size, c]
                    k = 0
                    for u in range(size):
                        for v in range(size):
                            val = x[b, i * size + u, j * size + v, c]
                            # strict comparison: ties keep the first offset
                            if val > best:
                                best = val
                                k = u * size + v
                    out[b, i, j, c] = best
                    arg[b, i, j, c] = k
    return out, arg


@_jit
def maxpool_backward(g, arg, size, H, W):
    B, Ho, Wo, C = g.shape
    dx = np.zeros((B, H, W, C), dtype=g.dtype)
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    k = arg[b, i, j, c]
                    dx[b, i * size + k // size, j * size + k % size, c] = g[b, i, j, c]
    return dx


@_jit
def channel_moments(x2):
    """Per-column mean and (biased) variance of a [n, C] matrix, two-pass in float64."""
    n, C = x2.shape
    mu = np.zeros(C)
    for r in range(n):
        for c in range(C):
            mu[c] += x2[r, c]
    mu /= n
    var = np.zeros(C)
    for r in range(n):
        for c in range(C):
            d = x2[r, c] - mu[c]
            var[c] += d * d
    var /= n
    return mu, var


@_jit
def bn_apply(x2, mu, inv, gamma, beta):
    n, C = x2.shape
    out = np.empty_like(x2)
    for r in range(n):
        for c in range(C):
            out[r, c] = (x2[r, c] - mu[c]) * inv[c] * gamma[c] + beta[c]
    return out


@_jit
def bn_grad_sums(g2, x2, mu, inv):
    n, C = g2.shape
    gsum = np.zeros(C)
    gxsum = np.zeros(C)
    for r in range(n):
        for c in range(C):
            gsum[c] += g2[r, c]
            gxsum[c] += g2[r, c] * (x2[r, c] - mu[c]) * inv[c]
    return gsum, gxsum


@_jit
def bn_input_grad(g2, x2, mu, inv, scale, gmean, gxmean):
    n, C = g2.shape
    dx = np.empty_like(g2)
    for r in range(n):
        for c in range(C):
            xhat = (x2[r, c] - mu[c]) * inv[c]
            dx[r, c] = (g2[r, c] - gmean[c] - xhat * gxmean[c]) * scale[c]
    return dx


@_jit
def all_finite(a):
    for v in a:
        if not np.isfinite(v):
            return False
    return True
