"""Hot numeric kernels, each with a numpy and a numba implementation.

The public names at the bottom are bound to one implementation according to
:mod:`frnas._accel`. Both implementations stay importable (``*_np`` and
``*_nb``) so tests and the benchmark can compare them directly.

Grouped batch norm works on a padded stack ``x[M, N, d]`` with a vertex mask
``mask[M, N]``: each graph is normalised over its own real vertices.
"""

import math

import numpy as np

from ._accel import njit, pick


# -- grouped (per-graph) batch norm -----------------------------------------

def group_bn_forward_np(x, mask, eps):
    m = mask[:, :, None]
    n = mask.sum(axis=1)[:, None]
    mean = (x * m).sum(axis=1) / n
    centred = (x - mean[:, None, :]) * m
    var = (centred * centred).sum(axis=1) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std[:, None, :]
    return xhat, mean, var, inv_std


def group_bn_backward_np(gxhat, xhat, inv_std, mask):
    m = mask[:, :, None]
    n = mask.sum(axis=1)[:, None, None]
    g = gxhat * m
    s1 = g.sum(axis=1, keepdims=True)
    s2 = (g * xhat).sum(axis=1, keepdims=True)
    return (g - s1 / n - xhat * s2 / n) * inv_std[:, None, :] * m


def _group_bn_forward_loop(x, mask, eps):
    M, N, d = x.shape
    xhat = np.zeros_like(x)
    mean = np.zeros((M, d))
    var = np.zeros((M, d))
    inv_std = np.zeros((M, d))
    for k in range(M):
        n = 0.0
        for v in range(N):
            if mask[k, v] > 0:
                n += 1.0
                for c in range(d):
                    mean[k, c] += x[k, v, c]
        for c in range(d):
            mean[k, c] /= n
        for v in range(N):
            if mask[k, v] > 0:
                for c in range(d):
                    t = x[k, v, c] - mean[k, c]
                    var[k, c] += t * t
        for c in range(d):
            var[k, c] /= n
            inv_std[k, c] = 1.0 / np.sqrt(var[k, c] + eps)
        for v in range(N):
            if mask[k, v] > 0:
                for c in range(d):
                    xhat[k, v, c] = (x[k, v, c] - mean[k, c]) * inv_std[k, c]
    return xhat, mean, var, inv_std


def _group_bn_backward_loop(gxhat, xhat, inv_std, mask):
    M, N, d = gxhat.shape
    dx = np.zeros_like(gxhat)
    s1 = np.empty(d)
    s2 = np.empty(d)
    for k in range(M):
        n = 0.0
        s1[:] = 0.0
        s2[:] = 0.0
        for v in range(N):
            if mask[k, v] > 0:
                n += 1.0
                for c in range(d):
                    s1[c] += gxhat[k, v, c]
                    s2[c] += gxhat[k, v, c] * xhat[k, v, c]
        for v in range(N):
            if mask[k, v] > 0:
                for c in range(d):
                    dx[k, v, c] = (
                        gxhat[k, v, c] - s1[c] / n - xhat[k, v, c] * s2[c] / n
                    ) * inv_std[k, c]
    return dx


group_bn_forward_nb = njit(_group_bn_forward_loop)
group_bn_backward_nb = njit(_group_bn_backward_loop)


# -- pairwise squared distances ----------------------------------------------

def pairwise_sqdist_np(h):
    diff = h[:, None, :] - h[None, :, :]
    return (diff * diff).sum(axis=-1)


def _pairwise_sqdist_loop(h):
    M, d = h.shape
    out = np.zeros((M, M))
    for i in range(M):
        for j in range(i + 1, M):
            s = 0.0
            for c in range(d):
                t = h[i, c] - h[j, c]
                s += t * t
            out[i, j] = s
            out[j, i] = s
    return out


pairwise_sqdist_nb = njit(_pairwise_sqdist_loop)


# -- Kendall pair counts ------------------------------------------------------

def kendall_counts_np(x, y):
    """Return (concordant, discordant, tied only in x, tied only in y)."""
    iu = np.triu_indices(len(x), 1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    prod = sx * sy
    conc = int(np.count_nonzero(prod > 0))
    disc = int(np.count_nonzero(prod < 0))
    tx = int(np.count_nonzero((sx == 0) & (sy != 0)))
    ty = int(np.count_nonzero((sy == 0) & (sx != 0)))
    return conc, disc, tx, ty


def _kendall_counts_loop(x, y):
    n = x.shape[0]
    conc = 0
    disc = 0
    tx = 0
    ty = 0
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0.0 and dy == 0.0:
                continue
            if dx == 0.0:
                tx += 1
            elif dy == 0.0:
                ty += 1
            elif (dx > 0.0) == (dy > 0.0):
                conc += 1
            else:
                disc += 1
    return conc, disc, tx, ty


kendall_counts_nb = njit(_kendall_counts_loop)


group_bn_forward = pick(group_bn_forward_nb, group_bn_forward_np)
group_bn_backward = pick(group_bn_backward_nb, group_bn_backward_np)
pairwise_sqdist = pick(pairwise_sqdist_nb, pairwise_sqdist_np)
_kendall_counts = pick(kendall_counts_nb, kendall_counts_np)


def kendall_counts(x, y):
    c, d, tx, ty = _kendall_counts(np.ascontiguousarray(x, dtype=np.float64),
                                   np.ascontiguousarray(y, dtype=np.float64))
    return int(c), int(d), int(tx), int(ty)


# -- fused GIN layer ------------------------------------------------------------
#
# y = mask * (gamma * bn(relu(relu(agg @ w1 + b1) @ w2 + b2)) + beta)
# agg[k, j] = (1 + eps) * h[k, j] + sum_i adj[k, i, j] * h[k, i]
#
# bn normalises over all real vertices of the whole stack (one group).
#
# Forward returns the output plus everything backward needs.

def gin_layer_forward_np(h, adj, mask, w1, b1, w2, b2, gamma, beta, eps, bn_eps):
    agg = np.matmul(np.swapaxes(adj, 1, 2), h)
    if eps != 0.0:
        agg += (1.0 + eps) * h
    else:
        agg += h
    a1 = agg @ w1 + b1
    z1 = np.maximum(a1, 0.0)
    a2 = z1 @ w2 + b2
    z2 = np.maximum(a2, 0.0)
    M, N, d = z2.shape
    xhat, mean, var, inv_std = group_bn_forward_np(z2.reshape(1, M * N, d),
                                                   mask.reshape(1, M * N), bn_eps)
    xhat = xhat.reshape(M, N, d)
    y = (gamma * xhat + beta) * mask[:, :, None]
    return y, agg, z1, z2, xhat, mean, var, inv_std


def gin_layer_backward_np(gy, h, adj, mask, w1, w2, gamma, eps, agg, z1, z2, xhat, inv_std):
    m = mask[:, :, None]
    gy = gy * m
    d = gy.shape[-1]
    dgamma = (gy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = gy.reshape(-1, d).sum(axis=0)
    M, N, _ = gy.shape
    dz2 = group_bn_backward_np((gy * gamma).reshape(1, M * N, d), xhat.reshape(1, M * N, d),
                               inv_std, mask.reshape(1, M * N)).reshape(M, N, d)
    da2 = dz2 * (z2 > 0)
    hid = da2.shape[-1]
    dw2 = z1.reshape(-1, z1.shape[-1]).T @ da2.reshape(-1, hid)
    db2 = da2.reshape(-1, hid).sum(axis=0)
    da1 = (da2 @ w2.T) * (z1 > 0)
    dw1 = agg.reshape(-1, agg.shape[-1]).T @ da1.reshape(-1, da1.shape[-1])
    db1 = da1.reshape(-1, da1.shape[-1]).sum(axis=0)
    dagg = da1 @ w1.T
    dh = np.matmul(adj, dagg) + (1.0 + eps) * dagg
    return dh, dw1, db1, dw2, db2, dgamma, dbeta


def _aggregate_loop(h, adj, eps):
    M, N, d = h.shape
    agg = (1.0 + eps) * h
    for k in range(M):
        for i in range(N):
            for j in range(N):
                if adj[k, i, j] != 0.0:
                    a = adj[k, i, j]
                    for c in range(d):
                        agg[k, j, c] += a * h[k, i, c]
    return agg


def _aggregate_t_loop(g, adj, eps):
    M, N, d = g.shape
    out = (1.0 + eps) * g
    for k in range(M):
        for i in range(N):
            for j in range(N):
                if adj[k, i, j] != 0.0:
                    a = adj[k, i, j]
                    for c in range(d):
                        out[k, i, c] += a * g[k, j, c]
    return out


def _gin_layer_forward_loop(h, adj, mask, w1, b1, w2, b2, gamma, beta, eps, bn_eps):
    M, N, _ = h.shape
    hid = w1.shape[1]
    agg = _aggregate_loop(h, adj, eps)
    a1 = np.dot(agg.reshape(M * N, agg.shape[2]), w1)
    for r in range(M * N):
        for c in range(hid):
            v = a1[r, c] + b1[c]
            a1[r, c] = v if v > 0.0 else 0.0
    z1 = a1
    a2 = np.dot(z1, w2)
    out_d = w2.shape[1]
    for r in range(M * N):
        for c in range(out_d):
            v = a2[r, c] + b2[c]
            a2[r, c] = v if v > 0.0 else 0.0
    z2 = a2.reshape(M, N, out_d)
    xhat, mean, var, inv_std = _group_bn_forward_loop(
        a2.reshape(1, M * N, out_d), mask.reshape(1, M * N), bn_eps)
    xhat = xhat.reshape(M, N, out_d)
    y = np.zeros_like(xhat)
    for k in range(M):
        for v in range(N):
            if mask[k, v] > 0:
                for c in range(out_d):
                    y[k, v, c] = gamma[c] * xhat[k, v, c] + beta[c]
    return y, agg, z1.reshape(M, N, hid), z2, xhat, mean, var, inv_std


def _gin_layer_backward_loop(gy, h, adj, mask, w1, w2, gamma, eps, agg, z1, z2, xhat, inv_std):
    M, N, d = gy.shape
    hid = w1.shape[1]
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    gx = np.zeros_like(gy)
    for k in range(M):
        for v in range(N):
            if mask[k, v] > 0:
                for c in range(d):
                    g = gy[k, v, c]
                    dgamma[c] += g * xhat[k, v, c]
                    dbeta[c] += g
                    gx[k, v, c] = g * gamma[c]
    dz2 = _group_bn_backward_loop(gx.reshape(1, M * N, d), xhat.reshape(1, M * N, d),
                                  inv_std, mask.reshape(1, M * N))
    da2 = dz2.reshape(M * N, d)
    z2f = z2.reshape(M * N, d)
    for r in range(M * N):
        for c in range(d):
            if z2f[r, c] <= 0.0:
                da2[r, c] = 0.0
    z1f = z1.reshape(M * N, hid)
    dw2 = np.dot(z1f.T, da2)
    db2 = da2.sum(axis=0)
    da1 = np.dot(da2, w2.T)
    for r in range(M * N):
        for c in range(hid):
            if z1f[r, c] <= 0.0:
                da1[r, c] = 0.0
    aggf = agg.reshape(M * N, agg.shape[2])
    dw1 = np.dot(aggf.T, da1)
    db1 = da1.sum(axis=0)
    dagg = np.dot(da1, w1.T).reshape(M, N, w1.shape[0])
    dh = _aggregate_t_loop(dagg, adj, eps)
    return dh, dw1, db1, dw2, db2, dgamma, dbeta


if group_bn_forward_nb is not None:
    from ._accel import numba as _numba

    _aggregate_loop = _numba.njit(cache=True)(_aggregate_loop)
    _aggregate_t_loop = _numba.njit(cache=True)(_aggregate_t_loop)
    _group_bn_forward_loop = group_bn_forward_nb
    _group_bn_backward_loop = group_bn_backward_nb
    gin_layer_forward_nb = njit(_gin_layer_forward_loop)
    gin_layer_backward_nb = njit(_gin_layer_backward_loop)
else:  # pragma: no cover
    gin_layer_forward_nb = gin_layer_backward_nb = None

gin_layer_forward = pick(gin_layer_forward_nb, gin_layer_forward_np)
gin_layer_backward = pick(gin_layer_backward_nb, gin_layer_backward_np)


# -- Adam (coupled L2 decay) on flat buffers, in place ---------------------------

def adam_update_np(values, grads, m, v, lr, beta1, beta2, eps, weight_decay, step):
    # bias corrections folded into a step size and a scale on sqrt(v)
    g = grads + weight_decay * values if weight_decay else grads
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    s = lr / (1.0 - beta1 ** step)
    k = 1.0 / math.sqrt(1.0 - beta2 ** step)
    values -= s * m / (np.sqrt(v) * k + eps)


def _adam_update_loop(values, grads, m, v, lr, beta1, beta2, eps, weight_decay, step):
    s = lr / (1.0 - beta1 ** step)
    k = 1.0 / math.sqrt(1.0 - beta2 ** step)
    for i in range(values.shape[0]):
        g = grads[i] + weight_decay * values[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * (g * g)
        m[i] = mi
        v[i] = vi
        values[i] -= s * mi / (math.sqrt(vi) * k + eps)


adam_update_nb = njit(_adam_update_loop)
adam_update = pick(adam_update_nb, adam_update_np)
