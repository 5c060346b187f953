"""Pure-numpy fallback for the compiled attack kernels.

Same signatures and iteration semantics as ``_ckernels``; loops over samples
are vectorized instead. Results agree with the compiled backend to rounding.
"""

import numpy as np

BACKEND = "python"


def _forward(X, W, b, relu, beta):
    pre = X @ W.T + b
    phi = np.maximum(pre, 0.0) if relu else pre
    return pre, phi @ beta


def _loss_dz(z, kind, labels, lin_w):
    m, C = z.shape
    rows = np.arange(m)
    if kind == 0:
        zmax = z.max(axis=1)
        e = np.exp(z - zmax[:, None])
        lse = e.sum(axis=1)
        dz = e / lse[:, None]
        dz[rows, labels] -= 1.0
        loss = zmax + np.log(lse) - z[rows, labels]
    elif kind == 1:
        masked = z.copy()
        masked[rows, labels] = -np.inf
        jstar = np.argmax(masked, axis=1)
        dz = np.zeros_like(z)
        dz[rows, jstar] = 1.0
        dz[rows, labels] = -1.0
        loss = z[rows, jstar] - z[rows, labels]
    else:
        dz = -lin_w
        loss = -(lin_w * z).sum(axis=1)
    return loss, dz


def loss_and_grad(X, W, b, relu, beta, kind, labels, lin_w):
    pre, z = _forward(X, W, b, relu, beta)
    loss, dz = _loss_dz(z, kind, labels, lin_w)
    gphi = dz @ beta.T
    if relu:
        gphi = gphi * (pre > 0.0)
    return loss, gphi @ W


def pgd(X0, delta0, W, b, relu, beta, kind, labels, lin_w, eps, step, iters, norm_kind,
        use_clip, clip_lo, clip_hi, n_threads=1):
    m, d = X0.shape
    delta = delta0.copy()
    x = X0 + delta
    if use_clip:
        x = np.clip(x, clip_lo, clip_hi)
        delta = x - X0
    xadv = np.empty_like(X0)
    best = np.empty(m)
    trace = np.empty((m, iters + 1))
    zero = np.zeros(m, dtype=np.uint8)
    for it in range(iters + 1):
        loss, grad = loss_and_grad(x, W, b, relu, beta, kind, labels, lin_w)
        better = np.ones(m, bool) if it == 0 else loss > best
        best = np.where(better, loss, best)
        xadv[better] = x[better]
        trace[:, it] = best
        if it == iters:
            break
        nrm2 = (grad * grad).sum(axis=1)
        stalled = nrm2 == 0.0
        if it == 0:
            zero[stalled] = 1
        if norm_kind == 0:
            delta = np.clip(delta + step * np.sign(grad), -eps, eps)
        else:
            scale = np.where(stalled, 0.0, step / np.sqrt(np.where(stalled, 1.0, nrm2)))
            delta = delta + scale[:, None] * grad
            nrm = np.sqrt((delta * delta).sum(axis=1))
            over = nrm > eps
            delta[over] *= (eps / nrm[over])[:, None]
        x = X0 + delta
        if use_clip:
            x = np.clip(x, clip_lo, clip_hi)
            delta = x - X0
    return xadv, best, trace, zero
