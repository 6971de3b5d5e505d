"""numba-compiled twins of the kernels in ``_numpy``."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def contrastive_loss_grad(z, groups, segments, tau):
    n = z.shape[0]
    s = (z @ z.T) / tau
    w = np.zeros((n, n))
    value = 0.0
    for i in range(n):
        m = -np.inf
        npos = 0
        for a in range(n):
            if a != i and segments[a] == segments[i]:
                if s[i, a] > m:
                    m = s[i, a]
                if groups[a] == groups[i]:
                    npos += 1
        if npos == 0:
            continue
        denom = 0.0
        gap = 0.0
        for a in range(n):
            if a != i and segments[a] == segments[i]:
                ea = math.exp(s[i, a] - m)
                w[i, a] = ea
                denom += ea
                if groups[a] == groups[i]:
                    gap += m - s[i, a]
        value += math.log(denom) + gap / npos
        for a in range(n):
            if a != i and segments[a] == segments[i]:
                w[i, a] /= denom
                if groups[a] == groups[i]:
                    w[i, a] -= 1.0 / npos
    grad = ((w + w.T) @ z) / tau
    return value, grad


@njit(**_JIT)
def normalize_rows(e):
    n, d = e.shape
    z = np.empty_like(e)
    norms = np.empty(n)
    for i in range(n):
        acc = 0.0
        for k in range(d):
            acc += e[i, k] * e[i, k]
        r = math.sqrt(acc)
        norms[i] = r
        for k in range(d):
            z[i, k] = e[i, k] / r
    return z, norms


@njit(**_JIT)
def normalize_backward(z, norms, gz):
    n, d = z.shape
    out = np.empty_like(gz)
    for i in range(n):
        dot = 0.0
        for k in range(d):
            dot += z[i, k] * gz[i, k]
        for k in range(d):
            out[i, k] = (gz[i, k] - z[i, k] * dot) / norms[i]
    return out


@njit(**_JIT)
def mlp_forward(x, w1, b1, w2, b2):
    h = np.tanh(x @ w1 + b1)
    return h, h @ w2 + b2


@njit(**_JIT)
def mlp_backward(x, h, w2, ge):
    gw2 = h.T @ ge
    gb2 = ge.sum(axis=0)
    ga = (ge @ w2.T) * (1.0 - h * h)
    return x.T @ ga, ga.sum(axis=0), gw2, gb2


@njit(**_JIT)
def cross_entropy_grad(logits, labels):
    n, c = logits.shape
    p = np.empty_like(logits)
    value = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        denom = 0.0
        for j in range(c):
            p[i, j] = math.exp(logits[i, j] - m)
            denom += p[i, j]
        lse = math.log(denom)
        value += lse - (logits[i, labels[i]] - m)
        for j in range(c):
            p[i, j] /= denom
        p[i, labels[i]] -= 1.0
    return value, p


@njit(**_JIT)
def pseudo_label(unlabeled, labeled, labeled_classes, tau, threshold):
    classes = np.unique(labeled_classes)
    nc = classes.shape[0]
    u = unlabeled.shape[0]
    sims = unlabeled @ labeled.T
    counts = np.zeros(nc)
    col = np.empty(labeled_classes.shape[0], dtype=np.int64)
    for j in range(labeled_classes.shape[0]):
        col[j] = np.searchsorted(classes, labeled_classes[j])
        counts[col[j]] += 1.0
    assigned = np.full(u, -1, dtype=np.int64)
    conf = np.empty(u)
    means = np.empty(nc)
    for i in range(u):
        means[:] = 0.0
        for j in range(labeled_classes.shape[0]):
            means[col[j]] += sims[i, j]
        best = 0
        for c in range(nc):
            means[c] = means[c] / counts[c] / tau
            if means[c] > means[best]:
                best = c
        denom = 0.0
        for c in range(nc):
            denom += math.exp(means[c] - means[best])
        conf[i] = 1.0 / denom
        if conf[i] >= threshold:
            assigned[i] = classes[best]
    return assigned, conf


@njit(**_JIT)
def knn_predict(train, train_labels, test, k, tau, n_classes):
    sims = test @ train.T
    m = train.shape[0]
    out = np.empty(test.shape[0], dtype=np.int64)
    scores = np.empty(n_classes)
    top_s = np.empty(k)
    top_j = np.empty(k, dtype=np.int64)
    for i in range(test.shape[0]):
        # insertion top-k; scanning j upward keeps equal sims in index order
        filled = 0
        for j in range(m):
            s = sims[i, j]
            if filled == k and s <= top_s[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and top_s[pos - 1] < s:
                if pos < k:
                    top_s[pos] = top_s[pos - 1]
                    top_j[pos] = top_j[pos - 1]
                pos -= 1
            top_s[pos] = s
            top_j[pos] = j
            if filled < k:
                filled += 1
        scores[:] = 0.0
        for r in range(k):
            scores[train_labels[top_j[r]]] += math.exp((top_s[r] - top_s[0]) / tau)
        best = 0
        for c in range(1, n_classes):
            if scores[c] > scores[best]:
                best = c
        out[i] = best
    return out


@njit(**_JIT)
def semi_groups(z, labels, tau, threshold):
    n = labels.shape[0]
    d = z.shape[1]
    eff = labels.copy()
    n_lab = 0
    for i in range(n):
        if labels[i] >= 0:
            n_lab += 1
    if 0 < n_lab < n:
        emb = np.empty((n, d))
        for i in range(n):
            acc = 0.0
            for k in range(d):
                emb[i, k] = z[i, k] + z[n + i, k]
                acc += emb[i, k] * emb[i, k]
            if acc == 0.0:
                for k in range(d):
                    emb[i, k] = z[i, k]
            else:
                r = math.sqrt(acc)
                for k in range(d):
                    emb[i, k] /= r
        lab_idx = np.empty(n_lab, dtype=np.int64)
        unl_idx = np.empty(n - n_lab, dtype=np.int64)
        a = 0
        b = 0
        for i in range(n):
            if labels[i] >= 0:
                lab_idx[a] = i
                a += 1
            else:
                unl_idx[b] = i
                b += 1
        assigned, _ = pseudo_label(emb[unl_idx], emb[lab_idx], labels[lab_idx], tau, threshold)
        for r in range(unl_idx.shape[0]):
            eff[unl_idx[r]] = assigned[r]
    groups = np.empty(2 * n, dtype=np.int64)
    segments = np.empty(2 * n, dtype=np.int64)
    for i in range(n):
        if eff[i] >= 0:
            g = eff[i]
            sg = 0
        else:
            g = -1 - i
            sg = 1
        groups[i] = g
        groups[n + i] = g
        segments[i] = sg
        segments[n + i] = sg
    return groups, segments


@njit(**_JIT)
def contrastive_step(x, w1, b1, w2, b2, groups, segments, tau):
    h, e = mlp_forward(x, w1, b1, w2, b2)
    z, norms = normalize_rows(e)
    value, gz = contrastive_loss_grad(z, groups, segments, tau)
    ge = normalize_backward(z, norms, gz)
    gw1, gb1, gw2, gb2 = mlp_backward(x, h, w2, ge)
    return value, gw1, gb1, gw2, gb2


@njit(**_JIT)
def semi_step(x, w1, b1, w2, b2, labels, tau, threshold):
    h, e = mlp_forward(x, w1, b1, w2, b2)
    z, norms = normalize_rows(e)
    groups, segments = semi_groups(z, labels, tau, threshold)
    value, gz = contrastive_loss_grad(z, groups, segments, tau)
    ge = normalize_backward(z, norms, gz)
    gw1, gb1, gw2, gb2 = mlp_backward(x, h, w2, ge)
    return value, gw1, gb1, gw2, gb2


@njit(**_JIT)
def ce_step(x, y, w1, b1, w2, b2, v, c):
    h, e = mlp_forward(x, w1, b1, w2, b2)
    value, gl = cross_entropy_grad(e @ v + c, y)
    gv = e.T @ gl
    gc = gl.sum(axis=0)
    ge = gl @ v.T
    gw1, gb1, gw2, gb2 = mlp_backward(x, h, w2, ge)
    return value, gw1, gb1, gw2, gb2, gv, gc
