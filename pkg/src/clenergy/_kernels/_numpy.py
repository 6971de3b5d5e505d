"""Vectorized numpy implementations of the hot kernels.

Every function here has a loop-based twin in ``_numba`` with the same
signature; the two are cross-checked in the test suite.
"""

from __future__ import annotations

import numpy as np


def contrastive_loss_grad(z, groups, segments, tau):
    """Summed contrastive loss over anchors and its gradient w.r.t. ``z``.

    Anchor ``i`` contrasts against every other row of its segment; rows of
    the same segment sharing ``groups[i]`` are its positives. Anchors with no
    positive contribute nothing.
    """
    n = z.shape[0]
    s = (z @ z.T) / tau
    cand = segments[:, None] == segments[None, :]
    np.fill_diagonal(cand, False)
    pos = cand & (groups[:, None] == groups[None, :])
    npos = pos.sum(axis=1)
    valid = npos > 0
    if not valid.any():
        return 0.0, np.zeros_like(z)
    masked = np.where(cand, s, -np.inf)
    m = np.where(valid, masked.max(axis=1, initial=-np.inf), 0.0)
    e = np.where(cand & valid[:, None], np.exp(np.where(cand, s - m[:, None], 0.0)), 0.0)
    denom = np.where(valid, e.sum(axis=1), 1.0)
    safe_npos = np.maximum(npos, 1)
    # m - s >= 0 elementwise, which keeps every anchor term nonnegative
    gap = np.where(pos, m[:, None] - s, 0.0).sum(axis=1) / safe_npos
    value = float(np.sum(np.where(valid, np.log(denom) + gap, 0.0)))
    w = e / denom[:, None] - pos / safe_npos[:, None]
    w[~valid] = 0.0
    grad = ((w + w.T) @ z) / tau
    return value, grad


def normalize_rows(e):
    norms = np.sqrt(np.sum(e * e, axis=1))
    return e / norms[:, None], norms


def normalize_backward(z, norms, gz):
    dots = np.sum(z * gz, axis=1)
    return (gz - z * dots[:, None]) / norms[:, None]


def mlp_forward(x, w1, b1, w2, b2):
    h = np.tanh(x @ w1 + b1)
    return h, h @ w2 + b2


def mlp_backward(x, h, w2, ge):
    gw2 = h.T @ ge
    gb2 = ge.sum(axis=0)
    ga = (ge @ w2.T) * (1.0 - h * h)
    return x.T @ ga, ga.sum(axis=0), gw2, gb2


def cross_entropy_grad(logits, labels):
    """Summed softmax cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    value = float(np.sum(lse - shifted[rows, labels]))
    p = np.exp(shifted - lse[:, None])
    p[rows, labels] -= 1.0
    return value, p


def pseudo_label(unlabeled, labeled, labeled_classes, tau, threshold):
    """Class-mean cosine similarity softmax; returns (assigned or -1, confidence)."""
    classes = np.unique(labeled_classes)
    sims = unlabeled @ labeled.T
    onehot = (labeled_classes[:, None] == classes[None, :]).astype(np.float64)
    means = (sims @ onehot) / onehot.sum(axis=0)[None, :]
    logits = means / tau
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    best = np.argmax(p, axis=1)
    conf = p[np.arange(p.shape[0]), best]
    assigned = np.where(conf >= threshold, classes[best], -1)
    return assigned.astype(np.int64), conf


def knn_predict(train, train_labels, test, k, tau, n_classes):
    sims = test @ train.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sims, order, axis=1)
    weights = np.exp((top - top[:, :1]) / tau)
    scores = np.zeros((test.shape[0], n_classes))
    rows = np.repeat(np.arange(test.shape[0]), k)
    np.add.at(scores, (rows, train_labels[order].ravel()), weights.ravel())
    return np.argmax(scores, axis=1).astype(np.int64)


def _sample_embeddings(z, n):
    s = z[:n] + z[n:]
    norms = np.sqrt(np.sum(s * s, axis=1))
    bad = norms == 0.0
    s[bad] = z[:n][bad]
    norms[bad] = 1.0
    return s / norms[:, None]


def semi_groups(z, labels, tau, threshold):
    """Segments/groups for the semi-supervised objective on a [view_a; view_b] batch.

    Labeled and confidently pseudo-labeled samples form segment 0 grouped by
    class; the remaining samples form segment 1 grouped by sample origin.
    """
    n = labels.shape[0]
    eff = labels.copy()
    lab = labels >= 0
    unl = ~lab
    if unl.any() and lab.any():
        emb = _sample_embeddings(z, n)
        assigned, _ = pseudo_label(emb[unl], emb[lab], labels[lab], tau, threshold)
        eff[unl] = assigned
    seg = np.where(eff >= 0, 0, 1).astype(np.int64)
    grp = np.where(eff >= 0, eff, -1 - np.arange(n)).astype(np.int64)
    return np.concatenate([grp, grp]), np.concatenate([seg, seg])


def contrastive_step(x, w1, b1, w2, b2, groups, segments, tau):
    h, e = mlp_forward(x, w1, b1, w2, b2)
    z, norms = normalize_rows(e)
    value, gz = contrastive_loss_grad(z, groups, segments, tau)
    ge = normalize_backward(z, norms, gz)
    return (value,) + mlp_backward(x, h, w2, ge)


def semi_step(x, w1, b1, w2, b2, labels, tau, threshold):
    h, e = mlp_forward(x, w1, b1, w2, b2)
    z, norms = normalize_rows(e)
    groups, segments = semi_groups(z, labels, tau, threshold)
    value, gz = contrastive_loss_grad(z, groups, segments, tau)
    ge = normalize_backward(z, norms, gz)
    return (value,) + mlp_backward(x, h, w2, ge)


def ce_step(x, y, w1, b1, w2, b2, v, c):
    h, e = mlp_forward(x, w1, b1, w2, b2)
    value, gl = cross_entropy_grad(e @ v + c, y)
    gv = e.T @ gl
    gc = gl.sum(axis=0)
    ge = gl @ v.T
    return (value,) + mlp_backward(x, h, w2, ge) + (gv, gc)
