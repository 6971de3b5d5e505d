"""InfoNCE and supervised contrastive objectives with analytic gradients.

Indices are 0-based: a batch of ``N`` samples holds ``2N`` view embeddings,
``pairing[i]`` is the other view of view ``i`` and ``origin[i]`` the sample
it came from. Losses are plain sums over all anchors. Gradients are taken
with respect to the (already normalized) embeddings.

Unlabeled samples carry label ``-1`` (:data:`UNLABELED`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._kernels import backend as _k
from .errors import DegenerateEmbeddingError, InvalidArgumentError, MissingLabelError

UNLABELED = -1


@dataclass(frozen=True)
class MultiviewBatch:
    embeddings: np.ndarray
    pairing: np.ndarray
    origin: np.ndarray
    labels: np.ndarray | None = None
    temperature: float = 0.1

    def __post_init__(self) -> None:
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        pairing = np.asarray(self.pairing, dtype=np.int64)
        origin = np.asarray(self.origin, dtype=np.int64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "pairing", pairing)
        object.__setattr__(self, "origin", origin)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if not self.temperature > 0:
            raise InvalidArgumentError(f"temperature must be > 0, got {self.temperature}")
        m = emb.shape[0]
        if emb.ndim != 2 or m == 0 or m % 2:
            raise InvalidArgumentError(f"expected a (2N, d) embedding array, got shape {emb.shape}")
        if pairing.shape != (m,) or origin.shape != (m,):
            raise InvalidArgumentError("pairing and origin must have one entry per view")
        idx = np.arange(m)
        if pairing.min() < 0 or pairing.max() >= m:
            raise InvalidArgumentError("pairing index out of range")
        if np.any(pairing == idx) or np.any(pairing[pairing] != idx):
            raise InvalidArgumentError("pairing must be an involution without fixed points")
        if np.any(origin[pairing] != origin):
            raise InvalidArgumentError("paired views must share their origin sample")
        n = m // 2
        if origin.min() < 0 or origin.max() >= n or np.any(np.bincount(origin, minlength=n) != 2):
            raise InvalidArgumentError("every sample must contribute exactly two views")
        if self.labels is not None and self.labels.shape != (n,):
            raise InvalidArgumentError(f"expected {n} sample labels, got {self.labels.shape}")

    @classmethod
    def from_views(
        cls,
        view_a: np.ndarray,
        view_b: np.ndarray,
        labels: np.ndarray | None = None,
        temperature: float = 0.1,
    ) -> MultiviewBatch:
        """Stack two aligned view arrays as ``[view_a; view_b]``."""
        view_a = np.asarray(view_a, dtype=np.float64)
        n = view_a.shape[0]
        idx = np.arange(2 * n)
        return cls(
            embeddings=np.concatenate([view_a, np.asarray(view_b, dtype=np.float64)]),
            pairing=(idx + n) % (2 * n),
            origin=idx % n,
            labels=labels,
            temperature=temperature,
        )

    @property
    def n_samples(self) -> int:
        return self.embeddings.shape[0] // 2

    def view_labels(self) -> np.ndarray:
        if self.labels is None:
            raise MissingLabelError("batch has no labels")
        return self.labels[self.origin]

    def subset(self, samples: np.ndarray) -> MultiviewBatch:
        """Sub-batch holding both views of the given sample indices, renumbered."""
        samples = np.asarray(samples, dtype=np.int64)
        remap = np.full(self.n_samples, -1, dtype=np.int64)
        remap[samples] = np.arange(samples.size)
        keep = np.flatnonzero(remap[self.origin] >= 0)
        view_pos = np.full(self.embeddings.shape[0], -1, dtype=np.int64)
        view_pos[keep] = np.arange(keep.size)
        return MultiviewBatch(
            embeddings=self.embeddings[keep],
            pairing=view_pos[self.pairing[keep]],
            origin=remap[self.origin[keep]],
            labels=None if self.labels is None else self.labels[samples],
            temperature=self.temperature,
        )


@dataclass(frozen=True)
class LossResult:
    value: float
    gradient: np.ndarray


def normalize(batch: MultiviewBatch) -> MultiviewBatch:
    """Scale every embedding to unit L2 norm."""
    norms = np.linalg.norm(batch.embeddings, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError(f"zero embedding at index {int(np.argmin(norms))}")
    return replace(batch, embeddings=batch.embeddings / norms[:, None])


def build_sets(batch: MultiviewBatch, supervised: bool = False) -> list[tuple[list[int], list[int]]]:
    """Contrast set A(i) and positive set P(i) for every anchor, as index lists."""
    m = batch.embeddings.shape[0]
    if supervised:
        vl = batch.view_labels()
        if np.any(vl < 0):
            raise MissingLabelError("supervised sets need a label for every sample")
    out = []
    for i in range(m):
        others = [a for a in range(m) if a != i]
        if supervised:
            pos = [a for a in others if vl[a] == vl[i]]
        else:
            pos = [int(batch.pairing[i])]
        out.append((others, pos))
    return out


def _loss(batch: MultiviewBatch, groups: np.ndarray, segments: np.ndarray) -> LossResult:
    value, grad = _k.contrastive_loss_grad(
        batch.embeddings, np.ascontiguousarray(groups), segments, float(batch.temperature)
    )
    return LossResult(float(value), grad)


def _one_segment(batch: MultiviewBatch) -> np.ndarray:
    return np.zeros(batch.embeddings.shape[0], dtype=np.int64)


def info_nce_loss(batch: MultiviewBatch) -> LossResult:
    """Self-supervised InfoNCE: each view's positive is its paired view."""
    m = batch.embeddings.shape[0]
    # group = smaller index of the pair, so P(i) = {pairing[i]} exactly
    groups = np.minimum(np.arange(m), batch.pairing)
    return _loss(batch, groups, _one_segment(batch))


def supcon_loss(batch: MultiviewBatch) -> LossResult:
    """Supervised contrastive loss, 1/|P(i)| average outside the log."""
    vl = batch.view_labels()
    if np.any(vl < 0):
        raise MissingLabelError("supcon_loss needs a label for every sample")
    if np.unique(batch.labels).size == batch.n_samples:
        # all classes distinct: positives are exactly the paired views
        return info_nce_loss(batch)
    return _loss(batch, vl, _one_segment(batch))


def _sample_embeddings(batch: MultiviewBatch) -> np.ndarray:
    n = batch.n_samples
    emb = np.zeros((n, batch.embeddings.shape[1]))
    np.add.at(emb, batch.origin, batch.embeddings)
    norms = np.linalg.norm(emb, axis=1)
    first = np.argsort(batch.origin, kind="stable")[::2]
    bad = norms == 0
    emb[bad] = batch.embeddings[first[bad]]
    norms[bad] = 1.0
    return emb / norms[:, None]


def pseudo_label(
    unlabeled_embeddings: np.ndarray,
    labeled_embeddings: np.ndarray,
    labels: np.ndarray,
    threshold: float,
    temperature: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Assign each unlabeled embedding the class whose labeled members it is
    closest to on average, when the softmax confidence reaches ``threshold``.

    Returns ``(classes, confidence)`` where unassigned samples get -1.
    """
    lab = np.ascontiguousarray(labeled_embeddings, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if lab.ndim != 2 or lab.shape[0] == 0:
        raise InvalidArgumentError("pseudo-labeling needs at least one labeled embedding")
    unl = np.ascontiguousarray(unlabeled_embeddings, dtype=np.float64).reshape(-1, lab.shape[1])
    if labels.shape != (lab.shape[0],) or np.any(labels < 0):
        raise InvalidArgumentError("one non-negative class id per labeled embedding required")
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgumentError(f"threshold must be in [0, 1], got {threshold}")
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {temperature}")
    return _k.pseudo_label(unl, lab, labels, float(temperature), float(threshold))


def semi_supervised_groups(batch: MultiviewBatch, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Effective sample labels (true, pseudo or -1) for a partially labeled batch."""
    if batch.labels is None or not np.any(batch.labels >= 0):
        raise InvalidArgumentError("semi-supervised loss needs at least one labeled sample")
    eff = batch.labels.copy()
    unl = eff < 0
    if unl.any():
        emb = _sample_embeddings(batch)
        assigned, _ = pseudo_label(emb[unl], emb[~unl], eff[~unl], threshold, batch.temperature)
        eff[unl] = assigned
    return eff, np.flatnonzero(eff >= 0)


def semi_supervised_loss(batch: MultiviewBatch, threshold: float) -> LossResult:
    """SupCon over samples with true or confident pseudo labels plus InfoNCE
    over the rest, each part contrasting only within its own sub-batch.

    Pseudo labels are treated as constants when differentiating.
    """
    eff, _ = semi_supervised_groups(batch, threshold)
    sample_group = np.where(eff >= 0, eff, -1 - np.arange(batch.n_samples))
    segments = np.where(eff >= 0, 0, 1)[batch.origin].astype(np.int64)
    return _loss(batch, sample_group[batch.origin].astype(np.int64), segments)
