"""Label ranking over camera states: Plackett-Luce and supervised Rank-N-Contrast.

Batches hold ``2N`` samples laid out as anchor/augmentation pairs: row ``2k``
is an anchor and row ``2k+1`` its augmented copy, both carrying the anchor's
label and target.  Similarity is the negative L2 distance between features and
the label distance is the absolute difference of scalar camera states.

For anchor ``i`` and any other sample ``j`` the ranking set is

    S(i, j) = {k != i : |y_i - y_k| >= |y_i - y_j|}

and the loss term is ``-log softmax`` of ``sim(f_i, f_j) / tau`` over ``S(i, j)``.
The per-sample loss averages these terms over ``j != i`` and adds
``lam * |prediction_i - target_i|``; the batch loss averages over all ``2N``
anchors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NonPositiveScoreError, ShapeMismatchError


@dataclass(frozen=True)
class LossHyper:
    tau: float = 2.0
    lam: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.lam >= 0:
            raise ValueError("lam must be non-negative")


@dataclass(frozen=True, eq=False)
class RankingBatch:
    features: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2 or f.shape[0] % 2 or f.shape[1] < 1:
            raise ShapeMismatchError(f"features must be (2N, D) with N >= 1, got {f.shape}")
        m = f.shape[0]
        arrays = {}
        for name in ("labels", "predictions", "targets"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if a.shape != (m,):
                raise ShapeMismatchError(f"{name} must have length {m}, got {a.shape[0]}")
            arrays[name] = a
        for a in (f, *arrays.values()):
            if not np.all(np.isfinite(a)):
                raise ValueError("batch contains non-finite values")
        if np.any(arrays["labels"][0::2] != arrays["labels"][1::2]):
            raise ValueError("augmentation labels must equal their anchor's label")
        object.__setattr__(self, "features", f)
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class LossResult:
    value: float
    d_features: np.ndarray
    d_predictions: np.ndarray


def similarity(f_i, f_j) -> float:
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise ShapeMismatchError(f"feature shapes differ: {f_i.shape} vs {f_j.shape}")
    return -float(np.linalg.norm(f_i - f_j))


def state_distance(x_i: float, x_j: float) -> float:
    return abs(float(x_i) - float(x_j))


def _check_index(i, m):
    if not (0 <= i < m):
        raise IndexError(f"sample index {i} out of range for {m} samples")


def ranking_set(i: int, j: int, labels: Sequence[float]) -> set:
    """Indices ``k != i`` whose label is at least as far from ``i``'s as ``j``'s is."""
    labels = np.asarray(labels, dtype=np.float64)
    m = labels.shape[0]
    _check_index(i, m)
    _check_index(j, m)
    if i == j:
        raise IndexError("ranking set needs i != j")
    dist = np.abs(labels[i] - labels)
    keep = dist >= dist[j]
    keep[i] = False
    return set(np.flatnonzero(keep).tolist())


def pl_ranking_probability(scores: Sequence[float], order: Sequence[int]) -> float:
    """Plackett-Luce probability of observing ``order`` (best first)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = list(order)
    n = scores.shape[0]
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of range(len(scores))")
    if np.any(~(scores > 0)):
        raise NonPositiveScoreError("Plackett-Luce scores must be strictly positive")
    ordered = scores[order]
    # denominators: suffix sums of the remaining scores
    remaining = np.cumsum(ordered[::-1])[::-1]
    return float(np.prod(ordered / remaining))


def pairwise_probability(i: int, j: int, batch: RankingBatch, tau: float) -> float:
    m = batch.size
    _check_index(i, m)
    _check_index(j, m)
    if i == j:
        raise IndexError("pairwise probability needs i != j")
    members = sorted(ranking_set(i, j, batch.labels))
    logits = np.array([similarity(batch.features[i], batch.features[k]) / tau for k in members])
    top = logits.max()
    log_denom = top + math.log(np.sum(np.exp(logits - top)))
    return math.exp(similarity(batch.features[i], batch.features[j]) / tau - log_denom)


def suprnc_per_sample(i: int, batch: RankingBatch, hyper: LossHyper) -> float:
    m = batch.size
    _check_index(i, m)
    terms = [-math.log(pairwise_probability(i, j, batch, hyper.tau)) for j in range(m) if j != i]
    l1 = abs(batch.predictions[i] - batch.targets[i])
    return math.fsum(terms) / (m - 1) + hyper.lam * l1


def _pairwise_distances(features: np.ndarray) -> tuple:
    diff = features[:, None, :] - features[None, :, :]
    dist = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
    return diff, dist


def suprnc_batch(batch: RankingBatch, hyper: LossHyper) -> LossResult:
    """Batch loss and its exact gradients w.r.t. features and predictions."""
    f = batch.features
    m = f.shape[0]
    tau = hyper.tau
    diff, dist = _pairwise_distances(f)
    logits = -dist / tau  # logits[i, k] = sim(f_i, f_k) / tau

    label_dist = np.abs(batch.labels[:, None] - batch.labels[None, :])
    off_diag = ~np.eye(m, dtype=bool)
    # in_set[i, j, k]: k belongs to S(i, j), for j != i
    in_set = (label_dist[:, None, :] >= label_dist[:, :, None]) & off_diag[:, None, :] & off_diag[:, :, None]

    masked = np.where(in_set, logits[:, None, :], -np.inf)
    top = masked.max(axis=2, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    expd = np.exp(masked - top)
    denom = expd.sum(axis=2)
    log_denom = np.log(np.where(off_diag, denom, 1.0)) + top[:, :, 0]
    terms = np.where(off_diag, log_denom - logits, 0.0)

    residual = batch.predictions - batch.targets
    contrastive = terms.sum(axis=1) / (m - 1)
    per_sample = contrastive + hyper.lam * np.abs(residual)
    value = float(per_sample.sum() / m)

    # dL/dlogits[i, k]: softmax mass of k summed over the sets it appears in,
    # minus one for the j = k numerator
    softmax = expd / np.where(off_diag, denom, 1.0)[:, :, None]
    softmax = np.where(in_set, softmax, 0.0)
    g_logits = (softmax.sum(axis=1) - off_diag) / (m * (m - 1))

    # logits = -dist / tau, d dist[i,k] / d f_i = diff[i,k] / dist[i,k]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dist > 0, -g_logits / (tau * dist), 0.0)
    # dist is symmetric: f_i receives w[i,k] + w[k,i] along diff[i,k]
    w_sym = w + w.T
    d_features = np.einsum("ik,ikd->id", w_sym, diff)

    d_predictions = hyper.lam * np.sign(residual) / m
    return LossResult(value, d_features, d_predictions)
