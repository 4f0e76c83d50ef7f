"""Three-step centroid regularization of the embedding space.

1. ``init_centroids``: per-class mean of the labeled embeddings.
2. ``adjust_supervised``: score-weighted mean of the labeled embeddings.
3. ``adjust_unsupervised``: unlabeled embeddings join their best-scoring
   class and are mixed into its centroid by count.

Everything is built from ``tensor`` ops, so when the embeddings live on a
tape the centroids and the loss are differentiable functions of them.
Embedding batches are ``(n, L, D)`` tensors; class membership is given as
integer indices into ``class_ids``.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

import tensor as T
from tensor import ConfigurationError, ContractError, DimensionError, Tensor

logger = logging.getLogger(__name__)

EPS = 1e-12


class Step(str, Enum):
    INITIALIZED = "initialized"
    SUPERVISED = "supervised_adjusted"
    UNSUPERVISED = "unsupervised_adjusted"


@dataclass
class CentroidSet:
    centroids: Tensor
    class_ids: list
    step: Step
    labeled_counts: np.ndarray
    propagated_counts: np.ndarray = None
    carried_over: list = field(default_factory=list)

    def __post_init__(self):
        if self.propagated_counts is None:
            self.propagated_counts = np.zeros(len(self.class_ids), dtype=int)

    def __len__(self):
        return len(self.class_ids)

    @property
    def embedding_shape(self):
        return self.centroids.shape[1:]

    def matrix(self, k):
        return self.centroids.data[k]

    def detached(self):
        """Copy whose centroids carry no tape."""
        return replace(self, centroids=Tensor(self.centroids.data.copy()))


@dataclass
class ClassScores:
    """Per-sample class scores, ``(n, K)``; each row sums to K - 1."""

    scores: Tensor
    degenerate: np.ndarray

    def values(self):
        return self.scores.data


def _as_batch(h):
    h = T.as_tensor(h)
    if h.ndim == 2:
        return T.reshape(h, (1,) + h.shape)
    return h


def embedding_distance(h_a, h_b):
    """Frobenius distance between two ``L x D`` embeddings (scalar tensor)."""
    h_a, h_b = T.as_tensor(h_a), T.as_tensor(h_b)
    if h_a.shape != h_b.shape:
        raise DimensionError(f"embedding_distance: shapes {h_a.shape} and {h_b.shape} differ")
    return T.norm(T.reshape(T.sub(h_a, h_b), (-1,)), axis=-1)


def pairwise_distances(points, centroids):
    """``(n, L, D)`` x ``(K, L, D)`` -> ``(n, K)`` Frobenius distances."""
    points, centroids = T.as_tensor(points), T.as_tensor(centroids)
    if points.shape[1:] != centroids.shape[1:]:
        raise DimensionError(
            f"embeddings {points.shape[1:]} and centroids {centroids.shape[1:]} differ"
        )
    n, k = points.shape[0], centroids.shape[0]
    width = int(np.prod(points.shape[1:]))
    p = T.broadcast(T.reshape(points, (n, 1, width)), (n, k, width))
    c = T.broadcast(T.reshape(centroids, (1, k, width)), (n, k, width))
    return T.norm(T.sub(p, c), axis=-1)


def scores_from_distances(distances):
    """``1 - d_k / (sum_j d_j + eps)``; all-zero rows score (K-1)/K uniformly."""
    n, k = distances.shape
    degenerate = distances.data.sum(axis=1) == 0
    if degenerate.any():
        logger.warning("%d embedding(s) coincide with every centroid; using uniform scores", int(degenerate.sum()))
        padding = np.zeros((n, k))
        padding[degenerate] = 1.0
        distances = T.add(distances, Tensor(padding))
    total = T.shift(T.sum(distances, axis=1, keepdims=True), EPS)
    ratio = T.div(distances, T.broadcast(total, (n, k)))
    return T.sub(Tensor(np.ones((n, k))), ratio), degenerate


def class_scores(h, cs: CentroidSet):
    if len(cs) < 2:
        raise ContractError(f"class scores need at least 2 centroids, got {len(cs)}")
    scores, degenerate = scores_from_distances(pairwise_distances(_as_batch(h), cs.centroids))
    return ClassScores(scores, degenerate)


def _weighted_mean(points, weights):
    """Convex combination of ``points`` (n, L, D) by non-negative ``weights`` (n,)."""
    n, rows, cols = points.shape
    w = T.broadcast(T.reshape(weights, (n, 1, 1)), points.shape)
    total = T.broadcast(T.reshape(T.sum(weights), (1, 1)), (rows, cols))
    return T.div(T.sum(T.mul(w, points), axis=0), total)


def _members(labels, k):
    return np.flatnonzero(np.asarray(labels) == k)


def init_centroids(embeddings, labels, class_ids, fallback: CentroidSet = None):
    """Per-class mean of labeled embeddings.

    A class with no labeled embedding is a configuration error unless a
    ``fallback`` set is given, in which case its previous centroid is
    reused as a constant.
    """
    embeddings = _as_batch(embeddings)
    labels = np.asarray(labels)
    if len(labels) != embeddings.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {embeddings.shape[0]} embeddings")
    centroids, counts, carried = [], [], []
    for k, class_id in enumerate(class_ids):
        members = _members(labels, k)
        if len(members) == 0:
            if fallback is None:
                raise ConfigurationError(f"class {class_id!r} has no labeled embedding")
            logger.warning("class %r absent from batch; carrying its previous centroid", class_id)
            centroids.append(Tensor(fallback.matrix(k)))
            carried.append(k)
        else:
            centroids.append(T.mean(T.take(embeddings, members, axis=0), axis=0))
        counts.append(len(members))
    return CentroidSet(
        centroids=T.stack(centroids, axis=0),
        class_ids=list(class_ids),
        step=Step.INITIALIZED,
        labeled_counts=np.array(counts, dtype=int),
        carried_over=carried,
    )


def _require_step(cs, expected, operation):
    if cs.step not in expected:
        allowed = " or ".join(s.value for s in expected)
        raise ContractError(f"{operation} requires centroids {allowed}, got {cs.step.value}")


def adjust_supervised(cs: CentroidSet, embeddings, labels):
    """Re-weights each class by the labeled samples' scores against ``cs``."""
    _require_step(cs, (Step.INITIALIZED,), "adjust_supervised")
    embeddings = _as_batch(embeddings)
    if embeddings.shape[0] == 0:
        return replace(cs, step=Step.SUPERVISED)
    scores = class_scores(embeddings, cs).scores
    centroids = []
    for k, class_id in enumerate(cs.class_ids):
        members = _members(labels, k)
        keep = T.take(cs.centroids, k, axis=0)
        if len(members) == 0:
            centroids.append(keep)
            continue
        weights = T.take(T.take(scores, members, axis=0), k, axis=1)
        if weights.data.sum() == 0:
            logger.warning("class %r: supervised weights sum to zero; centroid unchanged", class_id)
            centroids.append(keep)
            continue
        centroids.append(_weighted_mean(T.take(embeddings, members, axis=0), weights))
    return replace(cs, centroids=T.stack(centroids, axis=0), step=Step.SUPERVISED)


def adjust_unsupervised(cs: CentroidSet, unlabeled, min_score=None):
    """Propagates each unlabeled embedding to its best class and mixes it in.

    ``c_k = N_k / (N_k + M_k) * c_k + M_k / (N_k + M_k) * u_k`` where ``M_k``
    samples were propagated to class k and ``u_k`` is their score-weighted
    mean. Samples whose best score is below ``min_score`` are not propagated.
    """
    _require_step(cs, (Step.SUPERVISED,), "adjust_unsupervised")
    unlabeled = T.as_tensor(unlabeled)
    if unlabeled.size == 0 or unlabeled.shape[0] == 0:
        return replace(cs, step=Step.UNSUPERVISED, propagated_counts=np.zeros(len(cs), dtype=int))
    unlabeled = _as_batch(unlabeled)
    scores = class_scores(unlabeled, cs).scores
    assigned = np.argmax(scores.data, axis=1)
    if min_score is not None:
        confident = scores.data.max(axis=1) >= min_score
        assigned = np.where(confident, assigned, -1)
    centroids, propagated = [], []
    for k in range(len(cs)):
        members = _members(assigned, k)
        supervised = T.take(cs.centroids, k, axis=0)
        propagated.append(len(members))
        if len(members) == 0:
            centroids.append(supervised)
            continue
        n_labeled, n_prop = cs.labeled_counts[k], len(members)
        weights = T.take(T.take(scores, members, axis=0), k, axis=1)
        mixed = _weighted_mean(T.take(unlabeled, members, axis=0), weights)
        total = n_labeled + n_prop
        centroids.append(T.add(T.scale(supervised, n_labeled / total), T.scale(mixed, n_prop / total)))
    logger.debug("propagated unlabeled counts: %s", propagated)
    return replace(
        cs,
        centroids=T.stack(centroids, axis=0),
        step=Step.UNSUPERVISED,
        propagated_counts=np.array(propagated, dtype=int),
    )


def regularization_loss(embeddings, labels, cs: CentroidSet):
    """Mean negative log true-class score of the labeled embeddings.

    A batch without labeled embeddings contributes a constant zero.
    """
    _require_step(cs, (Step.SUPERVISED, Step.UNSUPERVISED), "regularization_loss")
    embeddings = T.as_tensor(embeddings)
    labels = np.asarray(labels)
    if embeddings.shape[0] == 0 or len(labels) == 0:
        return Tensor(0.0)
    embeddings = _as_batch(embeddings)
    scores = class_scores(embeddings, cs).scores
    onehot = np.zeros(scores.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    true_class = T.sum(T.mul(scores, Tensor(onehot)), axis=1)
    return T.scale(T.mean(T.log(T.shift(true_class, EPS))), -1.0)


def _split_batch(embeddings, labels, labeled_mask):
    embeddings = _as_batch(embeddings)
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    labeled_idx = np.flatnonzero(labeled_mask)
    unlabeled_idx = np.flatnonzero(~labeled_mask)
    labeled = T.take(embeddings, labeled_idx, axis=0)
    labeled_classes = np.asarray(labels)[labeled_idx]
    if len(unlabeled_idx):
        unlabeled = T.take(embeddings, unlabeled_idx, axis=0)
    else:
        unlabeled = Tensor(np.zeros((0,) + embeddings.shape[1:]))
    return labeled, labeled_classes, unlabeled


def _run_steps(labeled, labeled_classes, unlabeled, class_ids, fallback, min_score):
    initialized = init_centroids(labeled, labeled_classes, class_ids, fallback=fallback)
    supervised = adjust_supervised(initialized, labeled, labeled_classes)
    return initialized, supervised, adjust_unsupervised(supervised, unlabeled, min_score=min_score)


def centroid_steps(embeddings, labels, labeled_mask, class_ids, fallback=None, min_score=None):
    """The initialized, supervised-adjusted and unsupervised-adjusted sets of one batch."""
    labeled, labeled_classes, unlabeled = _split_batch(embeddings, labels, labeled_mask)
    return _run_steps(labeled, labeled_classes, unlabeled, class_ids, fallback, min_score)


def regularize(embeddings, labels, labeled_mask, class_ids, fallback=None, min_score=None):
    """Runs the three steps on one batch and returns ``(centroids, loss)``."""
    labeled, labeled_classes, unlabeled = _split_batch(embeddings, labels, labeled_mask)
    *_, cs = _run_steps(labeled, labeled_classes, unlabeled, class_ids, fallback, min_score)
    return cs, regularization_loss(labeled, labeled_classes, cs)
