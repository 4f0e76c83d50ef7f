"""Classification on the learned embedding space."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from data import MtsDataset
from model import SmateModel, encode
from regularizer import CentroidSet, class_scores, pairwise_distances
from tensor import ContractError, DimensionError

logger = logging.getLogger(__name__)

METHODS = ("centroid", "knn")


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: dict
    confusion: list
    n_test: int
    label_set: list
    method: str = "centroid"
    unknown_labels: int = 0
    predictions: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def nearest_centroid_predict(h, cs: CentroidSet):
    """Class with the highest score; ties go to the earliest class."""
    scores = class_scores(h, cs).values()[0]
    return cs.class_ids[int(np.argmax(scores))]


def knn_predict(h, train_embeddings, train_labels, k=1, label_set=None):
    """Majority vote of the ``k`` nearest training embeddings.

    Vote ties go to the class with the smallest mean distance among its
    voters, then to the earliest class in ``label_set``.
    """
    train_embeddings = np.asarray(train_embeddings, dtype=np.float64)
    if train_embeddings.shape[0] == 0:
        raise ContractError("knn_predict needs at least one training embedding")
    if k < 1 or k % 2 == 0:
        raise ContractError(f"k must be an odd positive integer, got {k}")
    if k > train_embeddings.shape[0]:
        raise ContractError(f"k={k} exceeds {train_embeddings.shape[0]} training embeddings")
    h = np.asarray(getattr(h, "data", h), dtype=np.float64)
    if h.shape != train_embeddings.shape[1:]:
        raise DimensionError(f"embedding shape {h.shape}, training embeddings {train_embeddings.shape[1:]}")
    order_of = {label: i for i, label in enumerate(label_set or sorted(set(train_labels)))}
    distances = pairwise_distances(h[None], train_embeddings).data[0]
    nearest = np.argsort(distances, kind="stable")[:k]
    votes = {}
    for i in nearest:
        votes.setdefault(train_labels[i], []).append(distances[i])
    return min(
        votes,
        key=lambda label: (-len(votes[label]), float(np.mean(votes[label])), order_of.get(label, len(order_of))),
    )


def report_from_predictions(truth, predictions, label_set, method="centroid"):
    index = {label: i for i, label in enumerate(label_set)}
    k = len(label_set)
    confusion = np.zeros((k, k), dtype=int)
    unknown = 0
    correct = 0
    for y, p in zip(truth, predictions):
        if y not in index:
            unknown += 1
            continue
        confusion[index[y], index[p]] += 1
        correct += int(y == p)
    if unknown:
        logger.warning("%d test sample(s) carry labels outside the training label set", unknown)
    n_test = len(truth)
    per_class = {}
    for label, i in index.items():
        row = confusion[i].sum()
        per_class[label] = float(confusion[i, i] / row) if row else None
    return EvalReport(
        accuracy=correct / n_test if n_test else 0.0,
        per_class_accuracy=per_class,
        confusion=confusion.tolist(),
        n_test=n_test,
        label_set=list(label_set),
        method=method,
        unknown_labels=unknown,
        predictions=list(predictions),
    )


def _map_ordered(fn, items, threads):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate(
    model: SmateModel,
    cs: CentroidSet,
    test_set: MtsDataset,
    method="centroid",
    k=1,
    train_embeddings=None,
    train_labels=None,
    threads=1,
):
    """Encodes ``test_set`` with the frozen model and scores the predictions."""
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    if len(test_set) == 0:
        raise ContractError("empty test set")
    model.check_input(test_set.samples)
    embeddings = encode(model, test_set.samples).data
    if method == "centroid":
        predict = lambda h: nearest_centroid_predict(h, cs)
    else:
        if train_embeddings is None or train_labels is None:
            raise ContractError("knn evaluation needs training embeddings and labels")
        predict = lambda h: knn_predict(h, train_embeddings, train_labels, k, cs.class_ids)
    predictions = _map_ordered(predict, list(embeddings), threads)
    report = report_from_predictions(test_set.evaluation_labels(), predictions, cs.class_ids, method)
    logger.info("%s accuracy on %s: %.4f (%d samples)", method, test_set.name, report.accuracy, report.n_test)
    return report
