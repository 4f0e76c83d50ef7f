import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from regularizer import (
    CentroidSet,
    Step,
    adjust_supervised,
    adjust_unsupervised,
    centroid_steps,
    class_scores,
    embedding_distance,
    init_centroids,
    regularization_loss,
    regularize,
)
from tensor import ConfigurationError, ContractError, Tensor


def _centroid_set(values, step=Step.SUPERVISED, counts=None):
    values = np.asarray(values, dtype=float)
    k = values.shape[0]
    return CentroidSet(
        centroids=Tensor(values),
        class_ids=[f"c{i}" for i in range(k)],
        step=step,
        labeled_counts=np.array(counts or [1] * k),
    )


def _scores_oracle(h, centroids):
    d = np.array([np.sqrt(((h - c) ** 2).sum()) for c in centroids])
    return 1.0 - d / (d.sum() + 1e-12)


class TestDistance:
    def test_identical_embeddings(self):
        assert embedding_distance(np.ones((2, 3)), np.ones((2, 3))).item() == 0.0

    def test_unit_distance(self):
        assert embedding_distance(np.array([[1.0, 0.0]]), np.zeros((1, 2))).item() == 1.0

    def test_frobenius(self):
        assert embedding_distance(np.array([[3.0, 0.0], [0.0, 4.0]]), np.zeros((2, 2))).item() == 5.0


class TestInit:
    def test_class_mean(self):
        embeddings = np.array([[[0.0, 0.0]], [[2.0, 2.0]], [[5.0, 5.0]]])
        cs = init_centroids(embeddings, [0, 0, 1], ["a", "b"])
        assert_allclose(cs.matrix(0), [[1.0, 1.0]])
        assert_allclose(cs.matrix(1), [[5.0, 5.0]])
        assert cs.step is Step.INITIALIZED
        assert_array_equal(cs.labeled_counts, [2, 1])

    def test_empty_class_names_the_class(self):
        embeddings = np.zeros((2, 1, 2))
        with pytest.raises(ConfigurationError, match="walk"):
            init_centroids(embeddings, [0, 0], ["run", "walk"])

    def test_fallback_carries_previous_centroid(self):
        previous = _centroid_set([[[9.0]], [[7.0]]])
        cs = init_centroids(np.array([[[1.0]]]), [0], ["c0", "c1"], fallback=previous)
        assert_allclose(cs.matrix(1), [[7.0]])
        assert cs.carried_over == [1]


class TestScores:
    def test_distance_ratio(self):
        cs = _centroid_set([[[0.0]], [[4.0]]])
        scores = class_scores(np.array([[1.0]]), cs).values()
        assert_allclose(scores, [[0.75, 0.25]])

    def test_zero_distance_limit(self):
        cs = _centroid_set([[[0.0, 0.0]], [[1.0, 1.0]]])
        scores = class_scores(np.array([[0.0, 0.0]]), cs).values()
        assert_allclose(scores, [[1.0, 0.0]], atol=1e-10)

    def test_rows_sum_to_k_minus_one(self, rng):
        cs = _centroid_set(rng.standard_normal((4, 2, 3)))
        scores = class_scores(rng.standard_normal((5, 2, 3)), cs).values()
        assert_allclose(scores.sum(axis=1), np.full(5, 3.0), atol=1e-9)

    def test_coinciding_centroids_are_degenerate(self):
        cs = _centroid_set([[[1.0]], [[1.0]], [[1.0]]])
        result = class_scores(np.array([[1.0]]), cs)
        assert_allclose(result.values(), [[2 / 3, 2 / 3, 2 / 3]])
        assert_array_equal(result.degenerate, [True])

    def test_needs_two_centroids(self):
        with pytest.raises(ContractError):
            class_scores(np.zeros((1, 1)), _centroid_set([[[0.0]]]))


class TestSupervisedAdjustment:
    def test_single_sample_per_class_is_its_own_centroid(self, rng):
        embeddings = rng.standard_normal((2, 2, 3))
        cs = init_centroids(embeddings, [0, 1], ["a", "b"])
        adjusted = adjust_supervised(cs, embeddings, [0, 1])
        assert_allclose(adjusted.centroids.data, embeddings, atol=1e-12)
        assert adjusted.step is Step.SUPERVISED

    def test_equal_weights_give_plain_mean(self):
        embeddings = np.array([[[1.0, 0.0]], [[-1.0, 0.0]], [[0.0, 10.0]]])
        labels = [0, 0, 1]
        cs = adjust_supervised(init_centroids(embeddings, labels, ["a", "b"]), embeddings, labels)
        assert_allclose(cs.matrix(0), [[0.0, 0.0]], atol=1e-12)

    def test_weighted_mean_matches_loop_oracle(self, rng):
        embeddings = rng.standard_normal((5, 2, 2))
        labels = [0, 0, 0, 1, 1]
        initial = init_centroids(embeddings, labels, ["a", "b"])
        adjusted = adjust_supervised(initial, embeddings, labels)
        c = initial.centroids.data
        weights = [_scores_oracle(embeddings[i], c)[0] for i in range(3)]
        expected = sum(w * embeddings[i] for i, w in enumerate(weights)) / sum(weights)
        assert_allclose(adjusted.matrix(0), expected, atol=1e-12)

    def test_requires_initialized_centroids(self):
        cs = _centroid_set([[[0.0]], [[1.0]]], step=Step.SUPERVISED)
        with pytest.raises(ContractError):
            adjust_supervised(cs, np.zeros((2, 1, 1)), [0, 1])


class TestUnsupervisedAdjustment:
    def test_no_unlabeled_data_is_a_no_op(self):
        cs = _centroid_set([[[0.0]], [[3.0]]])
        out = adjust_unsupervised(cs, np.zeros((0, 1, 1)))
        assert_array_equal(out.centroids.data, cs.centroids.data)
        assert_array_equal(out.propagated_counts, [0, 0])
        assert out.step is Step.UNSUPERVISED

    def test_sample_at_centroid_joins_that_class(self):
        cs = _centroid_set([[[0.0, 0.0]], [[4.0, 0.0]]], counts=[3, 1])
        out = adjust_unsupervised(cs, np.array([[[0.0, 0.0]]]))
        assert_array_equal(out.propagated_counts, [1, 0])
        assert_allclose(out.centroids.data, cs.centroids.data, atol=1e-12)

    def test_count_mixing(self):
        cs = _centroid_set([[[0.0]], [[10.0]]], counts=[3, 2])
        out = adjust_unsupervised(cs, np.array([[[2.0]]]))
        assert_allclose(out.matrix(0), [[0.75 * 0.0 + 0.25 * 2.0]])
        assert_allclose(out.matrix(1), [[10.0]])

    def test_min_score_blocks_uncertain_samples(self):
        cs = _centroid_set([[[0.0]], [[10.0]]])
        out = adjust_unsupervised(cs, np.array([[[4.0]]]), min_score=0.9)
        assert_array_equal(out.propagated_counts, [0, 0])
        assert_allclose(out.centroids.data, cs.centroids.data)

    def test_requires_supervised_step(self):
        cs = _centroid_set([[[0.0]], [[1.0]]], step=Step.INITIALIZED)
        with pytest.raises(ContractError):
            adjust_unsupervised(cs, np.zeros((1, 1, 1)))


class TestLoss:
    def test_perfect_clusters(self):
        cs = _centroid_set([[[0.0]], [[5.0]]])
        loss = regularization_loss(np.array([[[0.0]], [[5.0]]]), [0, 1], cs)
        assert abs(loss.item()) < 1e-9

    def test_true_class_score(self):
        cs = _centroid_set([[[0.0]], [[4.0]]])
        loss = regularization_loss(np.array([[[1.0]]]), [0], cs)
        assert_allclose(loss.item(), -np.log(0.75), rtol=1e-9)
        assert abs(loss.item() - 0.2877) < 1e-4

    def test_requires_adjusted_centroids(self):
        cs = _centroid_set([[[0.0]], [[4.0]]], step=Step.INITIALIZED)
        with pytest.raises(ContractError):
            regularization_loss(np.array([[[1.0]]]), [0], cs)


class TestRegularize:
    def test_fully_labeled_skips_propagation(self, rng):
        embeddings = rng.standard_normal((6, 2, 2))
        labels = np.array([0, 1, 2, 0, 1, 2])
        cs, loss = regularize(embeddings, labels, np.ones(6, dtype=bool), ["a", "b", "c"])
        supervised = adjust_supervised(init_centroids(embeddings, labels, ["a", "b", "c"]), embeddings, labels)
        assert_allclose(cs.centroids.data, supervised.centroids.data)
        assert_array_equal(cs.propagated_counts, [0, 0, 0])
        assert loss.item() >= 0.0

    def test_unlabeled_samples_are_propagated(self, rng):
        embeddings = rng.standard_normal((7, 1, 3))
        labels = np.array([0, 1, -1, -1, -1, -1, -1])
        cs, _ = regularize(embeddings, labels, labels >= 0, ["a", "b"])
        assert cs.step is Step.UNSUPERVISED
        assert cs.propagated_counts.sum() == 5

    def test_detached_copy_drops_the_tape(self, rng):
        from tensor import Parameter, Tape

        p = Parameter("h", rng.standard_normal((4, 1, 2)))
        tape = Tape()
        cs, _ = regularize(tape.watch(p), [0, 1, 0, 1], np.ones(4, dtype=bool), ["a", "b"])
        assert cs.centroids.tape is tape
        assert cs.detached().centroids.tape is None

    def test_batch_without_labels_has_zero_loss(self, rng):
        previous = _centroid_set(rng.standard_normal((2, 1, 2)))
        cs, loss = regularize(
            rng.standard_normal((3, 1, 2)), [-1, -1, -1], np.zeros(3, dtype=bool), ["c0", "c1"], fallback=previous
        )
        assert loss.item() == 0.0
        assert loss.tape is None
        assert cs.carried_over == [0, 1]
        assert cs.propagated_counts.sum() == 3

    def test_steps_are_kept_in_order(self, rng):
        embeddings = rng.standard_normal((6, 2, 2))
        labels = np.array([0, 1, 0, 1, -1, -1])
        steps = centroid_steps(embeddings, labels, labels >= 0, ["a", "b"])
        assert [cs.step for cs in steps] == [Step.INITIALIZED, Step.SUPERVISED, Step.UNSUPERVISED]
        assert_allclose(steps[0].matrix(0), embeddings[[0, 2]].mean(axis=0), atol=1e-12)
        final, _ = regularize(embeddings, labels, labels >= 0, ["a", "b"])
        assert_array_equal(steps[-1].centroids.data, final.centroids.data)


def _distance(a, b):
    total = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (x - y) ** 2
    return total ** 0.5


def _loop_scores(h, centroids):
    d = [_distance(h, c) for c in centroids]
    total = sum(d)
    return [1.0 - dk / (total + 1e-12) for dk in d]


def _loop_weighted_mean(points, weights):
    acc = np.zeros_like(points[0])
    for p, w in zip(points, weights):
        acc = acc + w * p
    return acc / sum(weights)


def _loop_regularize(embeddings, labels, n_classes):
    """Initialization, supervised and unsupervised adjustment written out with plain loops."""
    labeled = [i for i, y in enumerate(labels) if y >= 0]
    unlabeled = [i for i, y in enumerate(labels) if y < 0]
    members = {k: [i for i in labeled if labels[i] == k] for k in range(n_classes)}
    initial = [sum(embeddings[i] for i in members[k]) / len(members[k]) for k in range(n_classes)]
    supervised = []
    for k in range(n_classes):
        weights = [_loop_scores(embeddings[i], initial)[k] for i in members[k]]
        supervised.append(_loop_weighted_mean([embeddings[i] for i in members[k]], weights))
    assigned = {k: [] for k in range(n_classes)}
    for i in unlabeled:
        scores = _loop_scores(embeddings[i], supervised)
        best = max(range(n_classes), key=lambda k: scores[k])
        assigned[best].append((i, scores[best]))
    final = []
    for k in range(n_classes):
        if not assigned[k]:
            final.append(supervised[k])
            continue
        n_k, m_k = len(members[k]), len(assigned[k])
        mixed = _loop_weighted_mean([embeddings[i] for i, _ in assigned[k]], [s for _, s in assigned[k]])
        final.append(n_k / (n_k + m_k) * supervised[k] + m_k / (n_k + m_k) * mixed)
    return initial, supervised, final


def _loop_loss(embeddings, labels, centroids):
    total = 0.0
    for h, y in zip(embeddings, labels):
        total += np.log(_loop_scores(h, centroids)[y] + 1e-12)
    return -total / len(labels)


class TestLoopOracles:
    def test_two_labeled_two_unlabeled(self, rng):
        for _ in range(5):
            embeddings = rng.standard_normal((4, 2, 2))
            labels = np.array([0, 1, -1, -1])
            _, _, expected = _loop_regularize(embeddings, labels, 2)
            cs, _ = regularize(embeddings, labels, labels >= 0, ["a", "b"])
            assert_allclose(cs.centroids.data, np.array(expected), rtol=0, atol=1e-10)

    def test_all_three_steps_on_larger_batches(self, rng):
        for _ in range(5):
            labels = np.array([0, 1, 2, 0, 1, 2, 0, -1, -1, -1, -1, -1])
            embeddings = rng.standard_normal((len(labels), 3, 2))
            expected = _loop_regularize(embeddings, labels, 3)
            steps = centroid_steps(embeddings, labels, labels >= 0, ["a", "b", "c"])
            for cs, oracle in zip(steps, expected):
                assert_allclose(cs.centroids.data, np.array(oracle), rtol=0, atol=1e-10)

    def test_loss_on_four_samples(self, rng):
        for _ in range(5):
            embeddings = rng.standard_normal((4, 2, 3))
            labels = np.array([0, 1, 0, 1])
            cs, loss = regularize(embeddings, labels, np.ones(4, dtype=bool), ["a", "b"])
            expected = _loop_loss(embeddings, labels, cs.centroids.data)
            assert_allclose(loss.item(), expected, rtol=0, atol=1e-12)


class TestProperties:
    CASES = 100

    @pytest.mark.parametrize("k", [2, 3, 5, 10])
    def test_scores_sum_to_k_minus_one(self, rng, k):
        cs = _centroid_set(rng.standard_normal((k, 2, 3)))
        scores = class_scores(3.0 * rng.standard_normal((self.CASES, 2, 3)), cs).values()
        assert_allclose(scores.sum(axis=1), np.full(self.CASES, k - 1.0), rtol=0, atol=1e-9)
        assert np.all((scores >= 0.0) & (scores <= 1.0))

    def test_centroids_stay_within_their_members(self, rng):
        tol = 1e-12
        for _ in range(self.CASES):
            labels = np.array([0, 0, 1, 1, 1, -1, -1, -1])
            embeddings = rng.standard_normal((len(labels), 2, 2))
            initial, supervised, final = centroid_steps(embeddings, labels, labels >= 0, ["a", "b"])
            propagated = np.argmax(class_scores(embeddings[labels < 0], supervised).values(), axis=1)
            for k in range(2):
                own = embeddings[labels == k]
                contributors = np.concatenate([own, embeddings[labels < 0][propagated == k]])
                for cs, points in ((initial, own), (supervised, own), (final, contributors)):
                    c = cs.matrix(k)
                    assert np.all(c >= points.min(axis=0) - tol)
                    assert np.all(c <= points.max(axis=0) + tol)

    def test_translation_moves_centroids_and_keeps_scores(self, rng):
        for _ in range(self.CASES):
            labels = np.array([0, 1, 2, 0, 1, -1, -1])
            embeddings = rng.standard_normal((len(labels), 2, 3))
            offset = 5.0 * rng.standard_normal((2, 3))
            cs, loss = regularize(embeddings, labels, labels >= 0, ["a", "b", "c"])
            moved, moved_loss = regularize(embeddings + offset, labels, labels >= 0, ["a", "b", "c"])
            assert_allclose(moved.centroids.data, cs.centroids.data + offset, rtol=0, atol=1e-9)
            assert_allclose(
                class_scores(embeddings + offset, moved).values(),
                class_scores(embeddings, cs).values(),
                rtol=0,
                atol=1e-9,
            )
            assert_array_equal(moved.propagated_counts, cs.propagated_counts)
            assert_allclose(moved_loss.item(), loss.item(), rtol=0, atol=1e-9)

    def test_empty_unlabeled_set_is_identity(self, rng):
        for _ in range(self.CASES):
            k = int(rng.integers(2, 6))
            cs = _centroid_set(rng.standard_normal((k, 2, 2)))
            out = adjust_unsupervised(cs, np.zeros((0, 2, 2)))
            assert_array_equal(out.centroids.data, cs.centroids.data)
            assert_array_equal(out.propagated_counts, np.zeros(k))

    def test_steps_run_only_in_order(self, rng):
        for _ in range(self.CASES):
            labels = np.array([0, 1, 0, 1])
            embeddings = rng.standard_normal((4, 1, 2))
            initial = init_centroids(embeddings, labels, ["a", "b"])
            with pytest.raises(ContractError):
                adjust_unsupervised(initial, embeddings)
            with pytest.raises(ContractError):
                regularization_loss(embeddings, labels, initial)
            supervised = adjust_supervised(initial, embeddings, labels)
            with pytest.raises(ContractError):
                adjust_supervised(supervised, embeddings, labels)
            final = adjust_unsupervised(supervised, embeddings[:0])
            for step in (adjust_supervised, lambda cs, e, y: adjust_unsupervised(cs, e)):
                with pytest.raises(ContractError):
                    step(final, embeddings, labels)
