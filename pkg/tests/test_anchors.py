import itertools
import unittest

import numpy as np

from eda.anchors import (
    EvolveSchedule,
    anchors_for_layer,
    fit_anchor_sets,
    kmeans_endpoints,
    schedule_for_evolve_times,
    select_distinct,
)
from eda.core import AnchorSet
from eda.utils.exceptions import IncompatibleOptionsError, ValidationError
from tests.helpers import random_anchor_set, random_output
from tests.test_geometry import reference_nms


class EvolveScheduleTests(unittest.TestCase):
    """Tests for anchor-evolution schedules."""

    def test_parse(self):
        self.assertEqual(EvolveSchedule.parse("2,4", 6).evolve_after_layers, (2, 4))
        self.assertEqual(EvolveSchedule.parse("", 6).evolve_after_layers, ())
        self.assertEqual(str(EvolveSchedule.parse(" 1, 3 ", 6)), "1,3")

    def test_incompatible_layers(self):
        """Evolving after the last layer, out of order, or at layer 0 is rejected."""
        for text in ("6", "4,2", "0", "2,2", "a"):
            with self.subTest(text=text), self.assertRaises(IncompatibleOptionsError):
                EvolveSchedule.parse(text, 6)

    def test_source_layer(self):
        schedule = EvolveSchedule(6, (2, 4))
        sources = [schedule.source_layer(layer) for layer in range(1, 7)]
        self.assertEqual(sources, [None, None, 2, 2, 4, 4])

    def test_evolve_times_mapping(self):
        """0, 1, 2 and 5 updates on six layers give the ablation schedules."""
        expected = {0: (), 1: (3,), 2: (2, 4), 5: (1, 2, 3, 4, 5)}
        for times, layers in expected.items():
            with self.subTest(times=times):
                schedule = schedule_for_evolve_times(times, 6)
                self.assertEqual(schedule.evolve_after_layers, layers)
                self.assertEqual(schedule.evolve_times, times)

    def test_too_many_updates(self):
        with self.assertRaises(IncompatibleOptionsError):
            schedule_for_evolve_times(6, 6)


class AnchorsForLayerTests(unittest.TestCase):
    """Tests for choosing the anchors of each decoder layer."""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.predefined = random_anchor_set(rng, 4)
        self.outputs = [random_output(rng, 4, layer_index=layer) for layer in range(1, 7)]

    def test_empty_schedule_always_uses_predefined(self):
        schedule = EvolveSchedule(6)
        for layer in range(1, 7):
            self.assertIs(anchors_for_layer(layer, self.predefined, self.outputs, schedule), self.predefined)

    def test_layers_after_an_update_use_that_layers_output(self):
        schedule = EvolveSchedule(6, (2, 4))
        anchors = anchors_for_layer(5, self.predefined, self.outputs, schedule)

        self.assertTrue(all(anchor.evolved_from_layer == 4 for anchor in anchors))
        np.testing.assert_array_equal(anchors.endpoints, self.outputs[3].endpoints)
        self.assertEqual(anchors, AnchorSet.from_output(self.outputs[3]))

    def test_missing_output(self):
        with self.assertRaises(ValidationError):
            anchors_for_layer(3, self.predefined, self.outputs[:1], EvolveSchedule(6, (2,)))


class SelectDistinctTests(unittest.TestCase):
    """Tests for distinct-anchor selection."""

    def test_random_sets(self):
        """The mask holds the top-scored anchor, keeps are sigma-separated, and it matches the reference."""
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(2, 17))
            anchors = random_anchor_set(rng, n, scale=8.0)
            scores = rng.normal(size=n)
            sigma = float(rng.uniform(2.5, 3.5))

            mask = select_distinct(anchors, scores, sigma)
            self.assertTrue(mask[int(np.argmax(scores))])
            kept = np.flatnonzero(mask)
            for i, j in itertools.combinations(kept, 2):
                self.assertGreater(np.linalg.norm(anchors.endpoints[i] - anchors.endpoints[j]), sigma)
            self.assertEqual(sorted(reference_nms(anchors.endpoints, scores, sigma)), kept.tolist())

    def test_score_shape_mismatch(self):
        anchors = random_anchor_set(np.random.default_rng(0), 4)
        with self.assertRaises(ValidationError):
            select_distinct(anchors, np.zeros(3), 2.5)


class KMeansTests(unittest.TestCase):
    """Tests for k-means over endpoints."""

    def test_single_cluster_is_the_mean(self):
        points = np.random.default_rng(0).normal(size=(50, 2))
        result = kmeans_endpoints(points, 1, seed=0)
        np.testing.assert_allclose(result.centroids[0], points.mean(axis=0), rtol=0, atol=1e-12)
        self.assertTrue(result.converged)

    def test_two_blobs(self):
        rng = np.random.default_rng(1)
        left = rng.normal([-20.0, 0.0], 0.5, size=(40, 2))
        right = rng.normal([20.0, 5.0], 0.5, size=(60, 2))
        result = kmeans_endpoints(np.vstack([left, right]), 2, seed=3)

        centroids = sorted(map(tuple, result.centroids))
        np.testing.assert_allclose(centroids[0], left.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(centroids[1], right.mean(axis=0), atol=1e-9)

    def test_objective_never_increases_and_centroids_are_means(self):
        for seed in range(50):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(seed)
                points = rng.normal(size=(120, 2)) * rng.uniform(1, 10)
                result = kmeans_endpoints(points, int(rng.integers(2, 9)), seed=seed)

                history = np.array(result.objective_history)
                self.assertTrue(np.all(np.diff(history) <= 1e-9 * history[:-1]))
                self.assertTrue(result.converged)
                for cluster, centroid in enumerate(result.centroids):
                    members = points[result.assignment == cluster]
                    np.testing.assert_allclose(centroid, members.mean(axis=0), rtol=0, atol=1e-9)

    def test_shared_initialisation_is_reproducible(self):
        """Identical initial centroids give identical results whatever the seed."""
        points = np.random.default_rng(4).normal(size=(200, 2)) * 10
        init = points[:5]
        first = kmeans_endpoints(points, 5, seed=0, initial_centroids=init)
        second = kmeans_endpoints(points, 5, seed=99, initial_centroids=init)
        self.assertEqual(first.objective, second.objective)
        np.testing.assert_array_equal(first.centroids, second.centroids)

    def test_too_few_distinct_points(self):
        with self.assertRaises(ValidationError):
            kmeans_endpoints(np.zeros((10, 2)), 2, seed=0)

    def test_fit_per_category(self):
        rng = np.random.default_rng(5)
        endpoints = rng.normal(size=(30, 2))
        categories = [0] * 15 + [1] * 15
        fitted = fit_anchor_sets(endpoints, categories, 3, seed=0)

        self.assertEqual(sorted(fitted), [0, 1])
        for category, (anchor_set, _) in fitted.items():
            self.assertEqual(anchor_set.category, category)
            self.assertEqual(len(anchor_set), 3)
            self.assertTrue(anchor_set.is_predefined)


if __name__ == "__main__":
    unittest.main()
