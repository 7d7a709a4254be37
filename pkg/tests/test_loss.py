import math
import unittest

import numpy as np

from eda.core import GaussianTrajectory, MatchBatch, MatchResult, MixtureBatch, MixtureOutput, Trajectory
from eda.loss import (
    ClsKind,
    LossConfig,
    OutputGradient,
    bce_scores,
    ce_scores,
    gaussian_nll,
    gaussian_nll_arrays,
    mixture_loss,
    mixture_loss_batch,
)
from eda.utils.exceptions import ValidationError
from tests.helpers import central_differences, max_relative_error, random_output, random_trajectory


def _random_match(rng: np.random.Generator, n: int) -> MatchResult:
    mask = rng.random(n) < 0.6
    positive = int(rng.integers(n))
    mask[positive] = True
    distances = np.where(mask, 1.0, np.inf)
    distances[positive] = 0.0
    return MatchResult(positive, mask, distances)


OUTPUT_FIELDS = ("mu", "log_sigma", "rho_raw", "score_logits")


def _pack(values: list[MixtureOutput] | list[OutputGradient]) -> np.ndarray:
    return np.concatenate([getattr(value, field).ravel() for value in values for field in OUTPUT_FIELDS])


def _unpack_outputs(vector: np.ndarray, like: list[MixtureOutput]) -> list[MixtureOutput]:
    outputs, offset = [], 0
    for output in like:
        arrays = []
        for field in OUTPUT_FIELDS:
            shape = getattr(output, field).shape
            size = int(np.prod(shape))
            arrays.append(vector[offset:offset + size].reshape(shape))
            offset += size
        outputs.append(MixtureOutput(*arrays, output.layer_index, output.dt, output.bounds))
    return outputs


class GaussianNllTests(unittest.TestCase):
    """Tests for the bivariate Gaussian negative log-likelihood."""

    def test_standard_normal_at_mean(self):
        """Unit variances, no correlation and zero residual leave only the normaliser."""
        comp = GaussianTrajectory(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3))
        loss, _ = gaussian_nll(comp, Trajectory(np.zeros((3, 2))))
        self.assertAlmostEqual(loss, math.log(2 * math.pi), places=12)

    def test_horizon_mismatch(self):
        comp = GaussianTrajectory(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3))
        with self.assertRaises(ValidationError):
            gaussian_nll(comp, Trajectory(np.zeros((4, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mu = rng.normal(size=(4, 2)) * 3
            log_sigma = rng.uniform(-1, 1, size=(4, 2))
            rho_raw = rng.normal(size=4)
            target = rng.normal(size=(4, 2)) * 3
            _, grad = gaussian_nll_arrays(mu, log_sigma, rho_raw, 0.5, target)

            numeric_mu = central_differences(lambda x: gaussian_nll_arrays(x, log_sigma, rho_raw, 0.5, target)[0], mu)
            numeric_ls = central_differences(lambda x: gaussian_nll_arrays(mu, x, rho_raw, 0.5, target)[0], log_sigma)
            numeric_rho = central_differences(lambda x: gaussian_nll_arrays(mu, log_sigma, x, 0.5, target)[0], rho_raw)

            self.assertLess(max_relative_error(grad.mu, numeric_mu), 1e-4)
            self.assertLess(max_relative_error(grad.log_sigma, numeric_ls), 1e-4)
            self.assertLess(max_relative_error(grad.rho_raw, numeric_rho), 1e-4)


class ScoreLossTests(unittest.TestCase):
    """Tests for the classification terms."""

    def test_bce_neutral_components_get_zero_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 10))
            match = _random_match(rng, n)
            _, grad = bce_scores(rng.normal(size=n) * 3, match.positive_index, match.distinct_mask)
            self.assertTrue(np.all(grad[~match.distinct_mask] == 0.0))

    def test_bce_value_and_gradient(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            logits = rng.normal(size=6) * 2
            match = _random_match(rng, 6)
            loss, grad = bce_scores(logits, match.positive_index, match.distinct_mask)

            targets = np.zeros(6)
            targets[match.positive_index] = 1.0
            probabilities = 1 / (1 + np.exp(-logits))
            expected = -(targets * np.log(probabilities) + (1 - targets) * np.log(1 - probabilities))
            self.assertAlmostEqual(loss, expected[match.distinct_mask].mean(), places=10)

            numeric = central_differences(
                lambda x, m=match: bce_scores(x, m.positive_index, m.distinct_mask)[0], logits
            )
            self.assertLess(max_relative_error(grad, numeric), 1e-4)

    def test_bce_rejects_masked_positive(self):
        with self.assertRaises(ValidationError):
            bce_scores(np.zeros(3), 0, [False, True, True])

    def test_ce_gradient(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=5) * 4
        loss, grad = ce_scores(logits, 2)

        self.assertAlmostEqual(loss, -np.log(np.exp(logits[2]) / np.exp(logits).sum()), places=10)
        self.assertAlmostEqual(grad.sum(), 0.0, places=12)
        self.assertLess(max_relative_error(grad, central_differences(lambda x: ce_scores(x, 2)[0], logits)), 1e-4)

    def test_large_logits_stay_finite(self):
        loss, grad = bce_scores(np.array([800.0, -800.0]), 1, [True, True])
        self.assertTrue(np.isfinite(loss))
        self.assertTrue(np.all(np.isfinite(grad)))
        self.assertTrue(np.isfinite(ce_scores(np.array([800.0, -800.0]), 1)[0]))


class MixtureLossTests(unittest.TestCase):
    """Tests for the deeply supervised mixture loss."""

    def test_only_positive_component_gets_regression_gradient(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            outputs = [random_output(rng, 5, 4, layer_index=layer) for layer in (1, 2, 3)]
            matches = [_random_match(rng, 5) for _ in outputs]
            _, grads = mixture_loss(outputs, matches, random_trajectory(rng, 4), LossConfig())

            for grad, match in zip(grads, matches, strict=True):
                others = np.arange(5) != match.positive_index
                self.assertTrue(np.all(grad.mu[others] == 0.0))
                self.assertTrue(np.all(grad.log_sigma[others] == 0.0))
                self.assertTrue(np.all(grad.rho_raw[others] == 0.0))
                self.assertTrue(np.all(grad.score_logits[~match.distinct_mask] == 0.0))

    def test_total_is_weighted_sum(self):
        rng = np.random.default_rng(5)
        outputs = [random_output(rng, 4, 4, layer_index=layer) for layer in (1, 2)]
        matches = [_random_match(rng, 4) for _ in outputs]
        gt = random_trajectory(rng, 4)
        cfg = LossConfig(lambda_reg=0.5, lambda_cls=2.0, per_layer_weights=(1.0, 3.0))

        breakdown, _ = mixture_loss(outputs, matches, gt, cfg)
        weighted = zip((1.0, 3.0), breakdown.per_layer, strict=True)
        expected = sum(weight * (0.5 * reg + 2.0 * cls) for weight, (reg, cls) in weighted)
        self.assertAlmostEqual(breakdown.total, expected, places=12)
        self.assertAlmostEqual(breakdown.reg, sum(reg for reg, _ in breakdown.per_layer), places=12)

    def test_ce_spans_all_components(self):
        """Cross entropy ignores the distinct mask."""
        rng = np.random.default_rng(6)
        output = random_output(rng, 4, 4)
        match = MatchResult(0, [True, False, True, False], [0.0, np.inf, 1.0, np.inf])
        _, grads = mixture_loss([output], [match], random_trajectory(rng, 4), LossConfig(cls_kind=ClsKind.CE))
        self.assertTrue(np.all(grads[0].score_logits != 0.0))

    def test_gradient_of_every_output_value(self):
        """Every mean, log-sigma, correlation and logit of every layer against central differences."""
        rng = np.random.default_rng(8)
        for cls_kind in ClsKind:
            for seed in range(5):
                with self.subTest(cls_kind=cls_kind, seed=seed):
                    outputs = [random_output(rng, 4, 3, layer_index=layer) for layer in (1, 2, 3)]
                    matches = [_random_match(rng, 4) for _ in outputs]
                    gt = random_trajectory(rng, 3)
                    cfg = LossConfig(cls_kind=cls_kind, lambda_cls=0.7)
                    _, grads = mixture_loss(outputs, matches, gt, cfg)

                    def objective(vector, outputs=outputs, matches=matches, gt=gt, cfg=cfg):
                        return mixture_loss(_unpack_outputs(vector, outputs), matches, gt, cfg)[0].total

                    numeric = central_differences(objective, _pack(outputs))
                    self.assertLess(max_relative_error(_pack(grads), numeric), 1e-4)

    def test_component_order_does_not_matter(self):
        rng = np.random.default_rng(9)
        for cls_kind in ClsKind:
            with self.subTest(cls_kind=cls_kind):
                outputs = [random_output(rng, 5, 4, layer_index=layer) for layer in (1, 2)]
                matches = [_random_match(rng, 5) for _ in outputs]
                gt = random_trajectory(rng, 4)
                cfg = LossConfig(cls_kind=cls_kind)
                permutation = rng.permutation(5)
                inverse = np.argsort(permutation)

                permuted_outputs = [
                    MixtureOutput(
                        output.mu[permutation],
                        output.log_sigma[permutation],
                        output.rho_raw[permutation],
                        output.score_logits[permutation],
                        output.layer_index,
                    )
                    for output in outputs
                ]
                permuted_matches = [
                    MatchResult(
                        inverse[match.positive_index], match.distinct_mask[permutation], match.distances[permutation]
                    )
                    for match in matches
                ]

                breakdown, grads = mixture_loss(outputs, matches, gt, cfg)
                permuted_breakdown, permuted_grads = mixture_loss(permuted_outputs, permuted_matches, gt, cfg)
                self.assertAlmostEqual(permuted_breakdown.total, breakdown.total, places=12)
                for grad, permuted in zip(grads, permuted_grads, strict=True):
                    np.testing.assert_allclose(permuted.mu, grad.mu[permutation], rtol=1e-12, atol=1e-15)
                    np.testing.assert_allclose(
                        permuted.score_logits, grad.score_logits[permutation], rtol=1e-12, atol=1e-15
                    )

    def test_batch_equals_scene_by_scene(self):
        rng = np.random.default_rng(10)
        scenes = []
        for _ in range(6):
            outputs = [random_output(rng, 4, 5, layer_index=layer) for layer in (1, 2, 3)]
            scenes.append((outputs, [_random_match(rng, 4) for _ in outputs], random_trajectory(rng, 5)))

        batch = mixture_loss_batch(
            [MixtureBatch.stack([outputs[layer] for outputs, _, _ in scenes]) for layer in range(3)],
            [MatchBatch.stack([matches[layer] for _, matches, _ in scenes]) for layer in range(3)],
            np.stack([gt.points for _, _, gt in scenes]),
            LossConfig(),
        )
        for index, (outputs, matches, gt) in enumerate(scenes):
            breakdown, grads = mixture_loss(outputs, matches, gt, LossConfig())
            scene_loss = batch.breakdown(index)
            self.assertAlmostEqual(scene_loss.total, breakdown.total, places=12)
            np.testing.assert_allclose(scene_loss.per_layer, breakdown.per_layer, rtol=1e-12)
            for layer, grad in enumerate(grads):
                np.testing.assert_allclose(batch.grads[layer].scene(index).mu, grad.mu, rtol=1e-12, atol=1e-15)
                np.testing.assert_allclose(
                    batch.grads[layer].scene(index).score_logits, grad.score_logits, rtol=1e-12, atol=1e-15
                )

    def test_layer_count_mismatch(self):
        rng = np.random.default_rng(7)
        with self.assertRaises(ValidationError):
            mixture_loss([random_output(rng)], [], random_trajectory(rng, 8), LossConfig())
        with self.assertRaises(ValidationError):
            LossConfig(per_layer_weights=(1.0,)).layer_weights(2)


if __name__ == "__main__":
    unittest.main()
