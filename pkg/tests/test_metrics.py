import math
from unittest import TestCase

import numpy as np

from metrics import (
    MetricKind, MetricsReport, SingleClass, average_precision, constant_baseline_mae, mae, mean_score, metric,
    rmse, roc_auc, score_tasks, task_metrics,
)


def pairwise_auc(preds, targets):
    positives = [p for p, t in zip(preds, targets) if t == 1]
    negatives = [p for p, t in zip(preds, targets) if t == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in positives for n in negatives)
    return wins / (len(positives) * len(negatives))


class RocAucTestCase(TestCase):
    def test_textbook_example(self):
        self.assertAlmostEqual(0.75, roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))

    def test_matches_pairwise_count(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            with self.subTest(trial=trial):
                size = int(rng.integers(4, 40))
                targets = rng.integers(0, 2, size)
                targets[0], targets[1] = 0, 1
                preds = np.round(rng.random(size), 1)
                self.assertAlmostEqual(pairwise_auc(preds, targets), roc_auc(preds, targets), places=12)

    def test_ties_score_half(self):
        self.assertEqual(0.5, roc_auc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]))

    def test_single_class(self):
        for kind in [MetricKind.ROC_AUC, MetricKind.AP]:
            with self.subTest(kind=kind):
                with self.assertRaises(SingleClass) as raised:
                    metric([0.2, 0.9], [1, 1], kind)
                self.assertEqual(1, raised.exception.label)

    def test_misaligned(self):
        with self.assertRaises(ValueError):
            roc_auc([0.1, 0.2], [0, 1, 1])
        with self.assertRaises(ValueError):
            mae([], [])


class OtherMetricsTestCase(TestCase):
    def test_average_precision(self):
        self.assertAlmostEqual(1.0, average_precision([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))
        self.assertAlmostEqual((1.0 + 2 / 3) / 2, average_precision([0.9, 0.8, 0.7], [1, 0, 1]))

    def test_regression(self):
        self.assertAlmostEqual(1.0, mae([1.0, 2.0], [2.0, 1.0]))
        self.assertAlmostEqual(math.sqrt(2.5), rmse([0.0, 0.0], [1.0, 2.0]))
        self.assertAlmostEqual(1.0, constant_baseline_mae([0.0, 2.0, 0.0, 2.0]))
        for kind in (MetricKind.MAE, MetricKind.RMSE):
            self.assertEqual(0.0, metric([0.5, 1.5, 3.0], [0.5, 1.5, 3.0], kind))

    def test_task_metrics(self):
        self.assertEqual([MetricKind.ROC_AUC, MetricKind.AP], task_metrics("classify"))
        self.assertEqual([MetricKind.MAE, MetricKind.RMSE], task_metrics("regress"))
        self.assertTrue(MetricKind.AP.higher_is_better)
        self.assertFalse(MetricKind.RMSE.higher_is_better)


class TaskScoresTestCase(TestCase):
    def setUp(self):
        self.preds = np.array([[0.1, 0.9, 0.5], [0.8, 0.2, 0.5], [0.7, 0.4, 0.5], [0.2, 0.6, 0.5]])
        self.targets = np.array([[0, 1, 1], [1, np.nan, 1], [1, 0, np.nan], [0, np.nan, 1]])

    def test_unlabelled_rows_are_skipped(self):
        scores = score_tasks(self.preds, self.targets, MetricKind.ROC_AUC)
        self.assertEqual([1.0, 1.0], scores[:2])
        self.assertTrue(math.isnan(scores[2]))
        self.assertEqual(1.0, mean_score(self.preds, self.targets, MetricKind.ROC_AUC))

    def test_report(self):
        report = MetricsReport(["a", "b", "c"], task_metrics("classify"))
        report.add_run(0, self.preds, self.targets)
        report.add_run(1, 1 - self.preds, self.targets)
        report.check()
        self.assertEqual([1.0, 0.0], report.values(MetricKind.ROC_AUC, "a"))
        self.assertEqual((0.5, 0.5), report.summary(MetricKind.ROC_AUC, "a"))
        self.assertTrue(all(math.isnan(value) for value in report.summary(MetricKind.AP, "c")))
        rows = report.rows()
        self.assertEqual(6, len(rows))
        self.assertEqual({"task": "a", "metric": "roc_auc", "mean": "0.5000", "std": "0.5000",
                          "seeds": "1.0000 0.0000"}, rows[0])
        self.assertEqual([0, 1], report.seeds)
