import math
import tempfile
from pathlib import Path
from unittest import TestCase
from unittest.mock import MagicMock, patch

import numpy as np
import torch

from checkpoint import Checkpoint, IncompatibleCheckpoint
from chem_parse import count_aromatic_rings, parse_smiles
from configfile import grid_overrides
from fusion import MissingCheckpoint, MissingFusionParams
from metrics import MetricKind
from pipeline import (
    DatasetSplit, SplitMethod, TrainingDiverged, TrainingLog, build_property_model, checkpoint_alpha, evaluate,
    finetune, grid_search, masked_task_loss, pretrain, random_split, scaffold_split, with_conformers,
)
from toy_data import linked_rings, small_config, toy_dataset, toy_smiles, toy_vocab

FAST_RATES = {"encoder.gin.lr": 5e-3, "encoder.fp.lr": 5e-3, "fusion.lr": 5e-3, "objective.lr": 5e-3,
              "finetune.head_lr": 5e-3}


def aromatic_labels(corpus):
    return np.array([[float(count_aromatic_rings(parse_smiles(smiles)) > 0)] for smiles in corpus])


class ScaffoldSplitTestCase(TestCase):
    def test_distinct_scaffolds(self):
        split = scaffold_split([parse_smiles(smiles) for smiles in linked_rings(10)])
        self.assertEqual((8, 1, 1), split.sizes())
        split.check(10)
        self.assertIs(SplitMethod.SCAFFOLD, split.method)

    def test_single_scaffold(self):
        graphs = [parse_smiles("C" * length + "O") for length in range(1, 11)]
        with self.assertLogs(level="WARNING") as logs:
            split = scaffold_split(graphs)
        self.assertEqual((10, 0, 0), split.sizes())
        self.assertEqual(2, len(logs.records))

    def test_groups_stay_together(self):
        scaffolds = linked_rings(600)
        corpus = scaffolds[:400] + ["C" + smiles for smiles in scaffolds[:400]] + scaffolds[400:]
        graphs = [parse_smiles(smiles) for smiles in corpus]
        split = scaffold_split(graphs, seed=3)
        self.assertEqual((800, 100, 100), split.sizes())
        split.check(1000)
        train = set(split.train)
        for index in range(400):
            self.assertIn(index, train)
            self.assertIn(index + 400, train)
        self.assertEqual(split.sizes(), scaffold_split(graphs, seed=4).sizes())


class RandomSplitTestCase(TestCase):
    def test_seeded(self):
        first = random_split(50, seed=1)
        self.assertEqual((40, 5, 5), first.sizes())
        first.check(50)
        self.assertEqual(first, random_split(50, seed=1))
        self.assertNotEqual(first.train, random_split(50, seed=2).train)

    def test_check(self):
        with self.assertRaises(AssertionError):
            DatasetSplit([0, 1], [1], [2]).check(3)
        with self.assertRaises(AssertionError):
            DatasetSplit([0], [1], []).check(3)


class TrainingLogTestCase(TestCase):
    def test_csv(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir, "logs", "pretrain.csv")
            log = TrainingLog(path)
            log.append(0, 0.5, 0.001, 12)
            log.append(1, 0.25, 0.001, 10)
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(["epoch,loss,lr,wall_ms", "0,0.5,0.001,12", "1,0.25,0.001,10"], lines)

    def test_no_path(self):
        TrainingLog(None).append(0, 1.0, 0.1, 1)


class MaskedTaskLossTestCase(TestCase):
    def test_unlabelled_entries_are_ignored(self):
        outputs = torch.tensor([[0.0, 5.0], [0.0, -5.0]])
        targets = torch.tensor([[1.0, math.nan], [0.0, math.nan]])
        self.assertAlmostEqual(math.log(2.0), float(masked_task_loss(outputs, targets, "classify")), places=6)
        self.assertAlmostEqual(0.0, float(masked_task_loss(outputs, torch.tensor([[0.0, math.nan]] * 2), "regress")))

    def test_nothing_labelled(self):
        outputs = torch.ones(2, 1, requires_grad=True)
        loss = masked_task_loss(outputs, torch.full((2, 1), math.nan), "classify")
        self.assertEqual(0.0, float(loss))
        loss.backward()
        self.assertEqual(0.0, float(outputs.grad.abs().sum()))


class PretrainTestCase(TestCase):
    def setUp(self):
        self.corpus = toy_smiles(24)
        self.vocab = toy_vocab(self.corpus)

    def test_single_molecule_batches(self):
        config = small_config(**{"train.batch_size": 1, "model.views": ["2d", "fp"]})
        checkpoint = pretrain(config, toy_dataset(self.corpus[:6], self.vocab, config), self.vocab)
        self.assertEqual([0.0, 0.0], checkpoint.loss_trace)

    def test_deterministic(self):
        config = small_config()
        dataset = toy_dataset(self.corpus, self.vocab, config)
        first = pretrain(config, dataset, self.vocab)
        second = pretrain(config, dataset, self.vocab)
        self.assertEqual(first.loss_trace, second.loss_trace)
        for name, value in first.state.items():
            self.assertTrue(torch.equal(value, second.state[name]), name)

    def test_loss_decreases(self):
        corpus = toy_smiles(200)
        vocab = toy_vocab(corpus)
        config = small_config(**{"model.views": ["2d", "fp"], "train.epochs": 20, "train.batch_size": 32},
                              **FAST_RATES)
        checkpoint = pretrain(config, toy_dataset(corpus, vocab, config), vocab)
        self.assertEqual(20, len(checkpoint.loss_trace))
        self.assertLessEqual(checkpoint.loss_trace[-1], 0.7 * checkpoint.loss_trace[0])

    def test_divergence(self):
        config = small_config(**{"model.views": ["2d", "fp"]})
        dataset = toy_dataset(self.corpus, self.vocab, config)
        with patch("pipeline.infonce_loss", return_value=torch.tensor(math.nan)):
            with self.assertLogs(level="ERROR"):
                with self.assertRaises(TrainingDiverged) as raised:
                    pretrain(config, dataset, self.vocab)
        self.assertEqual(("pretrain", 0, 0), (raised.exception.stage, raised.exception.epoch, raised.exception.batch))

    def test_rows_without_conformers(self):
        config = small_config()
        dataset = toy_dataset(self.corpus[:3], self.vocab, config, conformers=0)
        with self.assertLogs(level="WARNING") as logs:
            self.assertEqual(0, len(with_conformers(dataset, ["2d", "3d"])))
        self.assertEqual(3, len(logs.records))
        self.assertEqual(3, len(with_conformers(dataset, ["2d", "fp"])))

    def test_log_file(self):
        config = small_config(**{"model.views": ["2d"]})
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir, "pretrain.csv")
            pretrain(config, toy_dataset(self.corpus, self.vocab, config), self.vocab, path)
            self.assertEqual(3, len(path.read_text(encoding="utf-8").splitlines()))


class FinetuneTestCase(TestCase):
    def setUp(self):
        self.corpus = toy_smiles(40)
        self.vocab = toy_vocab(self.corpus)
        self.labels = aromatic_labels(self.corpus)
        self.config = small_config(**{"model.views": ["2d", "fp"], "train.epochs": 1})
        self.checkpoint = pretrain(self.config, toy_dataset(self.corpus, self.vocab, self.config), self.vocab)

    def dataset(self, config):
        return toy_dataset(self.corpus, self.vocab, config, self.labels, ["aromatic"])

    def test_frozen_fusion_is_untouched(self):
        config = small_config(**{"model.views": ["2d", "fp"], "fusion.mode": "frozen", "split.method": "random"})
        result = finetune(config, self.checkpoint, self.dataset(config), self.vocab)
        fusion = result.models[0].backbone.fusion
        for name, value in self.checkpoint.fusion_state().items():
            self.assertTrue(torch.equal(value, getattr(fusion, name)), name)
        self.assertFalse(any(parameter.requires_grad for parameter in fusion.parameters()))

    def test_zero_epochs_keeps_pretrained_state(self):
        config = small_config(**{"model.views": ["2d", "fp"], "finetune.epochs": 0, "split.method": "random"})
        result = finetune(config, self.checkpoint, self.dataset(config), self.vocab)
        state = result.models[0].backbone.state_dict()
        for name, value in self.checkpoint.state.items():
            self.assertTrue(torch.equal(value, state[name]), name)

    def test_alpha_is_reported(self):
        config = small_config(**{"model.views": ["2d", "fp"], "split.method": "random"})
        result = finetune(config, self.checkpoint, self.dataset(config), self.vocab)
        alpha = result.alphas[0]
        self.assertEqual(4, len(alpha))
        self.assertEqual(0.0, alpha[1])
        self.assertAlmostEqual(1.0, sum(alpha), places=5)

    def test_architecture_mismatch(self):
        config = small_config(**{"model.views": ["2d", "fp"], "model.dim": 32})
        with self.assertRaises(IncompatibleCheckpoint):
            finetune(config, self.checkpoint, self.dataset(config), self.vocab)

    def test_frozen_needs_checkpoint(self):
        with self.assertRaises(MissingCheckpoint):
            build_property_model(small_config(**{"fusion.mode": "frozen"}), self.vocab, 1, None)

    def test_no_labels(self):
        with self.assertRaises(ValueError):
            finetune(self.config, self.checkpoint, toy_dataset(self.corpus, self.vocab, self.config), self.vocab)

    def test_evaluate_matches_report(self):
        config = small_config(**{"model.views": ["2d", "fp"], "split.method": "random", "finetune.seeds": [0, 1]})
        dataset = self.dataset(config)
        with tempfile.TemporaryDirectory() as tmpdir:
            run_dir = Path(tmpdir)
            result = finetune(config, self.checkpoint, dataset, self.vocab, run_dir)
            self.assertTrue((run_dir / "finetuned_seed1.pt").exists())
            self.assertTrue((run_dir / "finetune_seed0.csv").exists())
            report = evaluate(config, run_dir, dataset)
            with self.assertRaises(MissingCheckpoint):
                evaluate(small_config(**{"finetune.seeds": [5]}), run_dir, dataset)
        for kind in (MetricKind.ROC_AUC, MetricKind.AP):
            np.testing.assert_allclose(result.report.values(kind, "aromatic"), report.values(kind, "aromatic"),
                                       rtol=0, atol=1e-6)


class LearningTestCase(TestCase):
    def test_aromaticity_is_learned(self):
        corpus = toy_smiles(200)
        vocab = toy_vocab(corpus)
        config = small_config(**{"model.views": ["2d", "fp"], "split.method": "random", "finetune.epochs": 30,
                                 "train.batch_size": 16}, **FAST_RATES)
        dataset = toy_dataset(corpus, vocab, config, aromatic_labels(corpus), ["aromatic"])
        result = finetune(config, None, dataset, vocab)
        self.assertGreaterEqual(result.report.values(MetricKind.ROC_AUC, "aromatic")[0], 0.95)


class CheckpointAlphaTestCase(TestCase):
    def test_alpha(self):
        corpus = toy_smiles(16)
        vocab = toy_vocab(corpus)
        config = small_config(**{"model.views": ["2d", "fp"], "train.epochs": 1})
        dataset = toy_dataset(corpus, vocab, config)
        alpha = checkpoint_alpha(pretrain(config, dataset, vocab), dataset)
        self.assertEqual((4,), tuple(alpha.shape))
        self.assertEqual([0.0, 0.0], [float(alpha[1]), float(alpha[3])])
        self.assertAlmostEqual(1.0, float(alpha.sum()), places=5)

    def test_missing_fusion(self):
        vocab = toy_vocab(toy_smiles(4))
        checkpoint = Checkpoint(small_config(), {}, vocab)
        with self.assertRaises(MissingFusionParams):
            checkpoint_alpha(checkpoint, toy_dataset(toy_smiles(4), vocab, small_config()))


class GridSearchTestCase(TestCase):
    def setUp(self):
        self.grid = grid_overrides((1e-3, 1e-4), (0.0, 0.5))
        self.corpus = toy_smiles(8)
        self.vocab = toy_vocab(self.corpus)

    def search(self, config, scores):
        results = [MagicMock(**{"validation_score.return_value": score}) for score in scores]
        with patch("pipeline.finetune", side_effect=results) as finetuned:
            chosen, points = grid_search(config, None, MagicMock(), self.vocab, self.grid)
        self.assertEqual(len(self.grid), finetuned.call_count)
        return chosen, points

    def test_best_validation_score_wins(self):
        chosen, points = self.search(small_config(), [0.6, math.nan, 0.9, 0.7])
        self.assertEqual((1e-4, 0.0), (chosen.head_lr, chosen.gin_dropout))
        self.assertEqual(1e-4, chosen.sm_lr)
        self.assertEqual([0.6, 0.9], [point.score for point in points if not math.isnan(point.score)])
        self.assertEqual({"lr": 0.001, "dropout": 0.5, "valid": "nan"}, points[1].row())

    def test_regression_prefers_lower_error(self):
        chosen, _ = self.search(small_config(**{"finetune.task": "regress"}), [0.6, 0.2, 0.9, 0.7])
        self.assertEqual((1e-3, 0.5), (chosen.head_lr, chosen.fp_dropout))

    def test_no_scores_keeps_config(self):
        config = small_config()
        with self.assertLogs(level="WARNING"):
            chosen, points = self.search(config, [math.nan] * 4)
        self.assertIs(config, chosen)
        self.assertEqual(4, len(points))

    def test_validation_score(self):
        config = small_config(**{"model.views": ["2d", "fp"], "split.method": "random", "finetune.seeds": [0, 1]})
        corpus = toy_smiles(40)
        vocab = toy_vocab(corpus)
        dataset = toy_dataset(corpus, vocab, config, aromatic_labels(corpus), ["aromatic"])
        result = finetune(config, None, dataset, vocab)
        self.assertEqual({0, 1}, set(result.valid_scores))
        scores = [score for score in result.valid_scores.values() if not math.isnan(score)]
        if scores:
            self.assertAlmostEqual(float(np.mean(scores)), result.validation_score())
        else:
            self.assertTrue(math.isnan(result.validation_score()))
