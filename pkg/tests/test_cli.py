import contextlib
import io
import json
import os
import tempfile
from pathlib import Path
from unittest import TestCase
from unittest.mock import patch

from cli import Const, run
from configfile import CACHE_DIR_ENVVAR, grid_overrides
from toy_data import small_config, toy_smiles


class RunTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.root = Path(self.tmpdir.name)
        self.csv_path = self.root / "molecules.csv"
        self.csv_path.write_text("smiles,active\nCCO,1\nc1ccccc1,0\n", encoding="utf-8")
        self.environ = patch.dict(os.environ, {CACHE_DIR_ENVVAR: str(self.root / "cache")})
        self.environ.start()

    def tearDown(self):
        self.environ.stop()
        self.tmpdir.cleanup()

    def write_config(self, **settings) -> Path:
        path = self.root / "config.json"
        content = {"run.dir": str(self.root / "runs"), "data.vocab": str(self.root / "vocab.json"), **settings}
        path.write_text(json.dumps(content), encoding="utf-8")
        return path

    def run_quietly(self, argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            exit_code = run(argv)
        return exit_code, stdout.getvalue(), stderr.getvalue()

    def test_dry_run(self):
        config = self.write_config(**{"pretrain.csv": str(self.csv_path)})
        exit_code, out, _ = self.run_quietly(["--config", str(config), "--dry-run", "pretrain"])
        self.assertEqual(Const.OK, exit_code)
        self.assertIn(str(self.csv_path), out)
        self.assertFalse((self.root / "runs").exists())

    def test_problems_are_listed(self):
        config = self.write_config(**{"finetune.csv": str(self.root / "missing.csv")})
        exit_code, _, err = self.run_quietly(["--config", str(config), "finetune", "--checkpoint",
                                              str(self.root / "missing.pt")])
        self.assertEqual(Const.FAILED, exit_code)
        self.assertIn("missing.csv", err)
        self.assertIn("missing.pt", err)

    def test_case_study_needs_checkpoint(self):
        config = self.write_config(**{"finetune.csv": str(self.csv_path)})
        exit_code, _, err = self.run_quietly(["--config", str(config), "case-study"])
        self.assertEqual(Const.FAILED, exit_code)
        self.assertIn("run.checkpoint", err)

    def test_frozen_fusion_needs_checkpoint(self):
        config = self.write_config(**{"finetune.csv": str(self.csv_path), "split.method": "random",
                                      "split.ratios": [0.5, 0.0, 0.5]})
        exit_code, _, err = self.run_quietly(["--config", str(config), "--fusion", "frozen", "finetune"])
        self.assertEqual(Const.FAILED, exit_code)
        self.assertIn("frozen", err)

    def test_invalid_config(self):
        config = self.write_config(**{"model.dim": -4})
        exit_code, _, err = self.run_quietly(["--config", str(config), "featurize"])
        self.assertEqual(Const.FAILED, exit_code)
        self.assertIn("model.dim", err)

    def test_featurize_empty_file(self):
        self.csv_path.write_text("", encoding="utf-8")
        config = self.write_config(**{"pretrain.csv": str(self.csv_path)})
        exit_code, out, _ = self.run_quietly(["--config", str(config), "--format", "json", "featurize"])
        self.assertEqual(Const.OK, exit_code)
        rows = json.loads(out)
        self.assertEqual({"dataset": "pretrain", "statistic": "processed", "value": 0}, rows[0])

    def test_featurize_fails_on_bad_rows(self):
        self.csv_path.write_text("smiles\nCCO\nC1CC\nC*C\n", encoding="utf-8")
        config = self.write_config(**{"pretrain.csv": str(self.csv_path), "featurize.vocab_size": 20})
        with self.assertLogs(level="WARNING"):
            exit_code, out, _ = self.run_quietly(["--config", str(config), "--format", "csv", "featurize"])
        self.assertEqual(Const.FAILED, exit_code)
        self.assertIn("pretrain,skipped,2", out)
        self.assertTrue((self.root / "vocab.json").exists())

    def test_finetune_grid(self):
        corpus = toy_smiles(20)
        self.csv_path.write_text("smiles,active\n" + "".join(f"{smiles},{i % 2}\n" for i, smiles in enumerate(corpus)),
                                 encoding="utf-8")
        settings = small_config(**{"model.views": ["2d", "fp"], "finetune.epochs": 1, "split.method": "random",
                                   "split.ratios": [0.6, 0.2, 0.2]}).to_dict()
        for key in ("run.dir", "data.vocab"):
            settings.pop(key)
        config = self.write_config(**{**settings, "finetune.csv": str(self.csv_path)})
        grid = grid_overrides((1e-3, 1e-4), (0.0,))
        with patch("pipeline.grid_overrides", return_value=grid) as overrides:
            exit_code, out, _ = self.run_quietly(["--config", str(config), "--format", "csv", "finetune", "--grid"])
        self.assertEqual(Const.OK, exit_code)
        overrides.assert_called_once_with()
        run_dirs = list((self.root / "runs").iterdir())
        self.assertEqual(1, len(run_dirs))
        grid_lines = (run_dirs[0] / "grid.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(["lr,dropout,valid", "0.001,0.0", "0.0001,0.0"], [grid_lines[0]] + [
            line.rsplit(",", 1)[0] for line in grid_lines[1:]])
        self.assertTrue((run_dirs[0] / "metrics.csv").exists())
        self.assertIn("active,roc_auc", out)
