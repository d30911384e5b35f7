import json
import logging
import os
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase
from unittest.mock import patch
# This is needed for the next line to work in the integration test execution context
try:
    from molfusion import *
except ImportError:
    pass
from cli import Const, run
from configfile import CACHE_DIR_ENVVAR


logging.basicConfig(level=logging.DEBUG)

RINGS = ["c1ccccc1", "C1CCCCC1", "c1ccncc1", "C1CCOC1", "C1CC1"]
CHAINS = ["C", "CC", "CCO", "CC(=O)O", "CN"]


def write_csv(path: Path):
    lines = ["smiles,aromatic"]
    for ring in RINGS:
        for chain in CHAINS:
            lines.append(f"{chain}{ring},{int(ring[0] == 'c')}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class MolFusionIntegration(TestCase):
    def test_basic_session(self):
        with TemporaryDirectory() as tempdir:
            root = Path(tempdir)
            write_csv(root / "molecules.csv")
            config = root / "config.json"
            config.write_text(json.dumps({
                "pretrain.csv": str(root / "molecules.csv"),
                "finetune.csv": str(root / "molecules.csv"),
                "finetune.labels": ["aromatic"],
                "data.vocab": str(root / "vocab.json"),
                "run.dir": str(root / "runs"),
                "model.views": ["2d", "fp", "sm"],
                "model.dim": 16,
                "featurize.fp_bits": 64,
                "featurize.vocab_size": 48,
                "encoder.fp.embed_dim": 8,
                "encoder.fp.heads": 2,
                "encoder.sm.dim": 16,
                "encoder.sm.heads": 2,
                "mlm.epochs": 1,
                "train.epochs": 2,
                "train.batch_size": 8,
                "finetune.epochs": 2,
                "finetune.seeds": [0, 1],
                "split.method": "random",
            }), encoding="utf-8")
            checkpoint = root / "pretrained.pt"
            common = ["--config", str(config)]
            with patch.dict(os.environ, {CACHE_DIR_ENVVAR: str(root / "cache")}):
                self.assertEqual(Const.OK, run(common + ["featurize"]))
                self.assertEqual(Const.OK, run(common + ["--dry-run", "pretrain"]))
                self.assertEqual(Const.OK, run(common + ["pretrain"]))
                runs = list((root / "runs").glob("pretrain-*/checkpoint.pt"))
                self.assertEqual(1, len(runs))
                runs[0].rename(checkpoint)
                self.assertEqual(Const.OK, run(common + ["finetune", "--checkpoint", str(checkpoint)]))
                self.assertEqual(Const.OK, run(common + ["--fusion", "frozen", "finetune", "--checkpoint",
                                                         str(checkpoint)]))
                self.assertEqual(Const.FAILED, run(common + ["--fusion", "frozen", "finetune"]))
                self.assertEqual(Const.OK, run(common + ["case-study", "--checkpoint", str(checkpoint)]))
                self.assertEqual(Const.OK, run(common + ["export-attention", "--checkpoint", str(checkpoint),
                                                         "--output", str(root / "alpha.csv")]))
            self.assertEqual(5, len((root / "alpha.csv").read_text(encoding="utf-8").splitlines()))
