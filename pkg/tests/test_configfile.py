import json
import os
import tempfile
from pathlib import Path
from unittest import TestCase
from unittest.mock import patch

from configfile import (
    CACHE_DIR_ENVVAR, DROPOUT_GRID, LEARNING_RATE_GRID, ConfigError, ConfigFile, RunConfig, VIEWS, architecture_hash,
    config_from_dict, config_hash, featurizer_hash, get_cache_root, grid_overrides, with_overrides,
)


class ConfigFromDictTestCase(TestCase):
    def test_defaults(self):
        config = config_from_dict({})
        self.assertEqual(RunConfig(), config)
        self.assertEqual(list(VIEWS), config.views)
        self.assertEqual(300, config.dim)
        self.assertEqual(0.1, config.tau)

    def test_dotted_keys(self):
        config = config_from_dict({"model.dim": 32, "objective.tau": 0.3, "model.views": ["2d", "fp"]})
        self.assertEqual(32, config.dim)
        self.assertEqual(0.3, config.tau)
        self.assertEqual(["2d", "fp"], config.views)
        self.assertEqual(32, config.to_dict()["model.dim"])

    def test_all_problems_are_reported(self):
        with self.assertRaises(ConfigError) as raised:
            config_from_dict({
                "model.dim": -1,
                "objective.tau": "hot",
                "model.nonsense": 1,
                "fusion.mode": "sum",
            })
        problems = raised.exception.problems
        self.assertEqual(4, len(problems))
        self.assertTrue(any(problem.startswith("model.nonsense") for problem in problems))

    def test_semantic_checks(self):
        for settings in [
            {"model.views": ["2d", "4d"]},
            {"model.views": []},
            {"split.ratios": [0.5, 0.5, 0.5]},
            {"featurize.fp_bits": 1000},
            {"encoder.fp.embed_dim": 10, "encoder.fp.heads": 4},
            {"encoder.gin.dropout": 1.0},
            {"finetune.seeds": []},
            {"train.epochs": -1},
        ]:
            with self.subTest(settings):
                with self.assertRaises(ConfigError):
                    config_from_dict(settings)

    def test_optional_cutoff(self):
        self.assertIsNone(config_from_dict({}).schnet_cutoff)
        self.assertEqual(5.0, config_from_dict({"encoder.schnet.cutoff": 5.0}).schnet_cutoff)

    def test_bool_is_not_an_integer(self):
        with self.assertRaises(ConfigError):
            config_from_dict({"model.dim": True})

    def test_learning_rates(self):
        rates = config_from_dict({"encoder.gin.lr": 0.01}).learning_rates()
        self.assertEqual({"2d", "3d", "fp", "sm", "fusion", "critic"}, set(rates))
        self.assertEqual(0.01, rates["2d"])


class HashTestCase(TestCase):
    def test_featurizer_hash_ignores_training_settings(self):
        base = config_from_dict({})
        trained = config_from_dict({"train.epochs": 3, "objective.tau": 0.5})
        self.assertEqual(featurizer_hash(base), featurizer_hash(trained))
        self.assertEqual(architecture_hash(base), architecture_hash(trained))
        self.assertNotEqual(config_hash(base), config_hash(trained))

    def test_featurizer_hash_tracks_vocabulary(self):
        config = config_from_dict({})
        first = {"alphabet": ["C", "O"], "merges": [["C", "C"]]}
        second = {"alphabet": ["C", "O"], "merges": [["C", "O"]]}
        self.assertNotEqual(featurizer_hash(config, first), featurizer_hash(config, second))
        self.assertNotEqual(featurizer_hash(config), featurizer_hash(config, first))
        self.assertEqual(featurizer_hash(config, first), featurizer_hash(config, dict(reversed(first.items()))))

    def test_architecture_hash_tracks_shapes(self):
        self.assertNotEqual(architecture_hash(config_from_dict({})),
                            architecture_hash(config_from_dict({"model.dim": 64})))
        self.assertNotEqual(featurizer_hash(config_from_dict({})),
                            featurizer_hash(config_from_dict({"featurize.fp_radius": 3})))


class GridTestCase(TestCase):
    def test_default_grid(self):
        grid = grid_overrides()
        self.assertEqual(len(LEARNING_RATE_GRID) * len(DROPOUT_GRID), len(grid))
        for overrides in grid:
            config = with_overrides(config_from_dict({}), overrides)
            with self.subTest(overrides["finetune.head_lr"]):
                self.assertEqual({config.head_lr}, {config.gin_lr, config.schnet_lr, config.fp_lr, config.sm_lr})
                self.assertEqual({config.gin_dropout},
                                 {config.schnet_dropout, config.fp_dropout, config.sm_dropout})
                self.assertEqual(architecture_hash(config_from_dict({})), architecture_hash(config))

    def test_with_overrides_validates(self):
        with self.assertRaises(ConfigError):
            with_overrides(config_from_dict({}), {"finetune.head_lr": -1.0})


class ConfigFileTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.path = Path(self.tmpdir.name, "config.json")

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_no_file(self):
        self.assertEqual(RunConfig(), ConfigFile(None).read_config())

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            ConfigFile(self.path).read_config()

    def test_overrides_win(self):
        self.path.write_text(json.dumps({"model.dim": 64, "train.seed": 1}), encoding="utf-8")
        config = ConfigFile(self.path).read_config({"train.seed": 7})
        self.assertEqual(64, config.dim)
        self.assertEqual(7, config.seed)

    def test_invalid_json(self):
        for content in ["{not json", "[1, 2]"]:
            with self.subTest(content):
                self.path.write_text(content, encoding="utf-8")
                with self.assertRaises(ConfigError):
                    ConfigFile(self.path).read_config()

    def test_write_then_read(self):
        config = config_from_dict({"model.dim": 48, "finetune.seeds": [3, 4]})
        ConfigFile(self.path).write_config(config)
        self.assertEqual(config, ConfigFile(self.path).read_config())


class CacheRootTestCase(TestCase):
    def test_envvar(self):
        with patch.dict(os.environ, {CACHE_DIR_ENVVAR: "/tmp/molfusion-cache"}):
            self.assertEqual(Path("/tmp/molfusion-cache"), get_cache_root())

    def test_xdg(self):
        environ = {key: value for key, value in os.environ.items() if key != CACHE_DIR_ENVVAR}
        environ["XDG_CACHE_HOME"] = "/tmp/xdg"
        with patch.dict(os.environ, environ, clear=True):
            self.assertEqual(Path("/tmp/xdg/molfusion"), get_cache_root())
