import sqlite3
import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import TestCase

import numpy as np

from chem_parse import canonical_key, parse_smiles
from featurecache import CacheStats, Const, FeatureCache, WrongCacheVersionError
from featurize import build_views
from toy_data import toy_vocab

CORPUS = ["CCO", "c1ccccc1", "OCC", "CC(=O)O"]


class FeatureCacheTestCase(TestCase):
    def setUp(self):
        self.vocab = toy_vocab(CORPUS)
        self.cache = FeatureCache(sqlite3.connect(":memory:", isolation_level=None), Path(":memory:"), "hash-a")

    def tearDown(self):
        self.cache.close()

    def featurize(self, smiles):
        return build_views(parse_smiles(smiles), None, self.vocab, 64, 2)

    def key(self, smiles):
        return canonical_key(parse_smiles(smiles))

    def test_miss_then_hit(self):
        self.assertIsNone(self.cache.get(self.key("CCO"), "CCO"))
        views = self.featurize("CCO")
        self.cache.put(self.key("CCO"), "CCO", views)
        self.assertTrue(views.identical(self.cache.get(self.key("CCO"), "CCO")))
        self.assertEqual(1, self.cache.count())

    def test_same_molecule_different_smiles(self):
        self.assertEqual(self.key("CCO"), self.key("OCC"))
        self.cache.put(self.key("CCO"), "CCO", self.featurize("CCO"))
        self.assertIsNone(self.cache.get(self.key("OCC"), "OCC"))
        self.cache.put(self.key("OCC"), "OCC", self.featurize("OCC"))
        self.assertEqual(2, self.cache.count())
        self.assertEqual({"CCO", "OCC"}, {row["smiles"] for row in self.cache.list()})

    def test_stale_hash_is_a_miss(self):
        self.cache.put(self.key("CCO"), "CCO", self.featurize("CCO"))
        other = FeatureCache(self.cache.connection, Path(":memory:"), "hash-b")
        self.assertIsNone(other.get(self.key("CCO"), "CCO"))
        other.put(self.key("CCO"), "CCO", self.featurize("CCO"))
        self.assertEqual(1, other.count())
        self.assertIsNone(self.cache.get(self.key("CCO"), "CCO"))

    def test_audit_repairs_corrupted_entries(self):
        hits = []
        for smiles in CORPUS:
            views = self.featurize(smiles)
            self.cache.put(self.key(smiles), smiles, views)
            hits.append((self.key(smiles), smiles, views))
        corrupted = replace(hits[1][2], fingerprint=np.zeros(64, dtype=np.uint8))
        hits[1] = (hits[1][0], hits[1][1], corrupted)
        self.cache.put(hits[1][0], hits[1][1], corrupted)

        mismatches = self.cache.audit(hits, self.featurize, samples=len(hits))
        self.assertEqual(1, mismatches)
        self.assertTrue(self.featurize("c1ccccc1").identical(self.cache.get(hits[1][0], "c1ccccc1")))
        self.assertEqual(0, self.cache.audit(hits, self.featurize, samples=0))

    def test_failed_write_is_rolled_back(self):
        insert = f"INSERT INTO {Const.VIEWS_TABLE} VALUES (?, ?, ?, ?);"
        with self.assertRaises(sqlite3.IntegrityError):
            with self.cache.get_connection() as conn:
                conn.execute_sql(insert, ("key", "CCO", "hash-a", "{}"))
                conn.execute_sql(insert, ("key", "CCO", "hash-a", "{}"))
        self.assertFalse(self.cache.connection.in_transaction)
        self.assertEqual(0, self.cache.count())
        self.cache.put(self.key("CCO"), "CCO", self.featurize("CCO"))
        self.assertEqual(1, self.cache.count())

    def test_wrong_version(self):
        self.cache.get_connection().execute_sql(f"UPDATE {Const.VERSION_TABLE} SET version = '0';")
        with self.assertRaises(WrongCacheVersionError) as raised:
            FeatureCache(self.cache.connection, Path(":memory:"), "hash-a")
        self.assertEqual("0", raised.exception.db_version)


class CacheFileTestCase(TestCase):
    def test_entries_survive_reopening(self):
        vocab = toy_vocab(CORPUS)
        views = build_views(parse_smiles("CCO"), None, vocab, 64, 2)
        with tempfile.TemporaryDirectory() as tmpdir:
            dbfile = Path(tmpdir, "nested", "cache.sqlite")
            FeatureCache.open(dbfile, "hash-a").put("key", "CCO", views)
            reopened = FeatureCache.keep_open(dbfile, "hash-a")
            self.assertTrue(views.identical(reopened.get("key", "CCO")))
            reopened.close()

    def test_unopenable_file(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertLogs(level="ERROR"):
                self.assertIsNone(FeatureCache.open(Path(tmpdir), "hash-a"))


class CacheStatsTestCase(TestCase):
    def test_failure_rate(self):
        self.assertEqual(0.0, CacheStats().failure_rate)
        stats = CacheStats(processed=8, parsed=6, skipped=2)
        self.assertEqual(0.25, stats.failure_rate)
        self.assertEqual({"statistic": "skipped", "value": 2}, stats.rows()[2])
