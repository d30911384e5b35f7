import json
import logging
import random
import sqlite3
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

from featurize import MolViews
from util import traced


class WrongCacheVersionError(Exception):
    def __init__(self, program_version: str, db_version: str):
        self.program_version = program_version
        self.db_version = db_version
        super().__init__(
            f"Program ({program_version}) and cache version ({db_version}) don't match!",
        )


class Const:
    VIEWS_TABLE = "views"
    VERSION_TABLE = "version"
    DB_VERSION = "1"


@dataclass
class CacheStats:
    processed: int = 0
    parsed: int = 0
    skipped: int = 0
    hits: int = 0
    misses: int = 0
    audited: int = 0
    audit_mismatches: int = 0

    @property
    def failure_rate(self) -> float:
        return self.skipped / self.processed if self.processed else 0.0

    def rows(self):
        return [{"statistic": name, "value": getattr(self, name)}
                for name in ("processed", "parsed", "skipped", "hits", "misses", "audited", "audit_mismatches")]


class CacheTransaction:
    """One unit of work on the cache: committed when the block succeeds, rolled back when it raises.

    A connection opened here is closed on exit; a shared one stays open.
    """

    def __init__(self, connection: Optional[sqlite3.Connection], dbfile: Path):
        self.owns_connection = connection is None
        if connection is None:
            connection = sqlite3.connect(str(dbfile), isolation_level=None)
        connection.row_factory = sqlite3.Row
        self.connection = connection
        self.began = False

    def __enter__(self) -> "CacheTransaction":
        if not self.connection.in_transaction:
            self.connection.execute("BEGIN")
            self.began = True
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        try:
            if self.began:
                if exc_type is None:
                    self.connection.commit()
                else:
                    logging.debug("Rolling back cache transaction on %s", exc_type.__name__)
                    self.connection.rollback()
        finally:
            if self.owns_connection:
                self.connection.close()

    @traced
    def execute_sql(self, sql, *args):
        return self.connection.execute(sql, *args)


class FeatureCache:
    """MolViews keyed by (canonical key, SMILES) and the featurizer config hash.

    An entry whose stored hash differs from the current one counts as a miss
    and is overwritten on the next ``put``.
    """

    def __init__(self, connection: Optional[sqlite3.Connection], dbfile: Path, featurizer_hash: str):
        self.connection = connection
        self.dbfile = dbfile
        self.featurizer_hash = featurizer_hash
        self.ensure_tables()

    def __repr__(self):
        return f"FeatureCache[{self.dbfile}]"

    @staticmethod
    @traced
    def open(dbfile: Path, featurizer_hash: str) -> Optional["FeatureCache"]:
        try:
            dbfile.parent.mkdir(parents=True, exist_ok=True)
            return FeatureCache(None, dbfile, featurizer_hash)
        except (OSError, sqlite3.OperationalError):
            logging.exception(f"Could not open feature cache {dbfile}, featurizing without it")
            return None

    @staticmethod
    @traced
    def keep_open(dbfile: Path, featurizer_hash: str) -> "FeatureCache":
        dbfile.parent.mkdir(parents=True, exist_ok=True)
        connection = sqlite3.connect(str(dbfile), isolation_level=None)
        return FeatureCache(connection, dbfile, featurizer_hash)

    def close(self):
        if self.connection is not None:
            self.connection.close()
            self.connection = None

    @traced
    def get_connection(self) -> CacheTransaction:
        return CacheTransaction(self.connection, self.dbfile)

    @traced
    def ensure_tables(self):
        db_version = self.get_db_version()
        if db_version is None:
            self.create_tables()
            return
        if db_version == Const.DB_VERSION:
            return
        raise WrongCacheVersionError(Const.DB_VERSION, db_version)

    @traced
    def get_db_version(self):
        with self.get_connection() as conn:
            cursor = conn.execute_sql(
                f"SELECT COUNT(1) AS count FROM sqlite_master "
                f"WHERE type='table' AND name='{Const.VERSION_TABLE}'"
            )
            if cursor.fetchone()["count"] == 0:
                return None
            cursor = conn.execute_sql(
                f"SELECT MAX(version) AS version FROM {Const.VERSION_TABLE}"
            )
            return cursor.fetchone()["version"]

    @traced
    def create_tables(self):
        logging.info("Initializing feature cache in {%s}", self.dbfile)
        with self.get_connection() as conn:
            for sql in [
                f"CREATE TABLE {Const.VERSION_TABLE} (version TEXT);",
                f"INSERT INTO {Const.VERSION_TABLE} VALUES ('{Const.DB_VERSION}');",
                f"CREATE TABLE {Const.VIEWS_TABLE} ("
                "canonical_key TEXT NOT NULL, "
                "smiles TEXT NOT NULL, "
                "featurizer_hash TEXT NOT NULL, "
                "views TEXT NOT NULL, "
                "PRIMARY KEY (canonical_key, smiles))",
            ]:
                conn.execute_sql(sql)

    def get(self, canonical_key: str, smiles: str) -> Optional[MolViews]:
        with self.get_connection() as conn:
            cursor = conn.execute_sql(
                f"SELECT featurizer_hash, views FROM {Const.VIEWS_TABLE} "
                f"WHERE canonical_key = ? AND smiles = ?;",
                (canonical_key, smiles),
            )
            row = cursor.fetchone()
        if row is None:
            return None
        if row["featurizer_hash"] != self.featurizer_hash:
            logging.debug("Stale cache entry for {%s}", smiles)
            return None
        return MolViews.from_dict(json.loads(row["views"]))

    def put(self, canonical_key: str, smiles: str, views: MolViews):
        with self.get_connection() as conn:
            conn.execute_sql(
                f"INSERT OR REPLACE INTO {Const.VIEWS_TABLE} VALUES (?, ?, ?, ?);",
                (canonical_key, smiles, self.featurizer_hash, json.dumps(views.to_dict())),
            )

    def count(self) -> int:
        with self.get_connection() as conn:
            cursor = conn.execute_sql(f"SELECT COUNT(1) AS count FROM {Const.VIEWS_TABLE};")
            return cursor.fetchone()["count"]

    def list(self) -> List:
        with self.get_connection() as conn:
            cursor = conn.execute_sql(
                f"SELECT canonical_key, smiles, featurizer_hash FROM {Const.VIEWS_TABLE};"
            )
            return cursor.fetchall()

    @traced
    def audit(self, hits: List[tuple], recompute: Callable[[str], MolViews], samples: int,
              seed: int = 0) -> int:
        """Recompute a sample of cache hits and count the ones that differ.

        ``hits`` holds (canonical_key, smiles, cached views) triples.
        """
        if samples <= 0 or not hits:
            return 0
        rng = random.Random(seed)
        chosen = rng.sample(hits, min(samples, len(hits)))
        mismatches = 0
        for canonical_key, smiles, cached in chosen:
            fresh = recompute(smiles)
            if not cached.identical(fresh.with_positions(cached.positions)):
                logging.warning("Cache entry for {%s} differs from a fresh featurization", smiles)
                self.put(canonical_key, smiles, fresh)
                mismatches += 1
        return mismatches
