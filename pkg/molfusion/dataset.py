"""CSV datasets: SMILES, label columns and optional conformer files."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from bpe import BpeVocab
from chem_parse import MolGraph, SmilesSyntaxError, UnsupportedFeature, canonical_key, parse_smiles
from configfile import RunConfig, featurizer_hash
from featurecache import CacheStats, FeatureCache
from featurize import AlignmentError, FormatError, MolViews, align_conformer, build_views, load_conformer

SMILES_COLUMN = "smiles"
CONFORMER_COLUMN = "conformer_dir"
MAX_CONFORMERS = 5
CSV_ENCODING = "utf-8"
STEREO_LABELS = {"R": 1.0, "S": 0.0}


class DataError(ValueError):
    def __init__(self, row: int, smiles: str, reason: str):
        self.row = row
        self.smiles = smiles
        self.reason = reason
        super().__init__(f"row {row} ({smiles!r}): {reason}")


@dataclass
class DatasetManifest:
    name: str
    csv_path: Path
    task: str = "classify"
    label_columns: List[str] = field(default_factory=list)
    conformer_dir: Optional[Path] = None
    labelled: bool = True

    @staticmethod
    def from_config(config: RunConfig, stage: str) -> "DatasetManifest":
        if stage == "pretrain":
            csv_path, conformer_dir, labels = config.pretrain_csv, config.pretrain_conformer_dir, []
        else:
            csv_path, conformer_dir, labels = config.finetune_csv, config.finetune_conformer_dir, config.labels
        return DatasetManifest(
            name=Path(csv_path).stem if csv_path else stage,
            csv_path=Path(csv_path),
            task=config.task,
            label_columns=list(labels),
            conformer_dir=Path(conformer_dir) if conformer_dir else None,
            labelled=stage != "pretrain",
        )

    def problems(self) -> List[str]:
        problems = []
        if not str(self.csv_path) or str(self.csv_path) == ".":
            problems.append(f"{self.name}: no CSV file configured")
        elif not self.csv_path.exists():
            problems.append(f"{self.name}: CSV file {self.csv_path} does not exist")
        if self.conformer_dir is not None and not self.conformer_dir.is_dir():
            problems.append(f"{self.name}: conformer directory {self.conformer_dir} does not exist")
        return problems


@dataclass
class Molecule:
    row: int
    smiles: str
    graph: MolGraph
    key: str
    views: MolViews
    conformers: List[np.ndarray]
    labels: np.ndarray

    def views_with_conformer(self, rng: Optional[np.random.Generator] = None) -> MolViews:
        if not self.conformers:
            return self.views
        if rng is None or len(self.conformers) == 1:
            return self.views.with_positions(self.conformers[0])
        return self.views.with_positions(self.conformers[int(rng.integers(len(self.conformers)))])


@dataclass
class MolDataset:
    manifest: DatasetManifest
    molecules: List[Molecule]
    label_columns: List[str]
    stats: CacheStats = field(default_factory=CacheStats)

    def __len__(self) -> int:
        return len(self.molecules)

    def labels(self) -> np.ndarray:
        if not self.molecules:
            return np.zeros((0, len(self.label_columns)))
        return np.stack([molecule.labels for molecule in self.molecules])

    def subset(self, indices: Sequence[int]) -> "MolDataset":
        return MolDataset(self.manifest, [self.molecules[i] for i in indices], self.label_columns, self.stats)

    def has_conformers(self) -> bool:
        return bool(self.molecules) and all(molecule.conformers for molecule in self.molecules)


def parse_label(value) -> float:
    if value is None:
        return math.nan
    if isinstance(value, str):
        text = value.strip()
        if text.upper() in STEREO_LABELS:
            return STEREO_LABELS[text.upper()]
        if not text:
            return math.nan
        return float(text)
    return float(value)


def read_table(manifest: DatasetManifest) -> pd.DataFrame:
    try:
        table = pd.read_csv(manifest.csv_path, dtype=str, keep_default_na=False, encoding=CSV_ENCODING)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=[SMILES_COLUMN])
    if SMILES_COLUMN not in table.columns:
        raise FormatError(manifest.csv_path, f"missing a '{SMILES_COLUMN}' column")
    return table


def label_columns_of(table: pd.DataFrame, manifest: DatasetManifest) -> List[str]:
    if not manifest.labelled:
        return []
    if manifest.label_columns:
        missing = [column for column in manifest.label_columns if column not in table.columns]
        if missing:
            raise FormatError(manifest.csv_path, f"label columns {missing} not found")
        return list(manifest.label_columns)
    return [column for column in table.columns if column not in (SMILES_COLUMN, CONFORMER_COLUMN)]


def conformer_paths(conformer_dir: Optional[Path], row: int) -> List[Path]:
    if conformer_dir is None:
        return []
    numbered = [conformer_dir / f"{row}_{k}.xyz" for k in range(MAX_CONFORMERS)]
    found = [path for path in numbered if path.exists()]
    if found:
        return found
    single = conformer_dir / f"{row}.xyz"
    return [single] if single.exists() else []


def featurize_molecule(smiles: str, config: RunConfig, vocab: BpeVocab):
    g = parse_smiles(smiles)
    return g, build_views(g, None, vocab, config.fp_bits, config.fp_radius)


def load_dataset(manifest: DatasetManifest, config: RunConfig, vocab: BpeVocab,
                 cache: Optional[FeatureCache] = None, require_conformers: bool = False) -> MolDataset:
    """Parse, featurize and label every row; bad rows are logged and skipped."""
    table = read_table(manifest)
    columns = label_columns_of(table, manifest)
    stats = CacheStats()
    cache_hits = []
    molecules = []
    for row, record in enumerate(table.to_dict("records")):
        smiles = str(record[SMILES_COLUMN]).strip()
        stats.processed += 1
        hits_before = stats.hits
        try:
            molecule = load_row(row, smiles, record, columns, manifest, config, vocab, cache, stats,
                                require_conformers)
        except DataError as error:
            logging.warning("Skipping %s", error)
            stats.skipped += 1
            continue
        stats.parsed += 1
        molecules.append(molecule)
        if stats.hits > hits_before:
            cache_hits.append((molecule.key, smiles, molecule.views))
    if cache is not None and cache_hits:
        stats.audited = min(config.audit_samples, len(cache_hits))
        stats.audit_mismatches = cache.audit(
            cache_hits, lambda text: featurize_molecule(text, config, vocab)[1], config.audit_samples,
            config.seed)
    logging.info("%s: %d processed, %d parsed, %d skipped, %d cache hits",
                 manifest.name, stats.processed, stats.parsed, stats.skipped, stats.hits)
    return MolDataset(manifest, molecules, columns, stats)


def load_row(row: int, smiles: str, record: Dict[str, str], columns: List[str], manifest: DatasetManifest,
             config: RunConfig, vocab: BpeVocab, cache: Optional[FeatureCache], stats: CacheStats,
             require_conformers: bool) -> Molecule:
    try:
        g = parse_smiles(smiles)
        key = canonical_key(g)
        views = cache.get(key, smiles) if cache is not None else None
        if views is None:
            views = build_views(g, None, vocab, config.fp_bits, config.fp_radius)
            stats.misses += 1
            if cache is not None:
                cache.put(key, smiles, views)
        else:
            stats.hits += 1
        conformer_dir = Path(record[CONFORMER_COLUMN]) if record.get(CONFORMER_COLUMN) else manifest.conformer_dir
        conformers = [align_conformer(load_conformer(path), g) for path in conformer_paths(conformer_dir, row)]
        labels = np.array([parse_label(record[column]) for column in columns], dtype=np.float64)
    except (SmilesSyntaxError, UnsupportedFeature, AlignmentError, FormatError) as error:
        raise DataError(row, smiles, str(error))
    except ValueError as error:
        raise DataError(row, smiles, f"unreadable label ({error})")
    if len(views.tokens) > config.sm_max_len:
        raise DataError(row, smiles, f"{len(views.tokens)} tokens exceed encoder.sm.max_len {config.sm_max_len}")
    if require_conformers and not conformers:
        raise DataError(row, smiles, "no conformer file found but the 3d view is active")
    return Molecule(row, smiles, g, key, views, conformers, labels)


def cache_file(cache_root: Path, manifest: DatasetManifest) -> Path:
    return cache_root / f"{manifest.name}.sqlite"


def open_cache(cache_root: Path, manifest: DatasetManifest, config: RunConfig,
               vocab: BpeVocab) -> Optional[FeatureCache]:
    return FeatureCache.open(cache_file(cache_root, manifest), featurizer_hash(config, vocab.to_dict()))


def read_smiles(manifest: DatasetManifest) -> List[str]:
    return [str(smiles).strip() for smiles in read_table(manifest)[SMILES_COLUMN].tolist()]
