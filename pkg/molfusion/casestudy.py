"""Linear probes on frozen view embeddings: R/S chirality and aromatic ring counts."""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.linear_model import LinearRegression, LogisticRegression
from sklearn.metrics import average_precision_score
from sklearn.model_selection import train_test_split

from chem_parse import MolGraph, count_aromatic_rings
from configfile import VIEWS
from metrics import constant_baseline_mae, mae

PROBE_TEST_FRACTION = 0.2

# Values measured at corpus scale; targets for comparison, not thresholds.
REFERENCE_VALUES = {
    "chirality_ap": {"2d": 0.4952, "3d": 0.4959, "sm": 0.5505, "fp": 0.5246},
    "rings_mae": {"2d": 0.1949, "3d": 0.2021, "sm": 0.3077, "fp": 0.2590},
}


def probe_split(n: int, seed: int):
    indices = np.arange(n)
    if n < 2:
        return indices, indices
    return train_test_split(indices, test_size=PROBE_TEST_FRACTION, random_state=seed)


def chirality_ap(embedding: np.ndarray, labels: np.ndarray, seed: int = 0) -> float:
    labels = np.asarray(labels, dtype=np.float64).ravel() > 0.5
    train, test = probe_split(len(labels), seed)
    if labels[test].all() or not labels[test].any():
        return float(labels[test].mean())
    if labels[train].all() or not labels[train].any():
        scores = np.zeros(len(test))
    else:
        probe = LogisticRegression(max_iter=1000)
        probe.fit(embedding[train], labels[train])
        scores = probe.decision_function(embedding[test])
    return float(average_precision_score(labels[test], scores))


def rings_mae(embedding: np.ndarray, targets: np.ndarray, seed: int = 0):
    """Probe MAE and the MAE of predicting the training mean, both on the test part."""
    targets = np.asarray(targets, dtype=np.float64).ravel()
    train, test = probe_split(len(targets), seed)
    probe = LinearRegression()
    probe.fit(embedding[train], targets[train])
    baseline = mae(np.full(len(test), targets[train].mean()), targets[test])
    return mae(probe.predict(embedding[test]), targets[test]), baseline


def case_study_chirality(embeddings: Dict[str, np.ndarray], labels: Sequence[float],
                         seed: int = 0) -> Dict[str, float]:
    return {view: chirality_ap(embedding, np.asarray(labels), seed) for view, embedding in embeddings.items()}


def case_study_rings(embeddings: Dict[str, np.ndarray], graphs: Sequence[MolGraph],
                     seed: int = 0) -> Dict[str, float]:
    targets = np.array([count_aromatic_rings(g) for g in graphs], dtype=np.float64)
    return {view: rings_mae(embedding, targets, seed)[0] for view, embedding in embeddings.items()}


def ring_baseline(graphs: Sequence[MolGraph]) -> float:
    return constant_baseline_mae([count_aromatic_rings(g) for g in graphs])


def case_study_table(embeddings: Dict[str, np.ndarray], graphs: Sequence[MolGraph],
                     chirality_labels: Optional[Sequence[float]], seed: int = 0) -> List[Dict[str, object]]:
    """One row per view with measured values next to the reference values."""
    targets = np.array([count_aromatic_rings(g) for g in graphs], dtype=np.float64)
    rows = []
    for view in VIEWS:
        if view not in embeddings:
            continue
        ring_probe, ring_constant = rings_mae(embeddings[view], targets, seed)
        row = {
            "view": view,
            "chirality_ap": "",
            "chirality_ap_reference": REFERENCE_VALUES["chirality_ap"][view],
            "rings_mae": f"{ring_probe:.4f}",
            "rings_mae_baseline": f"{ring_constant:.4f}",
            "rings_mae_reference": REFERENCE_VALUES["rings_mae"][view],
        }
        if chirality_labels is not None:
            row["chirality_ap"] = f"{chirality_ap(embeddings[view], np.asarray(chirality_labels), seed):.4f}"
        rows.append(row)
    if chirality_labels is None:
        logging.warning("No chirality labels; only the ring-count probe was run")
    return rows
