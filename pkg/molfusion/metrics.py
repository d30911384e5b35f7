from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score, mean_absolute_error, mean_squared_error


class MetricKind(Enum):
    ROC_AUC = "roc_auc"
    AP = "ap"
    MAE = "mae"
    RMSE = "rmse"

    @property
    def higher_is_better(self) -> bool:
        return self in (MetricKind.ROC_AUC, MetricKind.AP)


class SingleClass(ValueError):
    def __init__(self, kind: MetricKind, label):
        self.kind = kind
        self.label = label
        super().__init__(f"{kind.value} is undefined when every target is {label}")


def _aligned(preds, targets):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.shape != targets.shape:
        raise ValueError(f"predictions {preds.shape} and targets {targets.shape} are not aligned")
    if preds.size == 0:
        raise ValueError("no predictions to score")
    return preds, targets


def _binary(targets: np.ndarray, kind: MetricKind) -> np.ndarray:
    positive = targets > 0.5
    if positive.all() or not positive.any():
        raise SingleClass(kind, int(positive[0]))
    return positive


def roc_auc(preds, targets) -> float:
    """Mann-Whitney statistic; tied scores share their midrank."""
    preds, targets = _aligned(preds, targets)
    positive = _binary(targets, MetricKind.ROC_AUC)
    ranks = rankdata(preds, method="average")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(preds, targets) -> float:
    preds, targets = _aligned(preds, targets)
    positive = _binary(targets, MetricKind.AP)
    return float(average_precision_score(positive, preds))


def mae(preds, targets) -> float:
    preds, targets = _aligned(preds, targets)
    return float(mean_absolute_error(targets, preds))


def rmse(preds, targets) -> float:
    preds, targets = _aligned(preds, targets)
    return float(np.sqrt(mean_squared_error(targets, preds)))


SCORERS = {
    MetricKind.ROC_AUC: roc_auc,
    MetricKind.AP: average_precision,
    MetricKind.MAE: mae,
    MetricKind.RMSE: rmse,
}


def metric(preds, targets, kind: MetricKind) -> float:
    return SCORERS[kind](preds, targets)


def task_metrics(task: str) -> List[MetricKind]:
    return [MetricKind.ROC_AUC, MetricKind.AP] if task == "classify" else [MetricKind.MAE, MetricKind.RMSE]


def score_tasks(preds: np.ndarray, targets: np.ndarray, kind: MetricKind) -> List[float]:
    """Per-task scores over the labelled rows; tasks without both classes are nan."""
    scores = []
    for task in range(targets.shape[1]):
        labelled = ~np.isnan(targets[:, task])
        try:
            scores.append(metric(preds[labelled, task], targets[labelled, task], kind))
        except (SingleClass, ValueError):
            scores.append(float("nan"))
    return scores


def mean_score(preds: np.ndarray, targets: np.ndarray, kind: MetricKind) -> float:
    scores = [score for score in score_tasks(preds, targets, kind) if not np.isnan(score)]
    return float(np.mean(scores)) if scores else float("nan")


@dataclass
class MetricsReport:
    """Test metrics of every seed, per task and metric kind."""
    tasks: List[str]
    kinds: List[MetricKind]
    runs: List[Dict[str, Dict[str, float]]] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)

    def add_run(self, seed: int, preds: np.ndarray, targets: np.ndarray):
        run = {}
        for kind in self.kinds:
            run[kind.value] = dict(zip(self.tasks, score_tasks(preds, targets, kind)))
        self.runs.append(run)
        self.seeds.append(seed)

    def values(self, kind: MetricKind, task: str) -> List[float]:
        return [run[kind.value][task] for run in self.runs]

    def summary(self, kind: MetricKind, task: str):
        values = np.array([value for value in self.values(kind, task) if not np.isnan(value)])
        if values.size == 0:
            return float("nan"), float("nan")
        return float(values.mean()), float(values.std())

    def rows(self) -> List[Dict[str, object]]:
        rows = []
        for task in self.tasks:
            for kind in self.kinds:
                mean, std = self.summary(kind, task)
                rows.append({
                    "task": task,
                    "metric": kind.value,
                    "mean": f"{mean:.4f}",
                    "std": f"{std:.4f}",
                    "seeds": " ".join(f"{value:.4f}" for value in self.values(kind, task)),
                })
        return rows

    def check(self):
        for run in self.runs:
            for kind_name, scores in run.items():
                kind = MetricKind(kind_name)
                for task, value in scores.items():
                    if np.isnan(value):
                        continue
                    assert value >= 0, f"{kind_name} of {task} is negative"
                    if kind.higher_is_better:
                        assert value <= 1, f"{kind_name} of {task} exceeds 1"


def constant_baseline_mae(targets: Sequence[float]) -> float:
    targets = np.asarray(targets, dtype=np.float64)
    return mae(np.full_like(targets, targets.mean()), targets)
