"""Splitting, pretraining, fine-tuning and evaluation."""

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from batching import collate_views
from bpe import BpeVocab, bpe_train
from checkpoint import Checkpoint, IncompatibleCheckpoint, load_checkpoint, restore_state, save_checkpoint
from chem_parse import MolGraph, canonical_key, murcko_scaffold, subgraph
from configfile import VIEWS, RunConfig, architecture_hash, grid_overrides, with_overrides
from dataset import MolDataset, Molecule
from encoders import mlm_pretrain
from fusion import FusionMode, MissingCheckpoint, MissingFusionParams
from metrics import MetricKind, MetricsReport, mean_score, task_metrics
from model import MultiViewModel, PropertyModel
from objective import infonce_loss
from util import memprofiled, params_norm, seed_everything, traced

LOG_ENCODING = "utf-8"


class SplitMethod(Enum):
    SCAFFOLD = "scaffold"
    RANDOM = "random"


class TrainingDiverged(ArithmeticError):
    def __init__(self, stage: str, epoch: int, batch: int, norm: float):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.norm = norm
        super().__init__(
            f"{stage} loss is not finite at epoch {epoch}, batch {batch} (parameter norm {norm:.6g})",
        )


@dataclass
class DatasetSplit:
    train: List[int]
    valid: List[int]
    test: List[int]
    seed: int = 0
    method: SplitMethod = SplitMethod.SCAFFOLD

    def sizes(self):
        return len(self.train), len(self.valid), len(self.test)

    def check(self, n: int):
        together = self.train + self.valid + self.test
        assert len(together) == len(set(together)), "split subsets overlap"
        assert sorted(together) == list(range(n)), "split does not cover the dataset"


def split_sizes(n: int, ratios: Sequence[float]):
    return int(math.floor(ratios[0] * n + 1e-9)), int(math.floor(ratios[1] * n + 1e-9))


def scaffold_key(g: MolGraph) -> str:
    scaffold = murcko_scaffold(g)
    if scaffold.is_empty():
        return ""
    return canonical_key(subgraph(g, scaffold.atom_indices))


def warn_empty(split: DatasetSplit) -> DatasetSplit:
    for name in ("valid", "test"):
        if not getattr(split, name):
            logging.warning("%s split is empty (%s split of %d molecules)", name, split.method.value,
                            sum(split.sizes()))
    return split


def scaffold_split(graphs: Sequence[MolGraph], ratios: Sequence[float] = (0.8, 0.1, 0.1),
                   seed: int = 0) -> DatasetSplit:
    """Assign whole scaffold groups, largest first, to train, then valid, then test.

    Ties in group size are broken by scaffold key, so the result does not
    depend on ``seed``.
    """
    groups: Dict[str, List[int]] = {}
    for index, g in enumerate(graphs):
        groups.setdefault(scaffold_key(g), []).append(index)
    ordered = sorted(groups.items(), key=lambda item: (-len(item[1]), item[0]))
    n_train, n_valid = split_sizes(len(graphs), ratios)
    train, valid, test = [], [], []
    for _, members in ordered:
        if not train or len(train) + len(members) <= n_train:
            train.extend(members)
        elif len(valid) + len(members) <= n_valid:
            valid.extend(members)
        else:
            test.extend(members)
    return warn_empty(DatasetSplit(sorted(train), sorted(valid), sorted(test), seed, SplitMethod.SCAFFOLD))


def random_split(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    order = np.random.default_rng(seed).permutation(n).tolist()
    n_train, n_valid = split_sizes(n, ratios)
    return warn_empty(DatasetSplit(sorted(order[:n_train]), sorted(order[n_train:n_train + n_valid]),
                                   sorted(order[n_train + n_valid:]), seed, SplitMethod.RANDOM))


def split_dataset(dataset: MolDataset, config: RunConfig) -> DatasetSplit:
    if SplitMethod(config.split_method) is SplitMethod.RANDOM:
        return random_split(len(dataset), config.split_ratios, config.split_seed)
    return scaffold_split([molecule.graph for molecule in dataset.molecules], config.split_ratios,
                          config.split_seed)


class TrainingLog:
    COLUMNS = ("epoch", "loss", "lr", "wall_ms")

    def __init__(self, path: Optional[Path]):
        self.path = path
        if path is not None and not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding=LOG_ENCODING, newline="") as stream:
                csv.writer(stream, lineterminator="\n").writerow(self.COLUMNS)

    def append(self, epoch: int, loss: float, lr: float, wall_ms: int):
        logging.info("epoch %d loss %.6f lr %g (%d ms)", epoch, loss, lr, wall_ms)
        if self.path is None:
            return
        with self.path.open("a", encoding=LOG_ENCODING, newline="") as stream:
            csv.writer(stream, lineterminator="\n").writerow([epoch, repr(loss), lr, wall_ms])


def train_vocab(smiles: Sequence[str], vocab_size: int, path: Optional[Path] = None) -> BpeVocab:
    vocab = bpe_train(list(smiles), vocab_size)
    if path is not None:
        vocab.save(path)
    return vocab


def ensure_vocab(config: RunConfig, smiles: Sequence[str]) -> BpeVocab:
    path = Path(config.vocab_path)
    if path.exists():
        return BpeVocab.load(path)
    logging.info("No vocabulary at %s, training one on %d strings", path, len(smiles))
    return train_vocab(smiles, config.vocab_size, path)


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> List[List[int]]:
    order = list(range(n)) if rng is None else rng.permutation(n).tolist()
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


def collate_molecules(molecules: Sequence[Molecule], pad_id: int, dtype: torch.dtype,
                      rng: Optional[np.random.Generator] = None):
    return collate_views([molecule.views_with_conformer(rng) for molecule in molecules], pad_id, dtype)


def with_conformers(dataset: MolDataset, views: Sequence[str]) -> MolDataset:
    if "3d" not in views:
        return dataset
    keep = [index for index, molecule in enumerate(dataset.molecules) if molecule.conformers]
    for molecule in dataset.molecules:
        if not molecule.conformers:
            logging.warning("Skipping row %d (%s): no conformer for the 3d view", molecule.row, molecule.smiles)
    return dataset.subset(keep)


def view_list(config: RunConfig, views: Optional[Sequence[str]] = None) -> List[str]:
    chosen = config.views if views is None else views
    return [view for view in VIEWS if view in chosen]


@memprofiled
def pretrain(config: RunConfig, dataset: MolDataset, vocab: BpeVocab,
             log_path: Optional[Path] = None) -> Checkpoint:
    """Masked-token pretraining of the token backbone, then multiview InfoNCE."""
    seed_everything(config.seed, config.threads)
    views = view_list(config)
    dataset = with_conformers(dataset, views)
    model = MultiViewModel(config, len(vocab), vocab.pad_id)
    mlm_trace: List[float] = []
    if "sm" in views and config.mlm_epochs > 0 and len(dataset):
        encoder = model.encoders["sm"]
        result = mlm_pretrain([molecule.views.tokens for molecule in dataset.molecules], encoder.backbone,
                              len(vocab), vocab.special_ids, vocab.mask_id, config.mlm_epochs,
                              config.mlm_batch_size, config.mlm_lr, config.mlm_mask_rate, config.seed)
        if result.diverged:
            raise TrainingDiverged("mlm", len(result.loss_trace), -1, params_norm(encoder.backbone))
        mlm_trace = result.loss_trace
        encoder.freeze(config.sm_frozen)

    optimizer = torch.optim.Adam(model.param_groups(config.learning_rates()), weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog(log_path)
    trace: List[float] = []
    for epoch in range(config.epochs if len(dataset) else 0):
        started = time.perf_counter()
        model.train()
        losses = []
        for batch_id, indices in enumerate(batches(len(dataset), config.batch_size, rng)):
            batch = collate_molecules([dataset.molecules[i] for i in indices], vocab.pad_id, model.dtype, rng)
            output = model(batch, views)
            loss = infonce_loss(output.contrastive(), model.critic, config.tau)
            if not torch.isfinite(loss):
                error = TrainingDiverged("pretrain", epoch, batch_id, params_norm(model))
                logging.error("%s; batch rows %s", error, [dataset.molecules[i].row for i in indices])
                raise error
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        trace.append(float(np.mean(losses)))
        log.append(epoch, trace[-1], optimizer.param_groups[0]["lr"],
                   int((time.perf_counter() - started) * 1000))
    return Checkpoint(config, model.state_dict(), vocab, trace, mlm_trace)


def masked_task_loss(outputs: torch.Tensor, targets: torch.Tensor, task: str) -> torch.Tensor:
    """Mean loss over the labelled entries of a (B, T) target matrix."""
    labelled = ~torch.isnan(targets)
    filled = torch.where(labelled, targets, torch.zeros_like(targets))
    if task == "classify":
        losses = F.binary_cross_entropy_with_logits(outputs, filled, reduction="none")
    else:
        losses = (outputs - filled) ** 2
    count = labelled.sum()
    if count == 0:
        return (outputs * 0).sum()
    return (losses * labelled).sum() / count


def embed_dataset(backbone: MultiViewModel, molecules: Sequence[Molecule], views: Sequence[str],
                  batch_size: int = 256) -> torch.Tensor:
    """Frozen (N, M, D) view embeddings; masked views are zero rows."""
    was_training = backbone.training
    backbone.eval()
    chunks = []
    with torch.no_grad():
        for indices in batches(len(molecules), batch_size, None):
            batch = collate_molecules([molecules[i] for i in indices], backbone.pad_id, backbone.dtype)
            chunks.append(backbone(batch, views).views)
    backbone.train(was_training)
    if not chunks:
        return torch.zeros(0, len(VIEWS), backbone.dim, dtype=backbone.dtype)
    return torch.cat(chunks)


def dataset_alpha(backbone: MultiViewModel, molecules: Sequence[Molecule], views: Sequence[str],
                  batch_size: int = 256) -> torch.Tensor:
    """alpha over the whole of ``molecules``, stored for evaluation-mode forwards."""
    embeddings = embed_dataset(backbone, molecules, views, batch_size)
    backbone.fusion.cache_alpha(None)
    with torch.no_grad():
        _, alpha = backbone.fusion(embeddings, view_mask_of(views))
    backbone.fusion.cache_alpha(alpha)
    return alpha


def view_mask_of(views: Sequence[str]) -> torch.Tensor:
    return torch.tensor([view in views for view in VIEWS], dtype=torch.bool)


def predict(model: PropertyModel, molecules: Sequence[Molecule], views: Sequence[str], task: str,
            batch_size: int = 256) -> np.ndarray:
    if not molecules:
        return np.zeros((0, model.head.out_features))
    model.eval()
    dataset_alpha(model.backbone, molecules, views, batch_size)
    outputs = []
    with torch.no_grad():
        for indices in batches(len(molecules), batch_size, None):
            batch = collate_molecules([molecules[i] for i in indices], model.backbone.pad_id, model.backbone.dtype)
            output = model(batch, views)
            outputs.append(torch.sigmoid(output) if task == "classify" else output)
    model.backbone.fusion.cache_alpha(None)
    return torch.cat(outputs).double().numpy()


def selection_metric(task: str) -> MetricKind:
    return MetricKind.ROC_AUC if task == "classify" else MetricKind.MAE


def targets_of(molecules: Sequence[Molecule]) -> np.ndarray:
    return np.stack([molecule.labels for molecule in molecules]) if molecules else np.zeros((0, 0))


def finetune_groups(model: PropertyModel, config: RunConfig, scale: float) -> List[dict]:
    groups = model.backbone.param_groups(config.learning_rates(), scale, include_critic=False)
    groups.append({"name": "head", "params": list(model.head.parameters()), "lr": config.head_lr})
    return groups


@memprofiled
def fit(model: PropertyModel, train: Sequence[Molecule], valid: Sequence[Molecule], config: RunConfig,
        views: Sequence[str], seed: int, scale: float = 1.0, log_path: Optional[Path] = None) -> List[float]:
    """Train ``model`` in place and keep the epoch with the best validation score."""
    optimizer = torch.optim.Adam(finetune_groups(model, config, scale), weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)
    kind = selection_metric(config.task)
    best_state, best_score = None, None
    log = TrainingLog(log_path)
    trace = []
    for epoch in range(config.finetune_epochs if train else 0):
        started = time.perf_counter()
        model.train()
        losses = []
        for batch_id, indices in enumerate(batches(len(train), config.batch_size, rng)):
            chosen = [train[i] for i in indices]
            batch = collate_molecules(chosen, model.backbone.pad_id, model.backbone.dtype, rng)
            targets = torch.as_tensor(targets_of(chosen), dtype=model.backbone.dtype)
            loss = masked_task_loss(model(batch, views), targets, config.task)
            if not torch.isfinite(loss):
                raise TrainingDiverged("finetune", epoch, batch_id, params_norm(model))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        trace.append(float(np.mean(losses)))
        log.append(epoch, trace[-1], optimizer.param_groups[0]["lr"],
                   int((time.perf_counter() - started) * 1000))
        if valid:
            score = mean_score(predict(model, valid, views, config.task), targets_of(valid), kind)
            if math.isnan(score):
                continue
            if best_score is None or (score > best_score if kind.higher_is_better else score < best_score):
                best_score = score
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return trace


def check_compatible(config: RunConfig, checkpoint: Checkpoint, path="checkpoint"):
    if architecture_hash(config) != architecture_hash(checkpoint.config):
        raise IncompatibleCheckpoint(path, ["architecture settings differ from the pretrained checkpoint"])


@dataclass
class FinetuneResult:
    report: MetricsReport
    split: DatasetSplit
    models: Dict[int, PropertyModel] = field(default_factory=dict)
    alphas: Dict[int, List[float]] = field(default_factory=dict)
    valid_scores: Dict[int, float] = field(default_factory=dict)

    def validation_score(self) -> float:
        """Mean best-epoch validation score over the seeds that have one."""
        scores = [score for score in self.valid_scores.values() if not math.isnan(score)]
        return float(np.mean(scores)) if scores else math.nan


def build_property_model(config: RunConfig, vocab: BpeVocab, n_tasks: int,
                         checkpoint: Optional[Checkpoint]) -> PropertyModel:
    backbone = MultiViewModel(config, len(vocab), vocab.pad_id)
    if checkpoint is not None:
        restore_state(backbone, checkpoint.state)
    else:
        logging.info("No checkpoint: every encoder starts from Glorot initialization")
    if config.fusion_mode == "frozen":
        if checkpoint is None:
            raise MissingCheckpoint("fusion.mode frozen needs a pretrained checkpoint")
        backbone.fusion.set_frozen(checkpoint.fusion_state())
    return PropertyModel(backbone, n_tasks)


@memprofiled
def finetune(config: RunConfig, checkpoint: Optional[Checkpoint], dataset: MolDataset, vocab: BpeVocab,
             run_dir: Optional[Path] = None, views: Optional[Sequence[str]] = None) -> FinetuneResult:
    """Fine-tune once per seed and report test metrics of the best validation epoch."""
    if checkpoint is not None:
        check_compatible(config, checkpoint)
        vocab = checkpoint.vocab
    views = view_list(config, views)
    dataset = with_conformers(dataset, views)
    if not dataset.label_columns:
        raise ValueError(f"{dataset.manifest.name}: no label columns to fine-tune on")
    split = split_dataset(dataset, config)
    train = [dataset.molecules[i] for i in split.train]
    valid = [dataset.molecules[i] for i in split.valid]
    test = [dataset.molecules[i] for i in split.test]
    report = MetricsReport(dataset.label_columns, task_metrics(config.task))
    result = FinetuneResult(report, split)
    scale = config.finetune_lr_scale if checkpoint is not None else 1.0
    for seed in config.finetune_seeds:
        seed_everything(seed, config.threads)
        model = build_property_model(config, vocab, len(dataset.label_columns), checkpoint)
        log_path = None if run_dir is None else run_dir / f"finetune_seed{seed}.csv"
        fit(model, train, valid, config, views, seed, scale, log_path)
        if valid:
            result.valid_scores[seed] = mean_score(predict(model, valid, views, config.task), targets_of(valid),
                                                   selection_metric(config.task))
        if test:
            report.add_run(seed, predict(model, test, views, config.task), targets_of(test))
        else:
            logging.warning("Seed %d: empty test split, nothing to report", seed)
        alpha = dataset_alpha(model.backbone, train, views, config.batch_size) if train else None
        model.backbone.fusion.cache_alpha(None)
        result.models[seed] = model
        result.alphas[seed] = [] if alpha is None else [float(weight) for weight in alpha]
        if run_dir is not None:
            save_finetuned(run_dir / f"finetuned_seed{seed}.pt", config, model, vocab, result.alphas[seed])
    return result


@dataclass
class GridPoint:
    overrides: Dict[str, object]
    score: float

    def row(self) -> Dict[str, object]:
        return {
            "lr": self.overrides.get("finetune.head_lr", ""),
            "dropout": self.overrides.get("encoder.gin.dropout", ""),
            "valid": f"{self.score:.4f}",
        }


def grid_search(config: RunConfig, checkpoint: Optional[Checkpoint], dataset: MolDataset, vocab: BpeVocab,
                grid: Optional[Sequence[Dict[str, object]]] = None) -> Tuple[RunConfig, List[GridPoint]]:
    """Fine-tune at every grid point and return the config with the best mean validation score.

    Points without a validation score never win; if none has one the
    configured settings are kept.
    """
    kind = selection_metric(config.task)
    points = []
    best_config, best_score = config, None
    for overrides in grid_overrides() if grid is None else grid:
        candidate = with_overrides(config, overrides)
        score = finetune(candidate, checkpoint, dataset, vocab).validation_score()
        points.append(GridPoint(dict(overrides), score))
        logging.info("Grid point %s: validation %s %.4f", points[-1].row(), kind.value, score)
        if math.isnan(score):
            continue
        if best_score is None or (score > best_score if kind.higher_is_better else score < best_score):
            best_config, best_score = candidate, score
    if best_score is None:
        logging.warning("No grid point has a validation score, keeping the configured settings")
    return best_config, points


def save_finetuned(path: Path,config: RunConfig, model: PropertyModel, vocab: BpeVocab, alpha: List[float]):
    save_checkpoint(path, Checkpoint(
        config=config,
        state=model.backbone.state_dict(),
        vocab=vocab,
        head_state=model.head.state_dict(),
        alpha=alpha,
    ))


@traced
def load_finetuned(path: Path, config: RunConfig, n_tasks: int) -> PropertyModel:
    checkpoint = load_checkpoint(path, config)
    backbone = MultiViewModel(checkpoint.config, len(checkpoint.vocab), checkpoint.vocab.pad_id)
    restore_state(backbone, checkpoint.state, path)
    model = PropertyModel(backbone, n_tasks)
    if checkpoint.head_state is None:
        raise IncompatibleCheckpoint(path, ["no task head stored"])
    restore_state(model.head, checkpoint.head_state, path)
    return model


def evaluate(config: RunConfig, run_dir: Path, dataset: MolDataset,
             views: Optional[Sequence[str]] = None) -> MetricsReport:
    """Score the per-seed fine-tuned models of ``run_dir`` on the test split."""
    views = view_list(config, views)
    dataset = with_conformers(dataset, views)
    split = split_dataset(dataset, config)
    test = [dataset.molecules[i] for i in split.test]
    report = MetricsReport(dataset.label_columns, task_metrics(config.task))
    for seed in config.finetune_seeds:
        path = run_dir / f"finetuned_seed{seed}.pt"
        if not path.exists():
            raise MissingCheckpoint(f"no fine-tuned model for seed {seed} at {path}")
        model = load_finetuned(path, config, len(dataset.label_columns))
        if test:
            report.add_run(seed, predict(model, test, views, config.task), targets_of(test))
    return report


def checkpoint_alpha(checkpoint: Checkpoint, dataset: MolDataset, views: Optional[Sequence[str]] = None,
                     batch_size: int = 256) -> torch.Tensor:
    """Full-dataset alpha of a checkpoint's fusion parameters."""
    config = checkpoint.config
    if checkpoint.fusion_state() is None:
        raise MissingFusionParams("checkpoint has no fusion parameters")
    views = view_list(config, views)
    dataset = with_conformers(dataset, views)
    backbone = MultiViewModel(config, len(checkpoint.vocab), checkpoint.vocab.pad_id)
    restore_state(backbone, checkpoint.state)
    backbone.fusion.mode = FusionMode.ATTENTION
    return dataset_alpha(backbone, dataset.molecules, views, batch_size)
