"""Batch-level attention over view embeddings.

One weight vector alpha is computed per batch from l2-normalized views and
shared by every molecule in it; the fused embedding is the alpha-weighted
sum of the raw view vectors.
"""

import csv
import io
import math
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from configfile import VIEWS
from util import traced

EXPORT_ENCODING = "utf-8"


class EmptyBatch(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


class MissingFusionParams(KeyError):
    pass


class FusionMode(Enum):
    ATTENTION = "attention"
    MAX = "max"
    MEAN = "mean"


def attention_logits(views: torch.Tensor, q: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """w^m = mean_i q . tanh(W z_i^m / |z_i^m| + b) for views of shape (B, M, D)."""
    if views.dim() != 3 or views.shape[0] == 0:
        raise EmptyBatch("attention needs at least one molecule with every view present")
    normalized = F.normalize(views, p=2, dim=-1)
    scores = torch.tanh(normalized @ W.T + b) @ q
    # sorted so the sum does not depend on molecule order
    return torch.sort(scores, dim=0).values.mean(dim=0)


def attention_weights(views: torch.Tensor, q: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.softmax(attention_logits(views, q, W, b), dim=0)


def aggregate(views: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """z_i = sum_m alpha^m z_i^m; ``views`` is (B, M, D) or (M, D)."""
    return torch.einsum("...md,m->...d", views, alpha.to(views.dtype))


def pool_ablation(views: torch.Tensor, mode: FusionMode) -> torch.Tensor:
    if mode is FusionMode.MAX:
        return views.max(dim=-2).values
    if mode is FusionMode.MEAN:
        return views.mean(dim=-2)
    raise ValueError(f"pool_ablation handles MAX and MEAN, got {mode}")


def full_mask(n_views: int = len(VIEWS)) -> torch.Tensor:
    return torch.ones(n_views, dtype=torch.bool)


class AttentionFusion(nn.Module):
    def __init__(self, dim: int = 300, mode: FusionMode = FusionMode.ATTENTION):
        super().__init__()
        self.mode = mode
        self.frozen = False
        self.q = nn.Parameter(torch.empty(dim))
        self.W = nn.Parameter(torch.empty(dim, dim))
        self.b = nn.Parameter(torch.zeros(dim))
        self.register_buffer("cached_alpha", None, persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.xavier_uniform_(self.W)
        bound = math.sqrt(6.0 / (1 + self.q.shape[0]))
        nn.init.uniform_(self.q, -bound, bound)
        nn.init.zeros_(self.b)

    def fusion_params(self) -> Dict[str, torch.Tensor]:
        return {"q": self.q, "W": self.W, "b": self.b}

    def weights(self, views: torch.Tensor) -> torch.Tensor:
        return attention_weights(views, self.q, self.W, self.b)

    def forward(self, views: torch.Tensor,
                view_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Fuse (B, M, D) views; returns the fused (B, D) and alpha over all M views.

        Masked views get zero weight and take no part in pooling.
        """
        if views.shape[0] == 0:
            raise EmptyBatch("cannot fuse an empty batch")
        mask = full_mask(views.shape[1]) if view_mask is None else view_mask.to(torch.bool)
        present = views[:, mask]
        if self.mode is FusionMode.ATTENTION:
            if not self.training and self.cached_alpha is not None:
                alpha_present = self.cached_alpha.to(views.dtype)[mask]
            else:
                alpha_present = self.weights(present)
            fused = aggregate(present, alpha_present)
        else:
            alpha_present = torch.full((present.shape[1],), 1.0 / present.shape[1], dtype=views.dtype)
            fused = pool_ablation(present, self.mode)
        alpha = views.new_zeros(views.shape[1]).masked_scatter(mask, alpha_present)
        return fused, alpha

    def cache_alpha(self, alpha: Optional[torch.Tensor]):
        self.cached_alpha = None if alpha is None else alpha.detach().clone()

    def set_frozen(self, state: Optional[Dict[str, torch.Tensor]]) -> "AttentionFusion":
        """Load q, W, b from a checkpoint and exclude them from training.

        alpha is still recomputed from the frozen parameters on every batch.
        """
        if state is None:
            raise MissingCheckpoint("a frozen fusion needs the fusion parameters of a pretrained checkpoint")
        missing = [name for name in ("q", "W", "b") if name not in state]
        if missing:
            raise MissingFusionParams(f"checkpoint lacks fusion parameters {missing}")
        with torch.no_grad():
            for name, parameter in self.fusion_params().items():
                parameter.copy_(state[name])
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        self.frozen = True
        self.mode = FusionMode.ATTENTION
        self.cached_alpha = None
        return self


def alpha_rows(alpha: Sequence[float], views: Sequence[str] = VIEWS):
    return [{"view": view, "weight": float(weight)} for view, weight in zip(views, alpha)]


def alpha_csv(alpha: Sequence[float], views: Sequence[str] = VIEWS) -> str:
    memstr = io.StringIO("")
    writer = csv.DictWriter(memstr, ["view", "weight"], lineterminator="\n")
    writer.writeheader()
    for row in alpha_rows(alpha, views):
        writer.writerow({"view": row["view"], "weight": repr(row["weight"])})
    return memstr.getvalue()


@traced
def export_alpha(alpha: Sequence[float], path: Path, plot_path: Optional[Path] = None,
                 title: str = "", views: Sequence[str] = VIEWS):
    Path(path).write_text(alpha_csv(alpha, views), encoding=EXPORT_ENCODING)
    if plot_path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        figure, axes = plt.subplots(figsize=(4, 3))
        axes.bar(list(views), [float(weight) for weight in alpha], color="#4C72B0")
        axes.set_ylim(0, 1)
        axes.set_ylabel("attention weight")
        if title:
            axes.set_title(title)
        figure.tight_layout()
        figure.savefig(plot_path)
        plt.close(figure)
