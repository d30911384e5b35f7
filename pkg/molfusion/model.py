from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch
from torch import nn

from batching import ViewBatch
from configfile import RunConfig, VIEWS
from encoders import (
    FingerprintEncoder, FingerprintMLPEncoder, GINEncoder, SchNetEncoder, SmilesEncoder,
)
from fusion import AttentionFusion, FusionMode
from objective import ContrastiveBatch, CriticProjection


@dataclass
class MultiViewOutput:
    views: torch.Tensor
    view_mask: torch.Tensor
    fused: torch.Tensor
    alpha: torch.Tensor

    def contrastive(self) -> ContrastiveBatch:
        return ContrastiveBatch(self.views, self.fused, self.view_mask)


def view_mask(views: Sequence[str]) -> torch.Tensor:
    unknown = [view for view in views if view not in VIEWS]
    if unknown:
        raise ValueError(f"unknown views {unknown}, expected a subset of {list(VIEWS)}")
    return torch.tensor([view in views for view in VIEWS], dtype=torch.bool)


def fusion_mode(name: str) -> FusionMode:
    return FusionMode.ATTENTION if name == "frozen" else FusionMode(name)


class MultiViewModel(nn.Module):
    """The four view encoders, the attention fusion and the critic projection.

    Encoders for all four views always exist so checkpoints share one layout;
    only the active views are computed.
    """

    def __init__(self, config: RunConfig, vocab_size: int, pad_id: int = 0):
        super().__init__()
        self.dim = config.dim
        self.pad_id = pad_id
        if config.fp_variant == "mlp":
            fingerprint = FingerprintMLPEncoder(config.fp_bits, config.dim, config.fp_dropout)
        else:
            fingerprint = FingerprintEncoder(config.fp_bits, config.dim, config.fp_embed_dim,
                                             config.fp_heads, config.fp_chunk, config.fp_dropout)
        self.encoders = nn.ModuleDict({
            "2d": GINEncoder(config.dim, config.gin_layers, config.gin_dropout),
            "3d": SchNetEncoder(config.dim, config.schnet_hidden, config.schnet_layers, config.schnet_rbf,
                                config.schnet_rbf_max, config.schnet_gamma, config.schnet_cutoff,
                                config.schnet_dropout),
            "fp": fingerprint,
            "sm": SmilesEncoder(vocab_size, config.dim, config.sm_dim, config.sm_layers, config.sm_heads,
                                config.sm_max_len, config.sm_frozen, config.sm_dropout, pad_id),
        })
        self.fusion = AttentionFusion(config.dim, fusion_mode(config.fusion_mode))
        self.critic = CriticProjection(config.dim)
        self.active_views: List[str] = [view for view in VIEWS if view in config.views]

    @property
    def dtype(self) -> torch.dtype:
        return self.fusion.W.dtype

    def embed_views(self, batch: ViewBatch, views: Optional[Sequence[str]] = None) -> Dict[str, torch.Tensor]:
        views = self.active_views if views is None else views
        return {view: self.encoders[view](batch) for view in VIEWS if view in views}

    def forward(self, batch: ViewBatch, views: Optional[Sequence[str]] = None) -> MultiViewOutput:
        views = self.active_views if views is None else list(views)
        embeddings = self.embed_views(batch, views)
        mask = view_mask(views)
        stacked = torch.stack([
            embeddings[view] if view in embeddings
            else torch.zeros(batch.n_molecules, self.dim, dtype=self.dtype)
            for view in VIEWS
        ], dim=1)
        fused, alpha = self.fusion(stacked, mask)
        return MultiViewOutput(stacked, mask, fused, alpha)

    def param_groups(self, learning_rates: Dict[str, float], scale: float = 1.0,
                     include_critic: bool = True) -> List[dict]:
        """Named optimizer groups, one per view plus fusion and critic."""
        modules = dict(self.encoders.items())
        modules["fusion"] = self.fusion
        if include_critic:
            modules["critic"] = self.critic
        groups = []
        for name, module in modules.items():
            parameters = [parameter for parameter in module.parameters() if parameter.requires_grad]
            if parameters:
                groups.append({"name": name, "params": parameters, "lr": learning_rates[name] * scale})
        return groups


class PropertyModel(nn.Module):
    """Linear task head on the fused embedding of a multi-view model."""

    def __init__(self, backbone: MultiViewModel, n_tasks: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.dim, n_tasks)
        nn.init.xavier_uniform_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, batch: ViewBatch, views: Optional[Sequence[str]] = None) -> torch.Tensor:
        return self.head(self.backbone(batch, views).fused)
