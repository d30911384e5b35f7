"""Multiview InfoNCE with a projected cosine critic.

Each of a molecule's view embeddings is an anchor, its fused embedding the
positive, and the fused embeddings of the other molecules in the batch the
negatives.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import torch
from torch import nn

from encoders import glorot_init


class ZeroProjection(ArithmeticError):
    pass


@dataclass
class ContrastiveBatch:
    views: torch.Tensor
    fused: torch.Tensor
    view_mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.views.dim() != 3 or self.fused.dim() != 2:
            raise ValueError(f"expected views (B, M, D) and fused (B, D), got {tuple(self.views.shape)} "
                             f"and {tuple(self.fused.shape)}")
        if self.views.shape[0] != self.fused.shape[0] or self.views.shape[2] != self.fused.shape[1]:
            raise ValueError("views and fused embeddings disagree on batch size or dimension")

    @property
    def size(self) -> int:
        return int(self.fused.shape[0])

    def anchors(self) -> torch.Tensor:
        if self.view_mask is None:
            return self.views
        return self.views[:, self.view_mask.to(torch.bool)]


class CriticProjection(nn.Module):
    """g of the critic, a 2-layer ReLU MLP shared by anchors and positives."""

    def __init__(self, dim: int = 300):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        glorot_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def normalized_projection(x: torch.Tensor, g: nn.Module) -> torch.Tensor:
    projected = g(x)
    norms = projected.norm(p=2, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ZeroProjection("critic projection has zero norm; cosine similarity is undefined")
    return projected / norms


def critic(x: torch.Tensor, y: torch.Tensor, g: nn.Module) -> torch.Tensor:
    return (normalized_projection(x, g) * normalized_projection(y, g)).sum(-1)


def similarity_matrix(batch: ContrastiveBatch, g: nn.Module) -> torch.Tensor:
    """theta(z_i^m, z_j) for every molecule i, present view m, molecule j: (B, M, B)."""
    anchors = normalized_projection(batch.anchors(), g)
    positives = normalized_projection(batch.fused, g)
    return torch.einsum("imd,jd->imj", anchors, positives)


def infonce_from_similarities(theta: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = theta / tau
    size = theta.shape[0]
    positives = logits[torch.arange(size), :, torch.arange(size)]
    return (torch.logsumexp(logits, dim=-1) - positives).mean()


def infonce_loss(batch: ContrastiveBatch, g: nn.Module, tau: float = 0.1) -> torch.Tensor:
    return infonce_from_similarities(similarity_matrix(batch, g), tau)


def loss_gradients(loss: torch.Tensor, named_parameters: Iterable[Tuple[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    """d loss / d parameter for every trainable parameter, zeros where unused."""
    named = [(name, parameter) for name, parameter in named_parameters if parameter.requires_grad]
    grads = torch.autograd.grad(loss, [parameter for _, parameter in named], retain_graph=True,
                                allow_unused=True)
    return {
        name: torch.zeros_like(parameter) if grad is None else grad
        for (name, parameter), grad in zip(named, grads)
    }
