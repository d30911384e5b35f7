"""View encoders mapping a batch of views to D-dimensional embeddings.

2D graphs go through a GIN with bond-aware messages, 3D positions through
continuous-filter convolutions over radial basis expansions of distances,
fingerprint bits through one multi-head attention layer over bit positions
(or a plain MLP), token strings through a small transformer read at [CLS].
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from batching import ShapeError, ViewBatch, collate_views
from featurize import (
    MolViews, NUM_ATOM_TYPES, NUM_BOND_DIRECTIONS, NUM_BOND_TYPES, NUM_CHIRALITY_TAGS,
)
from util import memprofiled


class DegenerateGeometry(ValueError):
    pass


class SequenceTooLong(ValueError):
    def __init__(self, length: int, max_len: int):
        self.length = length
        self.max_len = max_len
        super().__init__(f"Token sequence of length {length} exceeds the maximum of {max_len}")


@dataclass
class ViewEmbedding:
    view: str
    vector: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(self.vector).all():
            raise ValueError(f"non-finite {self.view} embedding")


def glorot_init(module: nn.Module):
    for submodule in module.modules():
        if isinstance(submodule, nn.Linear):
            nn.init.xavier_uniform_(submodule.weight)
            if submodule.bias is not None:
                nn.init.zeros_(submodule.bias)
        elif isinstance(submodule, nn.Embedding):
            nn.init.xavier_uniform_(submodule.weight)


def mean_pool(values: torch.Tensor, index: torch.Tensor, n_groups: int) -> torch.Tensor:
    sums = values.new_zeros((n_groups, values.shape[1])).index_add_(0, index, values)
    counts = torch.bincount(index, minlength=n_groups).clamp(min=1).to(values.dtype)
    return sums / counts.unsqueeze(1)


def mlp(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))


class GINLayer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.bond_type = nn.Embedding(NUM_BOND_TYPES, dim)
        self.bond_direction = nn.Embedding(NUM_BOND_DIRECTIONS, dim)
        self.atom_mlp = mlp(dim, 2 * dim, dim)

    def forward(self, h: torch.Tensor, batch: ViewBatch) -> torch.Tensor:
        source, target = batch.edge_index
        bond = self.bond_type(batch.edge_types) + self.bond_direction(batch.edge_dirs)
        messages = torch.zeros_like(h).index_add_(0, target, h[source] + bond)
        return self.atom_mlp(h + messages)


class GINEncoder(nn.Module):
    view = "2d"

    def __init__(self, dim: int = 300, layers: int = 5, dropout: float = 0.0):
        super().__init__()
        self.atom_type = nn.Embedding(NUM_ATOM_TYPES, dim)
        self.chirality = nn.Embedding(NUM_CHIRALITY_TAGS, dim)
        self.layers = nn.ModuleList([GINLayer(dim) for _ in range(layers)])
        self.dropout = nn.Dropout(dropout)
        glorot_init(self)

    def node_states(self, batch: ViewBatch) -> torch.Tensor:
        h = self.atom_type(batch.atom_types) + self.chirality(batch.chirality)
        for depth, layer in enumerate(self.layers):
            h = layer(h, batch)
            if depth < len(self.layers) - 1:
                h = self.dropout(F.relu(h))
        return h

    def forward(self, batch: ViewBatch) -> torch.Tensor:
        return mean_pool(self.node_states(batch), batch.atom_batch, batch.n_molecules)


class Interaction(nn.Module):
    """h_i <- MLP(sum_j h_j * W(rbf(d_ij))) + h_i"""

    def __init__(self, hidden: int, n_rbf: int):
        super().__init__()
        self.filter = mlp(n_rbf, hidden, hidden)
        self.update = mlp(hidden, hidden, hidden)

    def forward(self, h: torch.Tensor, pair_index: torch.Tensor, expanded: torch.Tensor) -> torch.Tensor:
        center, other = pair_index
        messages = h[other] * self.filter(expanded)
        summed = torch.zeros_like(h).index_add_(0, center, messages)
        return self.update(summed) + h


class SchNetEncoder(nn.Module):
    view = "3d"

    def __init__(self, out_dim: int = 300, hidden: int = 128, layers: int = 6, n_rbf: int = 50,
                 rbf_max: float = 10.0, gamma: float = 10.0, cutoff: Optional[float] = None,
                 dropout: float = 0.0):
        super().__init__()
        self.gamma = gamma
        self.cutoff = cutoff
        self.register_buffer("centers", torch.linspace(0.0, rbf_max, n_rbf))
        self.atom_type = nn.Embedding(NUM_ATOM_TYPES, hidden)
        self.interactions = nn.ModuleList([Interaction(hidden, n_rbf) for _ in range(layers)])
        self.dropout = nn.Dropout(dropout)
        self.output = nn.Linear(hidden, out_dim)
        glorot_init(self)

    def rbf_expand(self, distances: torch.Tensor) -> torch.Tensor:
        centers = self.centers.to(distances.dtype)
        return torch.exp(-self.gamma * (distances.unsqueeze(-1) - centers) ** 2)

    def forward(self, batch: ViewBatch) -> torch.Tensor:
        if batch.positions is None:
            raise ShapeError("the 3D encoder needs positions for every molecule in the batch")
        if batch.positions.shape != (batch.n_atoms, 3):
            raise ShapeError(f"positions have shape {tuple(batch.positions.shape)}, expected ({batch.n_atoms}, 3)")
        positions = batch.positions.to(self.output.weight.dtype)
        pair_index = batch.pair_index
        center, other = pair_index
        distances = (positions[center] - positions[other]).pow(2).sum(-1).sqrt()
        if self.cutoff is not None:
            keep = (distances <= self.cutoff) | (center == other)
            pair_index = pair_index[:, keep]
            distances = distances[keep]
        expanded = self.rbf_expand(distances)
        h = self.atom_type(batch.atom_types)
        for interaction in self.interactions:
            h = self.dropout(interaction(h, pair_index, expanded))
        embedding = self.output(mean_pool(h, batch.atom_batch, batch.n_molecules))
        if torch.isnan(embedding).any():
            raise DegenerateGeometry("3D encoder produced NaN; check for coincident or non-finite coordinates")
        return embedding


def sinusoidal_positions(n_positions: int, dim: int) -> torch.Tensor:
    position = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    rates = torch.pow(10000.0, torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position / rates)
    table[:, 1::2] = torch.cos(position / rates[: dim // 2])
    return table.float()


class FingerprintEncoder(nn.Module):
    """Bit-value lookup plus sinusoidal bit positions, one attention layer,
    sum pooling over bits, linear map to D."""
    view = "fp"

    def __init__(self, nbits: int = 1024, out_dim: int = 300, embed_dim: int = 64, heads: int = 8,
                 chunk: int = 16, dropout: float = 0.0):
        super().__init__()
        if embed_dim % heads:
            raise ShapeError(f"embed_dim {embed_dim} is not divisible by {heads} heads")
        self.nbits = nbits
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.chunk = chunk
        self.dropout = dropout
        self.value = nn.Embedding(2, embed_dim)
        self.register_buffer("positions", sinusoidal_positions(nbits, embed_dim))
        self.query = nn.Linear(embed_dim, embed_dim, bias=False)
        self.key = nn.Linear(embed_dim, embed_dim, bias=False)
        self.values = nn.Linear(embed_dim, embed_dim, bias=False)
        self.output = nn.Linear(embed_dim, out_dim)
        glorot_init(self)

    def check(self, fingerprints: torch.Tensor):
        if fingerprints.dim() != 2 or fingerprints.shape[1] != self.nbits:
            raise ShapeError(f"fingerprints have shape {tuple(fingerprints.shape)}, expected (B, {self.nbits})")

    def field_embeddings(self, bits: torch.Tensor) -> torch.Tensor:
        return self.value(bits.long()) + self.positions.to(self.value.weight.dtype)

    def split_heads(self, x: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
        b, f, _ = x.shape
        return projection(x).view(b, f, self.heads, self.head_dim).transpose(1, 2)

    def attention_weights(self, fingerprints: torch.Tensor) -> torch.Tensor:
        """Explicit (B, H, F, F) attention matrices, for inspection."""
        self.check(fingerprints)
        x = self.field_embeddings(fingerprints)
        q = self.split_heads(x, self.query)
        k = self.split_heads(x, self.key)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, batch: ViewBatch) -> torch.Tensor:
        fingerprints = batch.fingerprints
        self.check(fingerprints)
        pooled = []
        for start in range(0, fingerprints.shape[0], self.chunk):
            x = self.field_embeddings(fingerprints[start:start + self.chunk])
            attended = F.scaled_dot_product_attention(
                self.split_heads(x, self.query),
                self.split_heads(x, self.key),
                self.split_heads(x, self.values),
                dropout_p=self.dropout if self.training else 0.0,
            )
            pooled.append(attended.transpose(1, 2).reshape(x.shape).sum(dim=1))
        return self.output(torch.cat(pooled))


class FingerprintMLPEncoder(nn.Module):
    view = "fp"

    def __init__(self, nbits: int = 1024, out_dim: int = 300, dropout: float = 0.0):
        super().__init__()
        self.nbits = nbits
        self.first = nn.Linear(nbits, out_dim)
        self.second = nn.Linear(out_dim, out_dim)
        self.dropout = nn.Dropout(dropout)
        glorot_init(self)

    def forward(self, batch: ViewBatch) -> torch.Tensor:
        fingerprints = batch.fingerprints
        if fingerprints.dim() != 2 or fingerprints.shape[1] != self.nbits:
            raise ShapeError(f"fingerprints have shape {tuple(fingerprints.shape)}, expected (B, {self.nbits})")
        x = fingerprints.to(self.first.weight.dtype)
        return self.second(self.dropout(F.relu(self.first(x))))


class SmilesBackbone(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 128, layers: int = 2, heads: int = 4,
                 max_len: int = 128, dropout: float = 0.0, pad_id: int = 0):
        super().__init__()
        self.max_len = max_len
        self.pad_id = pad_id
        self.tokens = nn.Embedding(vocab_size, dim, padding_idx=pad_id)
        self.positions = nn.Embedding(max_len, dim)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=dropout,
                                           activation="relu", batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        glorot_init(self)
        with torch.no_grad():
            self.tokens.weight[pad_id].zero_()

    def forward(self, tokens: torch.Tensor, padding: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] > self.max_len:
            raise SequenceTooLong(tokens.shape[1], self.max_len)
        steps = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.tokens(tokens) + self.positions(steps).unsqueeze(0)
        return self.encoder(x, src_key_padding_mask=padding)


class MaskedLMHead(nn.Module):
    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.dense = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.decoder = nn.Linear(dim, vocab_size)
        glorot_init(self)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.norm(F.relu(self.dense(hidden))))


class SmilesEncoder(nn.Module):
    """[CLS] state of the token backbone followed by a trainable MLP.

    With ``frozen`` the backbone runs without gradients and stays in eval
    mode whatever mode the encoder is in.
    """
    view = "sm"

    def __init__(self, vocab_size: int, out_dim: int = 300, dim: int = 128, layers: int = 2,
                 heads: int = 4, max_len: int = 128, frozen: bool = True, dropout: float = 0.0,
                 pad_id: int = 0):
        super().__init__()
        self.backbone = SmilesBackbone(vocab_size, dim, layers, heads, max_len, dropout, pad_id)
        self.head = mlp(dim, out_dim, out_dim)
        glorot_init(self.head)
        self.frozen = False
        self.freeze(frozen)

    def freeze(self, frozen: bool = True):
        self.frozen = frozen
        for parameter in self.backbone.parameters():
            parameter.requires_grad_(not frozen)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.backbone.eval()
        return self

    def cls_state(self, batch: ViewBatch) -> torch.Tensor:
        if self.frozen:
            with torch.no_grad():
                return self.backbone(batch.tokens, batch.token_padding)[:, 0]
        return self.backbone(batch.tokens, batch.token_padding)[:, 0]

    def forward(self, batch: ViewBatch) -> torch.Tensor:
        return self.head(self.cls_state(batch))


@dataclass
class MlmResult:
    backbone: SmilesBackbone
    head: MaskedLMHead
    loss_trace: List[float]
    diverged: bool = False


def mask_tokens(tokens: torch.Tensor, special_ids: Sequence[int], mask_id: int, rate: float,
                generator: torch.Generator):
    candidates = torch.ones_like(tokens, dtype=torch.bool)
    for special in special_ids:
        candidates &= tokens != special
    selected = (torch.rand(tokens.shape, generator=generator) < rate) & candidates
    return tokens.masked_fill(selected, mask_id), selected


@memprofiled
def mlm_pretrain(sequences: Sequence[Sequence[int]], backbone: SmilesBackbone, vocab_size: int,
                 special_ids: Sequence[int], mask_id: int, epochs: int = 4, batch_size: int = 64,
                 lr: float = 1e-4, mask_rate: float = 0.15, seed: int = 0) -> MlmResult:
    """Masked-token prediction as the only objective of the token backbone.

    Selected positions are replaced by [MASK] outright; masking and batch
    order come from a generator seeded with ``seed``.
    """
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    head = MaskedLMHead(backbone.tokens.embedding_dim, vocab_size)
    parameters = list(backbone.parameters()) + list(head.parameters())
    for parameter in backbone.parameters():
        parameter.requires_grad_(True)
    optimizer = torch.optim.Adam(parameters, lr=lr)
    pad_id = backbone.pad_id
    backbone.train()
    head.train()
    trace: List[float] = []
    for epoch in range(epochs):
        order = torch.randperm(len(sequences), generator=generator).tolist()
        losses = []
        for start in range(0, len(order), batch_size):
            rows = [sequences[i] for i in order[start:start + batch_size]]
            width = max(len(row) for row in rows)
            tokens = torch.full((len(rows), width), pad_id, dtype=torch.long)
            for r, row in enumerate(rows):
                tokens[r, :len(row)] = torch.as_tensor(list(row), dtype=torch.long)
            inputs, selected = mask_tokens(tokens, special_ids, mask_id, mask_rate, generator)
            if not selected.any():
                continue
            logits = head(backbone(inputs, tokens == pad_id))
            loss = F.cross_entropy(logits[selected], tokens[selected])
            if not torch.isfinite(loss):
                logging.warning("MLM loss diverged at epoch %d", epoch)
                return MlmResult(backbone, head, trace, diverged=True)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        trace.append(sum(losses) / len(losses) if losses else float("nan"))
        logging.info("mlm epoch %d loss %.6f", epoch, trace[-1])
    backbone.eval()
    return MlmResult(backbone, head, trace)


def encode_one(encoder: nn.Module, views: MolViews, pad_id: int = 0) -> ViewEmbedding:
    parameter = next(encoder.parameters())
    batch = collate_views([views], pad_id, dtype=parameter.dtype)
    return ViewEmbedding(encoder.view, encoder(batch)[0])


def gin_forward(views: MolViews, encoder: GINEncoder) -> ViewEmbedding:
    return encode_one(encoder, views)


def schnet_forward(views: MolViews, encoder: SchNetEncoder) -> ViewEmbedding:
    if views.positions is None:
        raise ShapeError("the 3D encoder needs positions")
    return encode_one(encoder, views)


def fp_forward(views: MolViews, encoder: FingerprintEncoder) -> ViewEmbedding:
    return encode_one(encoder, views)


def fp_mlp_forward(views: MolViews, encoder: FingerprintMLPEncoder) -> ViewEmbedding:
    return encode_one(encoder, views)


def smiles_forward(views: MolViews, encoder: SmilesEncoder) -> ViewEmbedding:
    return encode_one(encoder, views, pad_id=encoder.backbone.pad_id)
