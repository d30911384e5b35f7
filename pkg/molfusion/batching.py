"""Collation of per-molecule views into one batch of tensors.

Graphs are concatenated with a molecule index per atom, so every encoder
sees each molecule independently of the rest of the batch.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from featurize import MolViews


class ShapeError(ValueError):
    pass


@dataclass
class ViewBatch:
    n_molecules: int
    atom_types: torch.Tensor
    chirality: torch.Tensor
    atom_batch: torch.Tensor
    edge_index: torch.Tensor
    edge_types: torch.Tensor
    edge_dirs: torch.Tensor
    pair_index: torch.Tensor
    positions: Optional[torch.Tensor]
    fingerprints: torch.Tensor
    tokens: torch.Tensor
    token_padding: torch.Tensor

    @property
    def n_atoms(self) -> int:
        return int(self.atom_types.shape[0])


def collate_views(views: Sequence[MolViews], pad_id: int, dtype: torch.dtype = torch.float32) -> ViewBatch:
    if not views:
        raise ShapeError("cannot collate an empty batch")
    fp_lengths = {len(item.fingerprint) for item in views}
    if len(fp_lengths) != 1:
        raise ShapeError(f"fingerprints of different lengths in one batch: {sorted(fp_lengths)}")

    atom_feats, atom_batch, edges, edge_feats, pairs = [], [], [], [], []
    offset = 0
    for molecule, item in enumerate(views):
        n = item.n_atoms
        if item.atom_feats.shape != (n, 2):
            raise ShapeError(f"atom features of molecule {molecule} have shape {item.atom_feats.shape}")
        if len(item.bond_index) != len(item.bond_feats):
            raise ShapeError(f"molecule {molecule}: {len(item.bond_index)} bonds, {len(item.bond_feats)} bond features")
        if len(item.bond_index) and (item.bond_index.min() < 0 or item.bond_index.max() >= n):
            raise ShapeError(f"molecule {molecule}: bond references an atom outside 0..{n - 1}")
        atom_feats.append(item.atom_feats)
        atom_batch.append(np.full(n, molecule, dtype=np.int64))
        if len(item.bond_index):
            forward = item.bond_index + offset
            edges.append(np.concatenate([forward, forward[:, ::-1]]))
            edge_feats.append(np.concatenate([item.bond_feats, item.bond_feats]))
        local = np.arange(n, dtype=np.int64) + offset
        pairs.append(np.stack([np.repeat(local, n), np.tile(local, n)], axis=1))
        offset += n

    atom_feats = np.concatenate(atom_feats).astype(np.int64)
    edge_index = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    edge_feats = np.concatenate(edge_feats) if edge_feats else np.zeros((0, 2), dtype=np.int64)

    positions = None
    if all(item.positions is not None for item in views):
        positions = torch.as_tensor(np.concatenate([item.positions for item in views]), dtype=dtype)

    max_len = max(len(item.tokens) for item in views)
    tokens = np.full((len(views), max_len), pad_id, dtype=np.int64)
    for row, item in enumerate(views):
        tokens[row, :len(item.tokens)] = item.tokens
    tokens = torch.as_tensor(tokens)

    return ViewBatch(
        n_molecules=len(views),
        atom_types=torch.as_tensor(atom_feats[:, 0]),
        chirality=torch.as_tensor(atom_feats[:, 1]),
        atom_batch=torch.as_tensor(np.concatenate(atom_batch)),
        edge_index=torch.as_tensor(np.ascontiguousarray(edge_index.T)),
        edge_types=torch.as_tensor(np.ascontiguousarray(edge_feats[:, 0])),
        edge_dirs=torch.as_tensor(np.ascontiguousarray(edge_feats[:, 1])),
        pair_index=torch.as_tensor(np.ascontiguousarray(np.concatenate(pairs).T)),
        positions=positions,
        fingerprints=torch.as_tensor(np.stack([item.fingerprint for item in views]).astype(np.int64)),
        tokens=tokens,
        token_padding=tokens == pad_id,
    )
