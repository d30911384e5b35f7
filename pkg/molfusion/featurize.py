"""The four model-ready views of a parsed molecule."""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bpe import BpeVocab, bpe_encode
from chem_parse import BondDirection, BondOrder, MolGraph, Parity
from hashing import hash_ints, refine_once

ATOM_TYPES = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H")
UNK_ATOM_TYPE = len(ATOM_TYPES)
NUM_ATOM_TYPES = len(ATOM_TYPES) + 1

CHIRALITY_TAGS = {Parity.NONE: 0, Parity.CW: 1, Parity.CCW: 2}
CHIRALITY_OTHER = 3
NUM_CHIRALITY_TAGS = 4

BOND_TYPES = {BondOrder.SINGLE: 0, BondOrder.DOUBLE: 1, BondOrder.TRIPLE: 2, BondOrder.AROMATIC: 3}
NUM_BOND_TYPES = 4
BOND_DIRECTIONS = {BondDirection.NONE: 0, BondDirection.UP: 1, BondDirection.DOWN: 2}
NUM_BOND_DIRECTIONS = 3

DEFAULT_FP_BITS = 1024
DEFAULT_FP_RADIUS = 2
XYZ_ENCODING = "utf-8"


class AlignmentError(ValueError):
    def __init__(self, expected: int, actual: int, detail: str = ""):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Coordinates have {actual} rows, molecule has {expected} atoms{detail}")


class FormatError(ValueError):
    def __init__(self, path, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class CountMismatch(FormatError):
    def __init__(self, path, declared: int, found: int):
        self.declared = declared
        self.found = found
        super().__init__(path, f"declares {declared} atoms, found {found} coordinate lines")


@dataclass(frozen=True)
class MolViews:
    """Adjacency, atom/bond indices, optional positions, fingerprint and tokens.

    ``bond_index`` holds one (a, b) row per bond, aligned with ``bond_feats``.
    """
    adjacency: np.ndarray
    atom_feats: np.ndarray
    bond_index: np.ndarray
    bond_feats: np.ndarray
    positions: Optional[np.ndarray]
    fingerprint: np.ndarray
    tokens: Tuple[int, ...]

    @property
    def n_atoms(self) -> int:
        return int(self.atom_feats.shape[0])

    def with_positions(self, coords: Optional[np.ndarray]) -> "MolViews":
        if coords is not None:
            coords = np.asarray(coords, dtype=np.float64)
            if coords.shape != (self.n_atoms, 3):
                raise AlignmentError(self.n_atoms, coords.shape[0])
        return replace(self, positions=coords)

    def to_dict(self) -> dict:
        return {
            "n_atoms": self.n_atoms,
            "atom_feats": self.atom_feats.tolist(),
            "bond_index": self.bond_index.tolist(),
            "bond_feats": self.bond_feats.tolist(),
            "positions": None if self.positions is None else self.positions.tolist(),
            "fp_bits": int(self.fingerprint.shape[0]),
            "fingerprint": fingerprint_to_hex(self.fingerprint),
            "tokens": list(self.tokens),
        }

    @staticmethod
    def from_dict(content: dict) -> "MolViews":
        n_atoms = content["n_atoms"]
        bond_index = np.asarray(content["bond_index"], dtype=np.int64).reshape(-1, 2)
        return MolViews(
            adjacency=adjacency_matrix(n_atoms, bond_index),
            atom_feats=np.asarray(content["atom_feats"], dtype=np.int64).reshape(n_atoms, 2),
            bond_index=bond_index,
            bond_feats=np.asarray(content["bond_feats"], dtype=np.int64).reshape(-1, 2),
            positions=None if content["positions"] is None
            else np.asarray(content["positions"], dtype=np.float64),
            fingerprint=fingerprint_from_hex(content["fingerprint"], content["fp_bits"]),
            tokens=tuple(content["tokens"]),
        )

    def identical(self, other: "MolViews") -> bool:
        def same(left, right):
            if left is None or right is None:
                return left is None and right is None
            return left.shape == right.shape and np.array_equal(left, right)

        return (
            same(self.adjacency, other.adjacency)
            and same(self.atom_feats, other.atom_feats)
            and same(self.bond_index, other.bond_index)
            and same(self.bond_feats, other.bond_feats)
            and same(self.positions, other.positions)
            and same(self.fingerprint, other.fingerprint)
            and self.tokens == other.tokens
        )


@dataclass(frozen=True)
class Conformer:
    elements: Tuple[str, ...]
    coords: np.ndarray


def atom_type_index(element: str) -> int:
    try:
        return ATOM_TYPES.index(element)
    except ValueError:
        return UNK_ATOM_TYPE


def adjacency_matrix(n_atoms: int, bond_index: np.ndarray) -> np.ndarray:
    adjacency = np.zeros((n_atoms, n_atoms), dtype=np.uint8)
    if len(bond_index):
        adjacency[bond_index[:, 0], bond_index[:, 1]] = 1
        adjacency[bond_index[:, 1], bond_index[:, 0]] = 1
    return adjacency


def build_views(g: MolGraph, coords: Optional[np.ndarray], vocab: BpeVocab,
                fp_bits: int = DEFAULT_FP_BITS, fp_radius: int = DEFAULT_FP_RADIUS) -> MolViews:
    if coords is not None:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] != g.n_atoms or coords.shape[1] != 3:
            raise AlignmentError(g.n_atoms, coords.shape[0] if coords.ndim else 0)
    atom_feats = np.array(
        [(atom_type_index(atom.element), CHIRALITY_TAGS.get(atom.parity, CHIRALITY_OTHER))
         for atom in g.atoms],
        dtype=np.int64,
    ).reshape(g.n_atoms, 2)
    bond_index = np.array([(bond.a, bond.b) for bond in g.bonds], dtype=np.int64).reshape(-1, 2)
    bond_feats = np.array(
        [(BOND_TYPES[bond.order], BOND_DIRECTIONS[bond.direction]) for bond in g.bonds],
        dtype=np.int64,
    ).reshape(-1, 2)
    return MolViews(
        adjacency=adjacency_matrix(g.n_atoms, bond_index),
        atom_feats=atom_feats,
        bond_index=bond_index,
        bond_feats=bond_feats,
        positions=coords,
        fingerprint=morgan_fingerprint(g, fp_radius, fp_bits),
        tokens=tuple(bpe_encode(g.source_smiles, vocab)),
    )


def initial_invariants(g: MolGraph, atom: int) -> Tuple[int, ...]:
    """ECFP4 connectivity invariants of one heavy atom."""
    record = g.atoms[atom]
    return (
        record.atomic_number,
        g.heavy_degree(atom),
        g.total_h(atom),
        record.formal_charge,
        record.isotope or 0,
        int(atom in g.ring_atoms),
    )


def morgan_identifiers(g: MolGraph, radius: int) -> List[Dict[int, int]]:
    """Identifiers per round, round 0 first, keyed by heavy-atom index."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    heavy = [atom.index for atom in g.atoms if atom.element != "H"]
    heavy_set = set(heavy)
    neighbors = {
        atom: [(bond.order.value, other) for other, bond in g.neighbors[atom] if other in heavy_set]
        for atom in heavy
    }
    rounds = [{atom: hash_ints(initial_invariants(g, atom)) for atom in heavy}]
    for r in range(1, radius + 1):
        rounds.append(refine_once(rounds[-1], neighbors, prefix=(r,)))
    return rounds


def morgan_fingerprint(g: MolGraph, radius: int = DEFAULT_FP_RADIUS,
                       nbits: int = DEFAULT_FP_BITS) -> np.ndarray:
    if nbits <= 0 or nbits & (nbits - 1):
        raise ValueError(f"nbits must be a power of two, got {nbits}")
    bits = np.zeros(nbits, dtype=np.uint8)
    for identifiers in morgan_identifiers(g, radius):
        for identifier in identifiers.values():
            bits[identifier % nbits] = 1
    return bits


def fingerprint_to_hex(bits: np.ndarray) -> str:
    return np.packbits(bits.astype(np.uint8), bitorder="big").tobytes().hex()


def fingerprint_from_hex(text: str, nbits: int) -> np.ndarray:
    packed = np.frombuffer(bytes.fromhex(text), dtype=np.uint8)
    return np.unpackbits(packed, bitorder="big")[:nbits].astype(np.uint8)


def load_conformer(path) -> Conformer:
    path = Path(path)
    try:
        lines = path.read_text(encoding=XYZ_ENCODING).splitlines()
    except UnicodeDecodeError as error:
        raise FormatError(path, f"not {XYZ_ENCODING} text ({error.reason} at byte {error.start})")
    if not lines:
        raise FormatError(path, "empty file")
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise FormatError(path, f"first line must be the atom count, got {lines[0]!r}")
    if declared < 0:
        raise FormatError(path, f"negative atom count {declared}")
    body = [line for line in lines[2:] if line.strip()]
    if len(body) != declared:
        raise CountMismatch(path, declared, len(body))
    elements = []
    coords = np.zeros((declared, 3), dtype=np.float64)
    for row, line in enumerate(body):
        parts = line.split()
        if len(parts) < 4:
            raise FormatError(path, f"line {row + 3}: expected 'El x y z', got {line!r}")
        elements.append(parts[0])
        try:
            coords[row] = [float(value) for value in parts[1:4]]
        except ValueError:
            raise FormatError(path, f"line {row + 3}: non-numeric coordinate in {line!r}")
    return Conformer(tuple(elements), coords)


def align_conformer(conformer: Conformer, g: MolGraph) -> np.ndarray:
    """Coordinates row-aligned with ``g.atoms``.

    Hydrogen rows are dropped when the file carries more atoms than the graph
    and removing them leaves exactly the graph's atoms.
    """
    elements: Sequence[str] = conformer.elements
    coords = conformer.coords
    if len(elements) != g.n_atoms:
        keep = [row for row, element in enumerate(elements) if element != "H"]
        if len(keep) != g.n_atoms:
            raise AlignmentError(g.n_atoms, len(elements))
        elements = [elements[row] for row in keep]
        coords = coords[keep]
    expected = [atom.element for atom in g.atoms]
    if [element.capitalize() for element in elements] != expected:
        raise AlignmentError(g.n_atoms, len(elements), ": element order differs from the SMILES")
    return coords
