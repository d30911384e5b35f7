"""SMILES parsing into an explicit molecular graph.

Covers the organic subset (B C N O P S F Cl Br I H), bracket atoms with
isotopes, charges, explicit hydrogen counts and tetrahedral parity, ring
closures (digits and %nn), branches, dot-disconnected parts and directional
bonds. Aromaticity comes from the notation, it is not re-perceived.
"""

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import networkx as nx

from hashing import hash_ints, refine_once


ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I "
    "Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt "
    "Au Hg Tl Pb Bi Po At Rn"
).split()
ATOMIC_NUMBERS: Dict[str, int] = {symbol: number for number, symbol in enumerate(ELEMENTS, start=1)}

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I", "H")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

DEFAULT_VALENCES: Dict[str, Tuple[int, ...]] = {
    "H": (1,),
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

UNSUPPORTED_SYMBOLS = {
    "*": "wildcard atom",
    ">": "reaction arrow",
    "$": "quadruple bond",
    "&": "ring-bond extension",
}


def is_ascii_digits(text: str) -> bool:
    return text.isascii() and text.isdigit()


class SmilesSyntaxError(SyntaxError):
    def __init__(self, message: str, smiles: str, position: int):
        self.smiles = smiles
        self.position = position
        super().__init__(f"{message} at position {position} in {smiles!r}")


class UnsupportedFeature(ValueError):
    def __init__(self, feature: str, smiles: str, position: int):
        self.feature = feature
        self.smiles = smiles
        self.position = position
        super().__init__(f"Unsupported SMILES feature ({feature}) at position {position} in {smiles!r}")


class Parity(Enum):
    NONE = "none"
    CW = "cw"
    CCW = "ccw"


class BondOrder(Enum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> int:
        return 1 if self is BondOrder.AROMATIC else self.value


class BondDirection(Enum):
    NONE = "none"
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class Atom:
    element: str
    atomic_number: int
    index: int
    formal_charge: int = 0
    implicit_h: int = 0
    aromatic: bool = False
    parity: Parity = Parity.NONE
    isotope: Optional[int] = None


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE
    direction: BondDirection = BondDirection.NONE

    def other(self, atom: int) -> int:
        return self.b if atom == self.a else self.a


@dataclass(frozen=True)
class MolGraph:
    atoms: Tuple[Atom, ...]
    bonds: Tuple[Bond, ...]
    rings: Tuple[Tuple[int, ...], ...]
    source_smiles: str

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @cached_property
    def neighbors(self) -> Tuple[Tuple[Tuple[int, Bond], ...], ...]:
        table: List[List[Tuple[int, Bond]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            table[bond.a].append((bond.b, bond))
            table[bond.b].append((bond.a, bond))
        return tuple(tuple(entries) for entries in table)

    @cached_property
    def bond_lookup(self) -> Dict[FrozenSet[int], Bond]:
        return {frozenset((bond.a, bond.b)): bond for bond in self.bonds}

    @cached_property
    def ring_atoms(self) -> FrozenSet[int]:
        return frozenset(atom for ring in self.rings for atom in ring)

    def bond_between(self, a: int, b: int) -> Optional[Bond]:
        return self.bond_lookup.get(frozenset((a, b)))

    def degree(self, atom: int) -> int:
        return len(self.neighbors[atom])

    def total_h(self, atom: int) -> int:
        """Implicit plus explicit hydrogen neighbors."""
        explicit = sum(1 for other, _ in self.neighbors[atom] if self.atoms[other].element == "H")
        return self.atoms[atom].implicit_h + explicit

    def heavy_degree(self, atom: int) -> int:
        return sum(1 for other, _ in self.neighbors[atom] if self.atoms[other].element != "H")

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_atoms))
        graph.add_edges_from((bond.a, bond.b) for bond in self.bonds)
        return graph


@dataclass(frozen=True)
class Scaffold:
    atom_indices: Tuple[int, ...] = field(default_factory=tuple)

    def is_empty(self) -> bool:
        return not self.atom_indices


@dataclass
class _PendingBond:
    symbol: str
    position: int


class _SmilesParser:
    bond_symbols = "-=#:/\\"

    def __init__(self, smiles: str):
        self.smiles = smiles
        self.atoms: List[dict] = []
        self.bonds: Dict[FrozenSet[int], Bond] = {}
        self.bond_positions: Dict[FrozenSet[int], int] = {}
        self.implicit_aromatic: Set[FrozenSet[int]] = set()

    def error(self, message: str, position: int) -> SmilesSyntaxError:
        return SmilesSyntaxError(message, self.smiles, position)

    def parse(self) -> MolGraph:
        s = self.smiles
        if not s:
            raise self.error("empty SMILES", 0)
        previous: Optional[int] = None
        branch_stack: List[Tuple[int, int]] = []
        open_rings: Dict[int, Tuple[int, Optional[_PendingBond], int]] = {}
        pending: Optional[_PendingBond] = None
        last_was_open_branch = False
        i = 0
        while i < len(s):
            ch = s[i]
            if ch in UNSUPPORTED_SYMBOLS:
                raise UnsupportedFeature(UNSUPPORTED_SYMBOLS[ch], s, i)
            if ch == "(":
                if previous is None:
                    raise self.error("branch without a preceding atom", i)
                if pending is not None:
                    raise self.error("bond symbol before branch", pending.position)
                branch_stack.append((previous, i))
                last_was_open_branch = True
                i += 1
                continue
            if ch == ")":
                if not branch_stack:
                    raise self.error("unmatched ')'", i)
                if pending is not None:
                    raise self.error("dangling bond symbol before ')'", pending.position)
                if last_was_open_branch:
                    raise self.error("empty branch", i)
                previous = branch_stack.pop()[0]
                i += 1
                continue
            last_was_open_branch = False
            if ch in self.bond_symbols:
                if previous is None:
                    raise self.error("bond symbol without a preceding atom", i)
                if pending is not None:
                    raise self.error("consecutive bond symbols", i)
                pending = _PendingBond(ch, i)
                i += 1
                continue
            if ch == ".":
                if previous is None or pending is not None:
                    raise self.error("misplaced '.'", i)
                if branch_stack:
                    raise self.error("'.' inside a branch", i)
                previous = None
                i += 1
                continue
            if is_ascii_digits(ch) or ch == "%":
                if previous is None:
                    raise self.error("ring closure without a preceding atom", i)
                ring_number, width = self.read_ring_number(i)
                if ring_number in open_rings:
                    opened_at, opened_bond, opened_position = open_rings.pop(ring_number)
                    bond_symbol = self.merge_ring_bonds(opened_bond, pending, i)
                    if opened_at == previous:
                        raise self.error("ring closure onto the same atom", i)
                    self.add_bond(opened_at, previous, bond_symbol, i)
                else:
                    open_rings[ring_number] = (previous, pending, i)
                pending = None
                i += width
                continue
            if ch == "[":
                atom_index, width = self.read_bracket_atom(i)
            else:
                atom_index, width = self.read_organic_atom(i)
            if previous is not None:
                self.add_bond(previous, atom_index, pending.symbol if pending else None, i)
            pending = None
            previous = atom_index
            i += width

        if pending is not None:
            raise self.error("dangling bond symbol", pending.position)
        if previous is None and s.endswith("."):
            raise self.error("misplaced '.'", len(s) - 1)
        if branch_stack:
            raise self.error("unmatched '('", branch_stack[-1][1])
        if open_rings:
            ring_number, (_, _, position) = sorted(open_rings.items(), key=lambda item: item[1][2])[0]
            raise self.error(f"unclosed ring bond {ring_number}", position)
        if not self.atoms:
            raise self.error("no atoms", 0)
        return self.build()

    def read_ring_number(self, i: int) -> Tuple[int, int]:
        s = self.smiles
        if s[i] == "%":
            digits = s[i + 1:i + 3]
            if len(digits) != 2 or not is_ascii_digits(digits):
                raise self.error("'%' must be followed by two digits", i)
            return int(digits), 3
        return int(s[i]), 1

    def merge_ring_bonds(self, opened: Optional[_PendingBond], closing: Optional[_PendingBond],
                         position: int) -> Optional[str]:
        if opened is None:
            return closing.symbol if closing else None
        if closing is None:
            return opened.symbol
        if opened.symbol in "/\\" and closing.symbol in "/\\":
            return closing.symbol
        if opened.symbol != closing.symbol:
            raise self.error("conflicting ring-closure bond symbols", position)
        return closing.symbol

    def read_organic_atom(self, i: int) -> Tuple[int, int]:
        s = self.smiles
        for symbol in ORGANIC_SUBSET:
            if s.startswith(symbol, i):
                return self.add_atom(symbol, aromatic=False, bracket=False), len(symbol)
        if s[i] in AROMATIC_ORGANIC:
            return self.add_atom(s[i].upper(), aromatic=True, bracket=False), 1
        two = s[i:i + 2]
        if two in ATOMIC_NUMBERS or s[i] in ATOMIC_NUMBERS:
            raise UnsupportedFeature("element outside the organic subset must be bracketed", s, i)
        raise self.error(f"unexpected character {s[i]!r}", i)

    def read_bracket_atom(self, start: int) -> Tuple[int, int]:
        s = self.smiles
        end = s.find("]", start)
        if end < 0:
            raise self.error("unterminated bracket atom", start)
        body = s[start + 1:end]
        if "[" in body:
            raise self.error("nested '['", start + 1 + body.index("["))
        pos = 0

        def at() -> int:
            return start + 1 + pos

        digits = ""
        while pos < len(body) and is_ascii_digits(body[pos]):
            digits += body[pos]
            pos += 1
        isotope = int(digits) if digits else None

        if pos >= len(body):
            raise self.error("bracket atom without element symbol", at())
        if body[pos] == "*":
            raise UnsupportedFeature(UNSUPPORTED_SYMBOLS["*"], s, at())
        aromatic = False
        symbol = None
        if body[pos].islower():
            for candidate in AROMATIC_BRACKET:
                if body.startswith(candidate, pos):
                    symbol = candidate.capitalize()
                    aromatic = True
                    pos += len(candidate)
                    break
        else:
            two = body[pos:pos + 2]
            if len(two) == 2 and two[1].islower() and two in ATOMIC_NUMBERS:
                symbol = two
            elif body[pos] in ATOMIC_NUMBERS:
                symbol = body[pos]
            if symbol is not None:
                pos += len(symbol)
        if symbol is None:
            raise self.error(f"unknown element in bracket atom {body!r}", at())

        parity = Parity.NONE
        if body.startswith("@@", pos):
            parity = Parity.CW
            pos += 2
        elif body.startswith("@", pos):
            parity = Parity.CCW
            pos += 1
        if parity is not Parity.NONE and body[pos:pos + 2] in ("TH", "AL", "SP", "TB", "OH"):
            raise UnsupportedFeature("extended chirality class", s, at())

        hydrogens = 0
        if pos < len(body) and body[pos] == "H":
            pos += 1
            digits = ""
            while pos < len(body) and is_ascii_digits(body[pos]):
                digits += body[pos]
                pos += 1
            hydrogens = int(digits) if digits else 1

        charge = 0
        if pos < len(body) and body[pos] in "+-":
            sign = 1 if body[pos] == "+" else -1
            symbol_char = body[pos]
            pos += 1
            digits = ""
            while pos < len(body) and is_ascii_digits(body[pos]):
                digits += body[pos]
                pos += 1
            if digits:
                charge = sign * int(digits)
            else:
                magnitude = 1
                while pos < len(body) and body[pos] == symbol_char:
                    magnitude += 1
                    pos += 1
                charge = sign * magnitude

        if pos < len(body) and body[pos] == ":":
            pos += 1
            if pos >= len(body) or not is_ascii_digits(body[pos:]):
                raise self.error("malformed atom class", at())
            pos = len(body)

        if pos != len(body):
            raise self.error(f"unexpected {body[pos]!r} in bracket atom", at())

        index = self.add_atom(symbol, aromatic=aromatic, bracket=True, isotope=isotope,
                              charge=charge, hydrogens=hydrogens, parity=parity)
        return index, end - start + 1

    def add_atom(self, symbol: str, aromatic: bool, bracket: bool, isotope: Optional[int] = None,
                 charge: int = 0, hydrogens: int = 0, parity: Parity = Parity.NONE) -> int:
        index = len(self.atoms)
        self.atoms.append(dict(
            element=symbol,
            atomic_number=ATOMIC_NUMBERS[symbol],
            index=index,
            formal_charge=charge,
            implicit_h=hydrogens,
            aromatic=aromatic,
            parity=parity,
            isotope=isotope,
            bracket=bracket,
        ))
        return index

    def add_bond(self, a: int, b: int, symbol: Optional[str], position: int):
        if a == b:
            raise self.error("bond from an atom to itself", position)
        key = frozenset((a, b))
        if key in self.bonds:
            raise self.error(f"duplicate bond between atoms {a} and {b}", position)
        both_aromatic = self.atoms[a]["aromatic"] and self.atoms[b]["aromatic"]
        direction = BondDirection.NONE
        if symbol is None:
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
            if both_aromatic:
                self.implicit_aromatic.add(key)
        elif symbol == ":":
            if not both_aromatic:
                raise self.error("aromatic bond between non-aromatic atoms", position)
            order = BondOrder.AROMATIC
        elif symbol in "/\\":
            order = BondOrder.SINGLE
            direction = BondDirection.UP if symbol == "/" else BondDirection.DOWN
        else:
            order = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE}[symbol]
        self.bonds[key] = Bond(a, b, order, direction)
        self.bond_positions[key] = position

    def build(self) -> MolGraph:
        used = [0] * len(self.atoms)
        for bond in self.bonds.values():
            used[bond.a] += bond.order.valence
            used[bond.b] += bond.order.valence
        atoms = []
        for spec in self.atoms:
            bracket = spec.pop("bracket")
            if not bracket:
                spec["implicit_h"] = implicit_hydrogens(
                    spec["element"], used[spec["index"]] + (1 if spec["aromatic"] else 0), spec["aromatic"])
            atoms.append(Atom(**spec))
        rings = find_sssr(len(atoms), tuple(self.bonds.values()))
        ring_edges = {frozenset((atom, ring[(k + 1) % len(ring)])) for ring in rings for k, atom in enumerate(ring)}
        # an unmarked bond between two aromatic rings is single
        for key in self.implicit_aromatic - ring_edges:
            self.bonds[key] = replace(self.bonds[key], order=BondOrder.SINGLE)
        return MolGraph(tuple(atoms), tuple(self.bonds.values()), rings, self.smiles)


def implicit_hydrogens(element: str, used_valence: int, aromatic: bool = False) -> int:
    valences = DEFAULT_VALENCES.get(element, ())
    if aromatic:
        return max(valences[0] - used_valence, 0) if valences else 0
    for valence in valences:
        if valence >= used_valence:
            return valence - used_valence
    return 0


def parse_smiles(s: str) -> MolGraph:
    return _SmilesParser(s).parse()


def _bond_bitmask(cycle: Sequence[int], edge_bits: Dict[FrozenSet[int], int]) -> int:
    mask = 0
    for position, atom in enumerate(cycle):
        mask |= edge_bits[frozenset((atom, cycle[(position + 1) % len(cycle)]))]
    return mask


def _oriented(cycle: Sequence[int]) -> Tuple[int, ...]:
    start = cycle.index(min(cycle))
    rotated = list(cycle[start:]) + list(cycle[:start])
    if len(rotated) > 2 and rotated[-1] < rotated[1]:
        rotated = [rotated[0]] + rotated[1:][::-1]
    return tuple(rotated)


def find_sssr(n_atoms: int, bonds: Sequence[Bond]) -> Tuple[Tuple[int, ...], ...]:
    """Smallest set of smallest rings as a minimum cycle basis.

    Candidates are the shortest-path cycles through every (vertex, edge) pair;
    they are taken shortest first, ties by sorted atom indices, and kept when
    independent over GF(2) until the cycle-space dimension is reached.
    """
    graph = nx.Graph()
    graph.add_nodes_from(range(n_atoms))
    graph.add_edges_from((bond.a, bond.b) for bond in bonds)
    n_rings = graph.number_of_edges() - n_atoms + nx.number_connected_components(graph)
    if n_rings == 0:
        return ()
    edge_bits = {frozenset((bond.a, bond.b)): 1 << position for position, bond in enumerate(bonds)}

    candidates = {}
    for vertex in range(n_atoms):
        paths = nx.single_source_shortest_path(graph, vertex)
        for bond in bonds:
            if bond.a not in paths or bond.b not in paths:
                continue
            left, right = paths[bond.a], paths[bond.b]
            if set(left) & set(right) != {vertex}:
                continue
            cycle = left + right[:0:-1]
            if len(cycle) < 3:
                continue
            oriented = _oriented(cycle)
            candidates.setdefault(frozenset(oriented), oriented)

    ordered = sorted(candidates.values(), key=lambda cycle: (len(cycle), tuple(sorted(cycle)), cycle))
    basis: Dict[int, int] = {}
    rings = []
    for cycle in ordered:
        mask = _bond_bitmask(cycle, edge_bits)
        reduced = mask
        while reduced:
            pivot = reduced.bit_length() - 1
            if pivot not in basis:
                basis[pivot] = reduced
                rings.append(cycle)
                break
            reduced ^= basis[pivot]
        if len(rings) == n_rings:
            break
    return tuple(rings)


def count_aromatic_rings(g: MolGraph) -> int:
    count = 0
    for ring in g.rings:
        if not all(g.atoms[atom].aromatic for atom in ring):
            continue
        ring_bonds = [g.bond_between(atom, ring[(k + 1) % len(ring)]) for k, atom in enumerate(ring)]
        if all(bond is not None and bond.order is BondOrder.AROMATIC for bond in ring_bonds):
            count += 1
    return count


def connected_components(g: MolGraph) -> List[List[int]]:
    return sorted(sorted(component) for component in nx.connected_components(g.to_networkx()))


def murcko_scaffold(g: MolGraph) -> Scaffold:
    ring_atoms = g.ring_atoms
    if not ring_atoms:
        return Scaffold(())
    kept = set(range(g.n_atoms))
    while True:
        pruned = {
            atom for atom in kept
            if atom not in ring_atoms
            and sum(1 for other, _ in g.neighbors[atom] if other in kept) <= 1
        }
        if not pruned:
            break
        kept -= pruned
    return Scaffold(tuple(sorted(kept)))


def subgraph(g: MolGraph, atom_indices: Sequence[int]) -> MolGraph:
    """Induced subgraph with atoms renumbered in ascending original order.

    Bonds to atoms left out are capped with implicit hydrogens, one per unit
    of bond valence.
    """
    selected = sorted(set(atom_indices))
    renumber = {old: new for new, old in enumerate(selected)}
    capped = Counter()
    for bond in g.bonds:
        if (bond.a in renumber) != (bond.b in renumber):
            capped[bond.a if bond.a in renumber else bond.b] += bond.order.valence
    atoms = tuple(
        Atom(
            element=g.atoms[old].element,
            atomic_number=g.atoms[old].atomic_number,
            index=new,
            formal_charge=g.atoms[old].formal_charge,
            implicit_h=g.atoms[old].implicit_h + capped[old],
            aromatic=g.atoms[old].aromatic,
            parity=g.atoms[old].parity,
            isotope=g.atoms[old].isotope,
        )
        for old, new in renumber.items()
    )
    bonds = tuple(
        Bond(renumber[bond.a], renumber[bond.b], bond.order, bond.direction)
        for bond in g.bonds
        if bond.a in renumber and bond.b in renumber
    )
    return MolGraph(atoms, bonds, find_sssr(len(atoms), bonds), g.source_smiles)


def _initial_label(g: MolGraph, atom: Atom) -> int:
    return hash_ints((
        atom.atomic_number,
        int(atom.aromatic),
        atom.formal_charge,
        atom.isotope or 0,
        atom.implicit_h,
        g.degree(atom.index),
        int(atom.parity is not Parity.NONE),
    ))


def molecular_formula(g: MolGraph) -> str:
    counts = Counter(atom.element for atom in g.atoms)
    counts["H"] += sum(atom.implicit_h for atom in g.atoms)
    if counts["H"] == 0:
        del counts["H"]
    order = [symbol for symbol in ("C", "H") if symbol in counts]
    order += sorted(symbol for symbol in counts if symbol not in ("C", "H"))
    return "".join(symbol + (str(counts[symbol]) if counts[symbol] > 1 else "") for symbol in order)


def canonical_key(g: MolGraph) -> str:
    """Atom-order independent key from iterative neighborhood refinement.

    Parity tags are reduced to a has-tag flag since @/@@ depend on the order
    atoms were written in.
    """
    if g.n_atoms == 0:
        return ""
    labels = {atom.index: _initial_label(g, atom) for atom in g.atoms}
    neighbors = {
        atom.index: [(bond.order.value, other) for other, bond in g.neighbors[atom.index]]
        for atom in g.atoms
    }
    n_classes = len(set(labels.values()))
    for _ in range(g.n_atoms):
        refined = refine_once(labels, neighbors)
        refined_classes = len(set(refined.values()))
        labels = refined
        if refined_classes == n_classes:
            break
        n_classes = refined_classes
    bonds = sorted(
        (bond.order.value, *sorted((labels[bond.a], labels[bond.b])))
        for bond in g.bonds
    )
    payload = json.dumps([sorted(labels.values()), bonds], separators=(",", ":"))
    return f"{molecular_formula(g)}:{hashlib.sha256(payload.encode('ascii')).hexdigest()[:32]}"


def debug_dump(g: MolGraph) -> str:
    lines = [f"# {g.source_smiles}"]
    for atom in g.atoms:
        lines.append(
            f"atom {atom.index} {atom.element} charge={atom.formal_charge} h={atom.implicit_h} "
            f"aromatic={int(atom.aromatic)} parity={atom.parity.value} isotope={atom.isotope or 0}"
        )
    for bond in g.bonds:
        lines.append(f"bond {bond.a} {bond.b} {bond.order.name} {bond.direction.name}")
    for ring in g.rings:
        lines.append("ring " + " ".join(str(atom) for atom in ring))
    return "\n".join(lines)
