import struct
from typing import Dict, Iterable, List, Sequence, Tuple

FNV_OFFSET_BASIS = 0x811C9DC5
FNV_PRIME = 0x01000193


def fnv1a_32(data: bytes) -> int:
    value = FNV_OFFSET_BASIS
    for byte in data:
        value ^= byte
        value = (value * FNV_PRIME) & 0xFFFFFFFF
    return value


def pack_ints(values: Sequence[int]) -> bytes:
    """Little-endian signed 64-bit serialization of an integer tuple."""
    return struct.pack(f"<{len(values)}q", *values)


def hash_ints(values: Iterable[int]) -> int:
    return fnv1a_32(pack_ints(tuple(values)))


def flatten_neighborhood(own: int, neighborhood: List[Tuple[int, int]], prefix: Sequence[int] = ()) -> List[int]:
    flat = list(prefix)
    flat.append(own)
    for bond_code, neighbor_id in sorted(neighborhood):
        flat.extend((bond_code, neighbor_id))
    return flat


def refine_once(
    labels: Dict[int, int],
    neighbors: Dict[int, List[Tuple[int, int]]],
    prefix: Sequence[int] = (),
) -> Dict[int, int]:
    """One neighborhood-refinement round.

    ``neighbors`` maps an atom to its (bond code, neighbor atom) pairs; the new
    label hashes ``prefix``, the own label and the sorted (bond code, neighbor
    label) list.
    """
    refined = {}
    for atom, own in labels.items():
        neighborhood = [(code, labels[other]) for code, other in neighbors.get(atom, [])]
        refined[atom] = hash_ints(flatten_neighborhood(own, neighborhood, prefix))
    return refined
