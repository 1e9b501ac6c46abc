"""Molecular graph model, node attribute matrix, Morgan fingerprint and descriptors."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, fields, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Element:
    symbol: str
    number: int
    mass: float
    valence: int | None  # default valence for organic-subset atoms, None if bracket-only


ELEMENTS: dict[str, Element] = {
    e.symbol: e
    for e in (
        Element("H", 1, 1.008, None),
        Element("Li", 3, 6.94, None),
        Element("B", 5, 10.81, 3),
        Element("C", 6, 12.011, 4),
        Element("N", 7, 14.007, 3),
        Element("O", 8, 15.999, 2),
        Element("F", 9, 18.998, 1),
        Element("Na", 11, 22.990, None),
        Element("Mg", 12, 24.305, None),
        Element("Si", 14, 28.085, None),
        Element("P", 15, 30.974, 3),
        Element("S", 16, 32.06, 2),
        Element("Cl", 17, 35.45, 1),
        Element("K", 19, 39.098, None),
        Element("Ca", 20, 40.078, None),
        Element("Se", 34, 78.971, None),
        Element("Br", 35, 79.904, 1),
        Element("I", 53, 126.904, 1),
    )
}
BY_NUMBER: dict[int, Element] = {e.number: e for e in ELEMENTS.values()}
HYDROGEN_MASS = ELEMENTS["H"].mass

ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> float:
        return 1.5 if self is BondOrder.AROMATIC else float(self.value)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    element: int
    formal_charge: int = 0
    implicit_h: int = 0
    aromatic: bool = False
    in_ring: bool = False

    @property
    def symbol(self) -> str:
        return BY_NUMBER[self.element].symbol


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder = BondOrder.SINGLE

    def other(self, atom: int) -> int:
        return self.end if atom == self.begin else self.begin


@dataclass(frozen=True)
class MolecularGraph:
    """Atoms and bonds of one molecule.

    Build instances with :func:`make_graph`, which validates the bond list and
    fills in the ring-membership flags.
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in self.atoms]
        for b in self.bonds:
            nbrs[b.begin].append(b.end)
            nbrs[b.end].append(b.begin)
        return tuple(tuple(n) for n in nbrs)

    @cached_property
    def _bond_index(self) -> dict[tuple[int, int], Bond]:
        index = {}
        for b in self.bonds:
            index[(b.begin, b.end)] = b
            index[(b.end, b.begin)] = b
        return index

    def bond_between(self, a: int, b: int) -> Bond | None:
        return self._bond_index.get((a, b))

    def degree(self, atom: int) -> int:
        return len(self.adjacency[atom])

    @cached_property
    def ring_bonds(self) -> frozenset[tuple[int, int]]:
        """Bonds lying on at least one cycle, as sorted index pairs."""
        return frozenset(_non_bridges(len(self.atoms), self.bonds))

    def is_ring_bond(self, bond: Bond) -> bool:
        return _key(bond.begin, bond.end) in self.ring_bonds

    def __len__(self) -> int:
        return len(self.atoms)


def _key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def _non_bridges(n: int, bonds: Sequence[Bond]) -> set[tuple[int, int]]:
    # iterative Tarjan bridge finding; no parallel edges so parent-skip by atom is safe
    adj: list[list[int]] = [[] for _ in range(n)]
    for b in bonds:
        adj[b.begin].append(b.end)
        adj[b.end].append(b.begin)
    disc = [-1] * n
    low = [0] * n
    bridges: set[tuple[int, int]] = set()
    clock = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = clock
        clock += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, parent, it = stack[-1]
            advanced = False
            for w in it:
                if w == parent:
                    continue
                if disc[w] == -1:
                    disc[w] = low[w] = clock
                    clock += 1
                    stack.append((w, v, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if not advanced:
                stack.pop()
                if parent != -1:
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.add(_key(parent, v))
    return {_key(b.begin, b.end) for b in bonds} - bridges


def make_graph(atoms: Iterable[Atom], bonds: Iterable[Bond]) -> MolecularGraph:
    """Validate atoms/bonds and return a graph with ``in_ring`` flags recomputed."""
    atoms = tuple(atoms)
    bonds = tuple(bonds)
    seen: set[tuple[int, int]] = set()
    for b in bonds:
        if not (0 <= b.begin < len(atoms) and 0 <= b.end < len(atoms)):
            raise GraphError(f"bond {b} references a missing atom")
        if b.begin == b.end:
            raise GraphError(f"bond {b} is a self loop")
        k = _key(b.begin, b.end)
        if k in seen:
            raise GraphError(f"parallel bond between atoms {k}")
        seen.add(k)
    for a in atoms:
        if a.element not in BY_NUMBER:
            raise GraphError(f"unsupported element number {a.element}")
        if a.implicit_h < 0:
            raise GraphError("negative hydrogen count")
    ring = _non_bridges(len(atoms), bonds)
    ring_atoms = {i for k in ring for i in k}
    atoms = tuple(replace(a, in_ring=i in ring_atoms) for i, a in enumerate(atoms))
    return MolecularGraph(atoms, bonds)


def bond_valence(graph: MolecularGraph, atom: int) -> float:
    return sum(graph.bond_between(atom, n).order.valence for n in graph.adjacency[atom])


def default_implicit_h(element: int, valence_sum: float) -> int | None:
    """Implicit hydrogens under the default-valence rule; None when the bonds exceed it."""
    valence = BY_NUMBER[element].valence
    if valence is None:
        return 0
    used = math.floor(valence_sum)
    if used > valence:
        return None
    return valence - used


def permute_atoms(graph: MolecularGraph, perm: Sequence[int]) -> MolecularGraph:
    """Relabel atoms so that old atom ``i`` becomes new atom ``perm[i]``."""
    n = len(graph.atoms)
    if sorted(perm) != list(range(n)):
        raise GraphError("perm is not a permutation of the atom indices")
    atoms: list[Atom | None] = [None] * n
    for old, new in enumerate(perm):
        atoms[new] = graph.atoms[old]
    bonds = [Bond(perm[b.begin], perm[b.end], b.order) for b in graph.bonds]
    # shuffle bond list order consistently with the relabelling too
    bonds.sort(key=lambda b: _key(b.begin, b.end))
    return MolecularGraph(tuple(atoms), tuple(bonds))


def n_components(graph: MolecularGraph) -> int:
    seen = [False] * len(graph.atoms)
    count = 0
    for start in range(len(graph.atoms)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for w in graph.adjacency[v]:
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
    return count


# ---------------------------------------------------------------------------
# node attribute matrix

FEATURE_ELEMENTS = ORGANIC_SUBSET  # plus one trailing "other" slot
N_ELEMENT_SLOTS = len(FEATURE_ELEMENTS) + 1
N_DEGREE_SLOTS = 5  # 0, 1, 2, 3, 4+
N_CHARGE_SLOTS = 5  # -2 .. +2, clamped
N_HCOUNT_SLOTS = 5  # 0 .. 4, clamped
N_FEATURES = N_ELEMENT_SLOTS + N_DEGREE_SLOTS + N_CHARGE_SLOTS + N_HCOUNT_SLOTS + 2

_ELEMENT_SLOT = {ELEMENTS[s].number: i for i, s in enumerate(FEATURE_ELEMENTS)}


def feature_blocks() -> dict[str, slice]:
    """Column ranges of each block of the node attribute matrix."""
    edges = np.cumsum([0, N_ELEMENT_SLOTS, N_DEGREE_SLOTS, N_CHARGE_SLOTS, N_HCOUNT_SLOTS, 1, 1])
    names = ["element", "degree", "charge", "implicit_h", "aromatic", "ring"]
    return {name: slice(int(lo), int(hi)) for name, lo, hi in zip(names, edges[:-1], edges[1:])}


def node_features(graph: MolecularGraph) -> np.ndarray:
    blocks = feature_blocks()
    x = np.zeros((len(graph.atoms), N_FEATURES), dtype=np.float32)
    for i, atom in enumerate(graph.atoms):
        x[i, blocks["element"].start + _ELEMENT_SLOT.get(atom.element, N_ELEMENT_SLOTS - 1)] = 1.0
        x[i, blocks["degree"].start + min(graph.degree(i), N_DEGREE_SLOTS - 1)] = 1.0
        x[i, blocks["charge"].start + min(max(atom.formal_charge, -2), 2) + 2] = 1.0
        x[i, blocks["implicit_h"].start + min(atom.implicit_h, N_HCOUNT_SLOTS - 1)] = 1.0
        x[i, blocks["aromatic"].start] = float(atom.aromatic)
        x[i, blocks["ring"].start] = float(atom.in_ring)
    return x


# ---------------------------------------------------------------------------
# Morgan fingerprint

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer (Steele, Lea & Flood constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_ints(values: Iterable[int]) -> int:
    h = 0x6A09E667F3BCC908
    for v in values:
        h = splitmix64(h ^ (v & _MASK64))
    return h


def atom_invariant(graph: MolecularGraph, i: int) -> int:
    a = graph.atoms[i]
    return hash_ints(
        (a.element, graph.degree(i), a.implicit_h, a.formal_charge, int(a.in_ring), int(a.aromatic))
    )


@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray  # bool, length n_bits
    radius: int

    def on_bits(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]

    def popcount(self) -> int:
        return int(self.bits.sum())

    def to_hex(self) -> str:
        """Hex of the bit vector read as an integer with bit i worth 2**i; MSB first."""
        value = 0
        for i in self.on_bits():
            value |= 1 << i
        return format(value, f"0{len(self.bits) // 4}x")

    @classmethod
    def from_hex(cls, text: str, radius: int = 2) -> "Fingerprint":
        n_bits = len(text) * 4
        value = int(text, 16)
        bits = np.array([(value >> i) & 1 for i in range(n_bits)], dtype=bool)
        return cls(bits, radius)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.radius == other.radius and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash((self.radius, self.bits.tobytes()))


def morgan_environments(graph: MolecularGraph, radius: int = 2) -> list[tuple[int, int]]:
    """Distinct circular environments as (identifier, radius) pairs.

    An atom's environment at radius r is dropped when it covers the same bond
    set as its radius r-1 environment, or the same bond set as an environment
    already kept. Among atoms sharing a bond set at one radius the smallest
    identifier wins, so the result does not depend on atom order.
    """
    n = len(graph.atoms)
    ids = [atom_invariant(graph, i) for i in range(n)]
    kept = [(ids[i], 0) for i in range(n)]
    covered: list[frozenset[tuple[int, int]]] = [frozenset() for _ in range(n)]
    seen_sets: set[frozenset[tuple[int, int]]] = set()
    for r in range(1, radius + 1):
        new_ids = []
        new_cover = []
        for i in range(n):
            nbr = sorted((graph.bond_between(i, j).order.value, ids[j]) for j in graph.adjacency[i])
            flat = [r, ids[i]]
            for order, ident in nbr:
                flat.extend((order, ident))
            new_ids.append(hash_ints(flat))
            cover = set(covered[i])
            for j in graph.adjacency[i]:
                cover.add(_key(i, j))
                cover.update(covered[j])
            new_cover.append(frozenset(cover))
        candidates = sorted(
            ((new_ids[i], new_cover[i]) for i in range(n) if new_cover[i] != covered[i]),
            key=lambda c: c[0],
        )
        for ident, cover in candidates:
            if cover in seen_sets:
                continue
            seen_sets.add(cover)
            kept.append((ident, r))
        ids, covered = new_ids, new_cover
    return kept


def morgan_fingerprint(graph: MolecularGraph, radius: int = 2, n_bits: int = 2048) -> Fingerprint:
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if n_bits <= 0 or n_bits & (n_bits - 1):
        raise ValueError("n_bits must be a power of two")
    bits = np.zeros(n_bits, dtype=bool)
    for ident, _ in morgan_environments(graph, radius):
        bits[ident % n_bits] = True
    return Fingerprint(bits, radius)


# ---------------------------------------------------------------------------
# descriptors


@dataclass(frozen=True)
class DescriptorSet:
    molecular_weight: float
    heavy_atom_count: int
    total_atom_count: int
    bond_count: int
    ring_count: int
    aromatic_atom_count: int
    hbd_count: int
    hba_count: int
    rotatable_bond_count: int
    net_formal_charge: int

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_dict(self) -> dict[str, float | int]:
        return {name: getattr(self, name) for name in self.names()}

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())


DESCRIPTOR_NAMES = DescriptorSet.names()
_DONOR_ACCEPTOR = {ELEMENTS["N"].number, ELEMENTS["O"].number}


def compute_descriptors(graph: MolecularGraph) -> DescriptorSet:
    """The ten auxiliary-task properties of a molecule.

    Donor/acceptor counts are crude: any N or O is an acceptor, and one
    carrying at least one hydrogen is also a donor.
    """
    atoms = graph.atoms
    n_h = sum(a.implicit_h for a in atoms)
    weight = sum(BY_NUMBER[a.element].mass for a in atoms) + n_h * HYDROGEN_MASS
    heavy = [i for i, a in enumerate(atoms) if a.element != 1]
    heavy_set = set(heavy)

    def heavy_degree(i: int) -> int:
        return sum(1 for j in graph.adjacency[i] if j in heavy_set)

    rotatable = sum(
        1
        for b in graph.bonds
        if b.order is BondOrder.SINGLE
        and not graph.is_ring_bond(b)
        and b.begin in heavy_set
        and b.end in heavy_set
        and heavy_degree(b.begin) >= 2
        and heavy_degree(b.end) >= 2
    )
    return DescriptorSet(
        molecular_weight=round(weight, 4),
        heavy_atom_count=len(heavy),
        total_atom_count=len(atoms) + n_h,
        bond_count=len(graph.bonds),
        ring_count=len(graph.bonds) - len(atoms) + n_components(graph),
        aromatic_atom_count=sum(1 for a in atoms if a.aromatic),
        hbd_count=sum(1 for a in atoms if a.element in _DONOR_ACCEPTOR and a.implicit_h > 0),
        hba_count=sum(1 for a in atoms if a.element in _DONOR_ACCEPTOR),
        rotatable_bond_count=rotatable,
        net_formal_charge=sum(a.formal_charge for a in atoms),
    )
