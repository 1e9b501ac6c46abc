"""SMILES tokenizing, parsing, writing, randomization and canonicalization.

Supported grammar: organic-subset atoms, aromatic lowercase atoms, bracket
atoms with element, hydrogen count and charge, bonds ``- = # :``, branches
and ring closures (single digit or ``%nn``). Stereo marks, isotopes and
dot-disconnected fragments are rejected.
"""

from __future__ import annotations

import itertools
import random
import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

from molx.molgraph import (
    AROMATIC_SYMBOLS,
    BY_NUMBER,
    ELEMENTS,
    ORGANIC_SUBSET,
    Atom,
    Bond,
    BondOrder,
    MolecularGraph,
    bond_valence,
    default_implicit_h,
    make_graph,
)

TOKEN_KINDS = ("atom", "bond", "branch-open", "branch-close", "ring-closure-digit", "bracket-atom")
ERROR_KINDS = ("unclosed-ring", "unbalanced-branch", "unknown-symbol", "valence-violation", "invalid-bond")


@dataclass(frozen=True)
class SmilesToken:
    kind: str
    text: str
    position: int


@dataclass(frozen=True)
class ParseDiagnostics:
    kind: str
    position: int
    message: str

    def __str__(self) -> str:
        return f"{self.kind} at position {self.position}: {self.message}"


class SmilesError(ValueError):
    """Raised when a SMILES string cannot be tokenized or parsed."""

    def __init__(self, diagnostics: ParseDiagnostics):
        super().__init__(str(diagnostics))
        self.diagnostics = diagnostics


def _fail(kind: str, position: int, message: str) -> SmilesError:
    return SmilesError(ParseDiagnostics(kind, position, message))


_BOND_CHARS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_BOND_SYMBOL = {BondOrder.DOUBLE: "=", BondOrder.TRIPLE: "#"}
_BRACKET_RE = re.compile(
    r"^\[(?P<sym>[A-Z][a-z]?|[bcnops])(?P<h>H\d?)?(?P<charge>\+\+|--|[+-]\d?)?\]$"
)


def tokenize_smiles(text: str) -> list[SmilesToken]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "[":
            end = text.find("]", i)
            if end < 0:
                raise _fail("unknown-symbol", i, "unterminated bracket atom")
            tokens.append(SmilesToken("bracket-atom", text[i : end + 1], i))
            i = end + 1
        elif text.startswith(("Cl", "Br"), i):
            tokens.append(SmilesToken("atom", text[i : i + 2], i))
            i += 2
        elif ch in ORGANIC_SUBSET or ch in AROMATIC_SYMBOLS:
            tokens.append(SmilesToken("atom", ch, i))
            i += 1
        elif ch in _BOND_CHARS:
            tokens.append(SmilesToken("bond", ch, i))
            i += 1
        elif ch == "(":
            tokens.append(SmilesToken("branch-open", ch, i))
            i += 1
        elif ch == ")":
            tokens.append(SmilesToken("branch-close", ch, i))
            i += 1
        elif ch.isdigit():
            tokens.append(SmilesToken("ring-closure-digit", ch, i))
            i += 1
        elif ch == "%":
            digits = text[i + 1 : i + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise _fail("unknown-symbol", i, "'%' must be followed by two digits")
            tokens.append(SmilesToken("ring-closure-digit", text[i : i + 3], i))
            i += 3
        else:
            raise _fail("unknown-symbol", i, f"unexpected character {ch!r}")
    return tokens


def _atom_from_token(tok: SmilesToken) -> tuple[Atom, bool]:
    """Atom for a token plus whether its hydrogen count is fixed (bracket atom)."""
    if tok.kind == "atom":
        aromatic = tok.text in AROMATIC_SYMBOLS
        symbol = AROMATIC_SYMBOLS.get(tok.text, tok.text)
        return Atom(ELEMENTS[symbol].number, aromatic=aromatic), False
    m = _BRACKET_RE.match(tok.text)
    if m is None:
        raise _fail("unknown-symbol", tok.position, f"malformed bracket atom {tok.text!r}")
    sym = m.group("sym")
    aromatic = sym in AROMATIC_SYMBOLS
    symbol = AROMATIC_SYMBOLS.get(sym, sym)
    if symbol not in ELEMENTS:
        raise _fail("unknown-symbol", tok.position, f"unsupported element {sym!r}")
    h = m.group("h")
    n_h = 0 if h is None else (1 if h == "H" else int(h[1:]))
    charge_text = m.group("charge") or ""
    if charge_text in ("++", "--"):
        charge = 2 if charge_text == "++" else -2
    elif charge_text:
        magnitude = int(charge_text[1:]) if len(charge_text) > 1 else 1
        charge = magnitude if charge_text[0] == "+" else -magnitude
    else:
        charge = 0
    return Atom(ELEMENTS[symbol].number, formal_charge=charge, implicit_h=n_h, aromatic=aromatic), True


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a SMILES string into a :class:`MolecularGraph`.

    Raises :class:`SmilesError` carrying a positioned :class:`ParseDiagnostics`.
    """
    if not text:
        raise _fail("unknown-symbol", 0, "empty SMILES")
    tokens = tokenize_smiles(text)
    atoms: list[Atom] = []
    fixed_h: list[bool] = []
    atom_pos: list[int] = []
    bonds: dict[tuple[int, int], Bond] = {}
    prev: int | None = None
    pending: SmilesToken | None = None
    branches: list[tuple[int, int, int]] = []  # (branch point, '(' position, atom count at open)
    rings: dict[str, tuple[int, SmilesToken | None, int]] = {}

    def add_bond(a: int, b: int, order: BondOrder, position: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            raise _fail("invalid-bond", position, "ring closure bonds an atom to itself")
        if key in bonds:
            raise _fail("invalid-bond", position, "ring closure duplicates an existing bond")
        bonds[key] = Bond(a, b, order)

    def implied_order(a: int, b: int, tok: SmilesToken | None) -> BondOrder:
        if tok is not None:
            return _BOND_CHARS[tok.text]
        if atoms[a].aromatic and atoms[b].aromatic:
            return BondOrder.AROMATIC
        return BondOrder.SINGLE

    for tok in tokens:
        if tok.kind in ("atom", "bracket-atom"):
            atom, fixed = _atom_from_token(tok)
            atoms.append(atom)
            fixed_h.append(fixed)
            atom_pos.append(tok.position)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, implied_order(prev, idx, pending), tok.position)
            elif pending is not None:
                raise _fail("invalid-bond", pending.position, "bond symbol without a preceding atom")
            pending = None
            prev = idx
        elif tok.kind == "bond":
            if prev is None or pending is not None:
                raise _fail("invalid-bond", tok.position, "misplaced bond symbol")
            pending = tok
        elif tok.kind == "branch-open":
            if prev is None or pending is not None:
                raise _fail("unbalanced-branch", tok.position, "branch opened without a preceding atom")
            branches.append((prev, tok.position, len(atoms)))
        elif tok.kind == "branch-close":
            if not branches:
                raise _fail("unbalanced-branch", tok.position, "unmatched ')'")
            if pending is not None:
                raise _fail("invalid-bond", pending.position, "bond symbol at end of branch")
            point, _, count = branches.pop()
            if count == len(atoms):
                raise _fail("unbalanced-branch", tok.position, "empty branch")
            prev = point
        else:  # ring-closure-digit
            if prev is None:
                raise _fail("unclosed-ring", tok.position, "ring closure without a preceding atom")
            label = tok.text.lstrip("%")
            if label in rings:
                partner, open_bond, _ = rings.pop(label)
                if open_bond is not None and pending is not None and open_bond.text != pending.text:
                    raise _fail("invalid-bond", tok.position, "conflicting ring closure bond symbols")
                add_bond(partner, prev, implied_order(partner, prev, pending or open_bond), tok.position)
            else:
                rings[label] = (prev, pending, tok.position)
            pending = None
    if pending is not None:
        raise _fail("invalid-bond", pending.position, "dangling bond symbol")
    if branches:
        raise _fail("unbalanced-branch", branches[0][1], "unclosed '('")
    if rings:
        position = min(p for _, _, p in rings.values())
        raise _fail("unclosed-ring", position, "ring closure digit never closed")

    graph = make_graph(atoms, bonds.values())
    resolved = []
    for i, atom in enumerate(graph.atoms):
        if fixed_h[i]:
            resolved.append(atom)
            continue
        n_h = default_implicit_h(atom.element, bond_valence(graph, i))
        if n_h is None:
            raise _fail(
                "valence-violation",
                atom_pos[i],
                f"{atom.symbol} exceeds its default valence {BY_NUMBER[atom.element].valence}",
            )
        resolved.append(Atom(atom.element, atom.formal_charge, n_h, atom.aromatic, atom.in_ring))
    return MolecularGraph(tuple(resolved), graph.bonds)


def try_parse(text: str) -> MolecularGraph | ParseDiagnostics:
    """Total variant of :func:`parse_smiles`: returns the diagnostic instead of raising."""
    try:
        return parse_smiles(text)
    except SmilesError as exc:
        return exc.diagnostics


# ---------------------------------------------------------------------------
# writing


def atom_symbol(graph: MolecularGraph, i: int) -> str:
    atom = graph.atoms[i]
    element = BY_NUMBER[atom.element]
    sym = element.symbol.lower() if atom.aromatic else element.symbol
    organic = (
        element.symbol in ORGANIC_SUBSET
        and atom.formal_charge == 0
        and default_implicit_h(atom.element, bond_valence(graph, i)) == atom.implicit_h
    )
    if organic:
        return sym
    h = "" if atom.implicit_h == 0 else ("H" if atom.implicit_h == 1 else f"H{atom.implicit_h}")
    q = atom.formal_charge
    charge = "" if q == 0 else (("+" if q > 0 else "-") + (str(abs(q)) if abs(q) > 1 else ""))
    return f"[{sym}{h}{charge}]"


def _bond_symbol(graph: MolecularGraph, a: int, b: int) -> str:
    bond = graph.bond_between(a, b)
    if bond.order is BondOrder.SINGLE:
        both_aromatic = graph.atoms[a].aromatic and graph.atoms[b].aromatic
        return "-" if both_aromatic else ""
    if bond.order is BondOrder.AROMATIC:
        both_aromatic = graph.atoms[a].aromatic and graph.atoms[b].aromatic
        return "" if both_aromatic else ":"
    return _BOND_SYMBOL[bond.order]


def _ring_label(d: int) -> str:
    return str(d) if d < 10 else f"%{d}"


def _write(
    graph: MolecularGraph, start: int, order: Sequence[Sequence[int]]
) -> tuple[str, list[int]]:
    n = len(graph.atoms)
    visited = [False] * n
    children: list[list[int]] = [[] for _ in range(n)]
    ring_edges: set[tuple[int, int]] = set()

    def dfs(a: int, parent: int) -> None:
        visited[a] = True
        for nb in order[a]:
            if nb == parent:
                continue
            if visited[nb]:
                ring_edges.add((min(a, nb), max(a, nb)))
            else:
                children[a].append(nb)
                dfs(nb, a)

    dfs(start, -1)
    if not all(visited):
        raise ValueError("write_smiles requires a connected graph")

    out: list[str] = []
    emitted: list[int] = []
    open_digits: dict[tuple[int, int], int] = {}
    in_use: set[int] = set()

    def emit(a: int) -> None:
        emitted.append(a)
        out.append(atom_symbol(graph, a))
        closed = []
        for nb in order[a]:
            key = (min(a, nb), max(a, nb))
            if key not in ring_edges:
                continue
            if key in open_digits:
                d = open_digits.pop(key)
                out.append(_ring_label(d))
                closed.append(d)
            else:
                d = 1
                while d in in_use:
                    d += 1
                in_use.add(d)
                open_digits[key] = d
                out.append(_bond_symbol(graph, a, nb) + _ring_label(d))
        in_use.difference_update(closed)
        kids = children[a]
        for j, child in enumerate(kids):
            last = j == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_bond_symbol(graph, a, child))
            emit(child)
            if not last:
                out.append(")")

    emit(start)
    return "".join(out), emitted


def _normalize_order(
    graph: MolecularGraph, neighbor_order: Mapping[int, Sequence[int]] | Sequence[Sequence[int]] | None
) -> list[list[int]]:
    if neighbor_order is None:
        return [list(nbrs) for nbrs in graph.adjacency]
    order = [list(neighbor_order[i]) for i in range(len(graph.atoms))]
    for i, nbrs in enumerate(order):
        if sorted(nbrs) != sorted(graph.adjacency[i]):
            raise ValueError(f"neighbor_order[{i}] is not a permutation of atom {i}'s neighbors")
    return order


def write_smiles(
    graph: MolecularGraph,
    start_atom: int = 0,
    neighbor_order: Mapping[int, Sequence[int]] | Sequence[Sequence[int]] | None = None,
) -> str:
    """Write ``graph`` by depth-first traversal from ``start_atom``.

    ``neighbor_order[i]`` fixes the order in which atom ``i`` explores its
    neighbours; it also orders the ring-closure digits written at ``i``.
    """
    if not 0 <= start_atom < len(graph.atoms):
        raise ValueError(f"start_atom {start_atom} out of range")
    return _write(graph, start_atom, _normalize_order(graph, neighbor_order))[0]


def randomize_smiles(graph: MolecularGraph, seed: int) -> str:
    rng = random.Random(seed)
    start = rng.randrange(len(graph.atoms))
    order = []
    for nbrs in graph.adjacency:
        nbrs = list(nbrs)
        rng.shuffle(nbrs)
        order.append(nbrs)
    return write_smiles(graph, start, order)


# ---------------------------------------------------------------------------
# canonical form


def refine_classes(graph: MolecularGraph) -> list[int]:
    """Equivalence classes from iterative invariant refinement (dense, 0-based)."""
    n = len(graph.atoms)
    inv = []
    for i, a in enumerate(graph.atoms):
        inv.append((a.element, graph.degree(i), a.formal_charge, a.implicit_h, int(a.in_ring), int(a.aromatic)))
    classes = _dense_ranks(inv)
    while True:
        signature = [
            (
                classes[i],
                tuple(sorted((classes[j], int(graph.bond_between(i, j).order)) for j in graph.adjacency[i])),
            )
            for i in range(n)
        ]
        refined = _dense_ranks(signature)
        if len(set(refined)) == len(set(classes)):
            return refined
        classes = refined


def _dense_ranks(keys: Sequence) -> list[int]:
    lookup = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [lookup[k] for k in keys]


def _orderings_from(graph: MolecularGraph, start: int) -> Iterator[list[list[int]]]:
    """Every distinct traversal from ``start``, as full neighbour orders.

    The parent's position in a child's order never changes the output, so it
    is pinned first and only the remaining neighbours are permuted.
    """
    n = len(graph.atoms)
    order: list[list[int]] = [list(nbrs) for nbrs in graph.adjacency]
    visited = [False] * n

    def explore(a: int, parent: int, then):
        visited[a] = True
        rest = [x for x in graph.adjacency[a] if x != parent]
        head = [parent] if parent >= 0 else []
        for perm in itertools.permutations(rest):
            order[a] = head + list(perm)
            yield from walk(a, perm, 0, then)
        visited[a] = False

    def walk(a: int, perm, i: int, then):
        if i == len(perm):
            yield from then()
            return
        nb = perm[i]
        if visited[nb]:
            yield from walk(a, perm, i + 1, then)
        else:
            yield from explore(nb, a, lambda: walk(a, perm, i + 1, then))

    def done():
        yield [list(o) for o in order]

    yield from explore(start, -1, done)


@dataclass(frozen=True)
class CanonicalForm:
    smiles: str
    start: int
    order: tuple[tuple[int, ...], ...]
    emission: tuple[int, ...]  # atom indices in the order they appear in ``smiles``


def canonical_form(graph: MolecularGraph) -> CanonicalForm:
    """Lexicographically smallest string over all starts and neighbour orders."""
    n = len(graph.atoms)
    if n == 0:
        raise ValueError("empty graph")
    symbols = [atom_symbol(graph, i) for i in range(n)]
    lead = min(symbols)
    # a start whose symbol does not begin with the smallest symbol cannot win
    starts = [i for i in range(n) if symbols[i].startswith(lead)]
    best: tuple[str, int, list[list[int]], list[int]] | None = None
    for start in starts:
        for order in _orderings_from(graph, start):
            text, emitted = _write(graph, start, order)
            if best is None or text < best[0]:
                best = (text, start, order, emitted)
    text, start, order, emitted = best
    return CanonicalForm(text, start, tuple(tuple(o) for o in order), tuple(emitted))


def canonical_ranks(graph: MolecularGraph) -> list[int]:
    """Canonical rank per atom: refined invariant class first, ties by canonical-string position."""
    classes = refine_classes(graph)
    position = {a: p for p, a in enumerate(canonical_form(graph).emission)}
    keyed = sorted(range(len(graph.atoms)), key=lambda i: (classes[i], position[i]))
    ranks = [0] * len(graph.atoms)
    for r, i in enumerate(keyed):
        ranks[i] = r
    return ranks


def canonical_smiles(graph: MolecularGraph) -> str:
    return canonical_form(graph).smiles


def canonicalize(text: str) -> str:
    return canonical_smiles(parse_smiles(text))
