"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np

from molx.molgraph import MolecularGraph
from molx.smiles import write_smiles


def brute_force_canonical(graph: MolecularGraph) -> str:
    """Lexicographic minimum of write_smiles over every start atom and every neighbor permutation."""
    best = None
    per_atom = [list(itertools.permutations(adj)) for adj in graph.adjacency]
    for perms in itertools.product(*per_atom):
        order = [list(p) for p in perms]
        for start in range(len(graph.atoms)):
            s = write_smiles(graph, start, order)
            if best is None or s < best:
                best = s
    return best


def isomorphism(g: MolecularGraph, h: MolecularGraph) -> list[int] | None:
    """Brute-force atom mapping g -> h preserving elements, charges, H counts and bond orders."""
    n = len(g.atoms)
    if n != len(h.atoms) or len(g.bonds) != len(h.bonds):
        return None

    def sig(graph, i):
        a = graph.atoms[i]
        return (a.element, a.formal_charge, a.implicit_h, a.aromatic, graph.degree(i))

    bonds_h = {(min(b.begin, b.end), max(b.begin, b.end)): b.order for b in h.bonds}
    candidates = [[j for j in range(n) if sig(h, j) == sig(g, i)] for i in range(n)]
    for perm in itertools.product(*candidates):
        if len(set(perm)) != n:
            continue
        if all(bonds_h.get((min(perm[b.begin], perm[b.end]), max(perm[b.begin], perm[b.end]))) == b.order for b in g.bonds):
            return list(perm)
    return None


def cycle_rank_bruteforce(graph: MolecularGraph) -> int:
    """Dimension of the cycle space over GF(2), from the incidence matrix rank."""
    n, m = len(graph.atoms), len(graph.bonds)
    if m == 0:
        return 0
    inc = np.zeros((n, m), dtype=np.uint8)
    for k, b in enumerate(graph.bonds):
        inc[b.begin, k] = 1
        inc[b.end, k] = 1
    rank, rows = 0, inc.copy()
    for col in range(m):
        pivot = next((r for r in range(rank, n) if rows[r, col]), None)
        if pivot is None:
            continue
        rows[[rank, pivot]] = rows[[pivot, rank]]
        for r in range(n):
            if r != rank and rows[r, col]:
                rows[r] ^= rows[rank]
        rank += 1
    return m - rank


def softmax_nll(logits: np.ndarray, targets: list[int]) -> float:
    """Per-row log-sum-exp minus target logit, summed, in plain Python floats."""
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(float(v) for v in row)
        lse = m + math.log(sum(math.exp(float(v) - m) for v in row))
        total += lse - float(row[t])
    return total


def np_gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU written directly from its formula."""
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def np_mlp(params: dict, prefix: str, x: np.ndarray) -> np.ndarray:
    """Two-layer perceptron ``down(gelu(up(x)))`` with (out, in) weights, in float64."""
    w1 = params[f"{prefix}.up_proj.weight"].data.astype(np.float64)
    b1 = params[f"{prefix}.up_proj.bias"].data.astype(np.float64)
    w2 = params[f"{prefix}.down_proj.weight"].data.astype(np.float64)
    b2 = params[f"{prefix}.down_proj.bias"].data.astype(np.float64)
    return np_gelu(x @ w1.T + b1) @ w2.T + b2
