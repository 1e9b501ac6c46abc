"""
Molecules as strings, graphs and bit vectors
============================================

Parse a few SMILES strings, write them back in many orders, and check that the
canonical form, the fingerprint and the descriptors do not care about the order
the atoms were written in.

Run with ``python demos/01_molecules.py``.
"""

import numpy as np

from molx.molgraph import compute_descriptors, morgan_fingerprint, node_features, permute_atoms
from molx.smiles import SmilesError, canonicalize, parse_smiles, randomize_smiles

# A molecule is a graph: atoms are nodes, bonds are edges.
graph = parse_smiles("CC(=O)Nc1ccccc1")
print(f"{len(graph.atoms)} heavy atoms, {len(graph.bonds)} bonds")
print("implicit hydrogens:", [a.implicit_h for a in graph.atoms])

# The same graph has many valid spellings. Canonicalization picks one of them.
spellings = {randomize_smiles(graph, seed) for seed in range(8)}
print("\nrandom spellings:")
for s in sorted(spellings):
    print(f"  {s:20s} -> {canonicalize(s)}")

# Node features: one row per atom, one-hot blocks plus ring and aromatic flags.
x = node_features(graph)
print("\nnode feature matrix:", x.shape)

# Relabelling atoms changes the rows of X but nothing that describes the molecule.
perm = np.random.default_rng(0).permutation(len(graph.atoms)).tolist()
shuffled = permute_atoms(graph, perm)
print("fingerprint unchanged:", morgan_fingerprint(shuffled) == morgan_fingerprint(graph))
print("descriptors unchanged:", compute_descriptors(shuffled) == compute_descriptors(graph))

fp = morgan_fingerprint(graph)
print(f"\n{fp.popcount()} of 2048 bits set; first hex digits {fp.to_hex()[:16]}")
print("\ndescriptors:")
print(compute_descriptors(graph).to_text())

# Parse errors say what went wrong and where.
for bad in ("C1CC", "CC(O", "CXC"):
    try:
        parse_smiles(bad)
    except SmilesError as exc:
        print(f"{bad!r}: {exc.diagnostics}")
