"""Character tokenizer, instruction templates, synthetic corpus and multi-task datasets."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from molx.molgraph import (
    DESCRIPTOR_NAMES,
    ELEMENTS,
    Atom,
    Bond,
    BondOrder,
    DescriptorSet,
    compute_descriptors,
    make_graph,
)
from molx.smiles import canonical_smiles, parse_smiles, randomize_smiles

# ---------------------------------------------------------------------------
# tokenizer

VOCAB_VERSION = 1
PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
_CHARS = [chr(c) for c in range(32, 127)]
VOCAB: tuple[str, ...] = SPECIALS + tuple(_CHARS)
VOCAB_SIZE = len(VOCAB)
_CHAR_ID = {ch: i + len(SPECIALS) for i, ch in enumerate(_CHARS)}


class TokenizerError(ValueError):
    def __init__(self, char: str, position: int):
        super().__init__(f"character {char!r} at position {position} is not in the vocabulary")
        self.char = char
        self.position = position


def tokenize(text: str) -> list[int]:
    ids = []
    for i, ch in enumerate(text):
        tid = _CHAR_ID.get(ch)
        if tid is None:
            raise TokenizerError(ch, i)
        ids.append(tid)
    return ids


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of :func:`tokenize`; special tokens are dropped."""
    return "".join(VOCAB[i] for i in ids if i >= len(SPECIALS))


# ---------------------------------------------------------------------------
# tasks and templates


@dataclass(frozen=True)
class TaskKind:
    kind: str  # description | property | canonicalize | classify | regress
    prop: str | None = None

    def __post_init__(self):
        if self.kind not in ("description", "property", "canonicalize", "classify", "regress"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if (self.kind == "property") != (self.prop is not None):
            raise ValueError("exactly the property task carries a descriptor name")
        if self.prop is not None and self.prop not in DESCRIPTOR_NAMES:
            raise ValueError(f"unknown descriptor {self.prop!r}")

    def __str__(self) -> str:
        return f"property:{self.prop}" if self.prop else self.kind

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        if text.startswith("property:"):
            return cls("property", text.split(":", 1)[1])
        return cls(text)


DESCRIPTION = TaskKind("description")
CANONICALIZE = TaskKind("canonicalize")
CLASSIFY = TaskKind("classify")
REGRESS = TaskKind("regress")
PROPERTY_TASKS = tuple(TaskKind("property", name) for name in DESCRIPTOR_NAMES)
AUXILIARY_TASKS = PROPERTY_TASKS + (CANONICALIZE,)

_PROPERTY_QUESTIONS = {
    "molecular_weight": "What is the molecular weight of {}? Answer with a number.",
    "heavy_atom_count": "How many heavy atoms does {} have? Answer with a number.",
    "total_atom_count": "How many atoms including hydrogens does {} have? Answer with a number.",
    "bond_count": "How many bonds between heavy atoms does {} have? Answer with a number.",
    "ring_count": "How many rings does {} have? Answer with a number.",
    "aromatic_atom_count": "How many aromatic atoms does {} have? Answer with a number.",
    "hbd_count": "How many hydrogen bond donors does {} have? Answer with a number.",
    "hba_count": "How many hydrogen bond acceptors does {} have? Answer with a number.",
    "rotatable_bond_count": "How many rotatable bonds does {} have? Answer with a number.",
    "net_formal_charge": "What is the net formal charge of {}? Answer with a number.",
}


def template_for(task: TaskKind) -> str:
    if task.kind == "description":
        return "Describe the molecule {}."
    if task.kind == "canonicalize":
        return "Write the canonical SMILES for {}."
    if task.kind == "classify":
        return "Does {} contain a ring? Answer Yes or No."
    if task.kind == "regress":
        # the downstream regression target is molecular weight; same question wording
        return _PROPERTY_QUESTIONS["molecular_weight"]
    return _PROPERTY_QUESTIONS[task.prop]


def render_instruction(task: TaskKind, smiles: str) -> str:
    return template_for(task).format(smiles)


def format_property(name: str, value: float | int) -> str:
    return f"{value:.2f}" if name == "molecular_weight" else str(int(value))


def _count_phrase(n: int, singular: str, plural: str, zero: str) -> str:
    if n == 0:
        return zero
    return f"{n} {singular if n == 1 else plural}"


def describe(d: DescriptorSet) -> str:
    heavy = _count_phrase(d.heavy_atom_count, "heavy atom", "heavy atoms", "no heavy atoms")
    rings = _count_phrase(d.ring_count, "ring", "rings", "no rings")
    donors = _count_phrase(d.hbd_count, "hydrogen bond donor", "hydrogen bond donors", "no hydrogen bond donors")
    return f"This molecule has {heavy}, {rings}, {donors}, and a molecular weight of {d.molecular_weight:.2f}."


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class CorpusSpec:
    n_molecules: int
    seed: int = 0
    max_heavy_atoms: int = 8
    palette: tuple[str, ...] = ("C", "N", "O", "S")
    palette_weights: tuple[float, ...] = (0.64, 0.14, 0.14, 0.08)
    ring_probability: float = 0.35

    def __post_init__(self):
        if self.n_molecules < 1:
            raise ValueError("n_molecules must be at least 1")
        if self.max_heavy_atoms < 1:
            raise ValueError("max_heavy_atoms must be at least 1")
        if len(self.palette) != len(self.palette_weights):
            raise ValueError("palette and palette_weights differ in length")


@dataclass(frozen=True)
class CorpusEntry:
    smiles: str
    description: str


def random_molecule(rng: random.Random, spec: CorpusSpec):
    """A random valence-respecting tree with an optional extra ring bond."""
    n = rng.randint(1, spec.max_heavy_atoms)
    elements = []
    free = []
    bonds: list[Bond] = []

    def pick_element() -> str:
        return rng.choices(spec.palette, weights=spec.palette_weights)[0]

    sym = pick_element()
    elements.append(sym)
    free.append(ELEMENTS[sym].valence)
    for new in range(1, n):
        hosts = [i for i in range(new) if free[i] > 0]
        if not hosts:
            break
        host = rng.choice(hosts)
        sym = pick_element()
        cap = min(free[host], ELEMENTS[sym].valence, 3)
        orders = [1, 2, 3][:cap]
        order = rng.choices(orders, weights=[0.78, 0.17, 0.05][:cap])[0]
        elements.append(sym)
        free.append(ELEMENTS[sym].valence - order)
        free[host] -= order
        bonds.append(Bond(host, new, BondOrder(order)))
    if len(elements) >= 3 and rng.random() < spec.ring_probability:
        bonded = {(min(b.begin, b.end), max(b.begin, b.end)) for b in bonds}
        pairs = [
            (i, j)
            for i in range(len(elements))
            for j in range(i + 1, len(elements))
            if free[i] > 0 and free[j] > 0 and (i, j) not in bonded
        ]
        if pairs:
            i, j = rng.choice(pairs)
            free[i] -= 1
            free[j] -= 1
            bonds.append(Bond(i, j, BondOrder.SINGLE))
    atoms = [Atom(ELEMENTS[s].number, implicit_h=free[k]) for k, s in enumerate(elements)]
    return make_graph(atoms, bonds)


def synth_corpus(spec: CorpusSpec, exclude: Iterable[str] = ()) -> list[CorpusEntry]:
    """Distinct random molecules in canonical form with templated descriptions.

    ``exclude`` holds canonical SMILES that must not appear (e.g. another split).
    """
    rng = random.Random(spec.seed)
    seen = set(exclude)
    out: list[CorpusEntry] = []
    attempts = 0
    limit = 200 * spec.n_molecules + 1000
    while len(out) < spec.n_molecules:
        attempts += 1
        if attempts > limit:
            raise RuntimeError(f"could only generate {len(out)} distinct molecules for {spec}")
        graph = random_molecule(rng, spec)
        smi = canonical_smiles(graph)
        if smi in seen:
            continue
        seen.add(smi)
        out.append(CorpusEntry(smi, describe(compute_descriptors(parse_smiles(smi)))))
    return out


# ---------------------------------------------------------------------------
# instruction datasets


@dataclass(frozen=True)
class InstructionExample:
    task: TaskKind
    instruction: str
    smiles: str
    answer: str

    def to_record(self) -> dict[str, str]:
        return {"task": str(self.task), "instruction": self.instruction, "smiles": self.smiles, "answer": self.answer}

    @classmethod
    def from_record(cls, record: dict) -> "InstructionExample":
        return cls(TaskKind.parse(record["task"]), record["instruction"], record["smiles"], record["answer"])


def make_example(task: TaskKind, smiles: str, entry_description: str | None = None, seed: int = 0) -> InstructionExample:
    """Build one example; the answer is recomputed from the molecule alone."""
    graph = parse_smiles(smiles)
    if task.kind == "description":
        answer = entry_description if entry_description is not None else describe(compute_descriptors(graph))
        return InstructionExample(task, render_instruction(task, smiles), smiles, answer)
    if task.kind == "canonicalize":
        shown = randomize_smiles(graph, seed)
        return InstructionExample(task, render_instruction(task, shown), smiles, canonical_smiles(graph))
    d = compute_descriptors(graph)
    if task.kind == "property":
        return InstructionExample(task, render_instruction(task, smiles), smiles, format_property(task.prop, getattr(d, task.prop)))
    if task.kind == "classify":
        return InstructionExample(task, render_instruction(task, smiles), smiles, "Yes" if d.ring_count >= 1 else "No")
    return InstructionExample(task, render_instruction(task, smiles), smiles, format_property("molecular_weight", d.molecular_weight))


def build_pretrain_dataset(
    corpus: Sequence[CorpusEntry], seed: int = 0, auxiliaries: bool = True
) -> list[InstructionExample]:
    """One description example per molecule plus a 10% sample for each auxiliary task."""
    if not corpus:
        raise ValueError("corpus is empty")
    examples = [make_example(DESCRIPTION, e.smiles, e.description) for e in corpus]
    if auxiliaries:
        k = len(corpus) // 10
        for task in AUXILIARY_TASKS:
            rng = random.Random(f"{seed}:{task}")
            for idx in sorted(rng.sample(range(len(corpus)), k)):
                examples.append(make_example(task, corpus[idx].smiles, seed=rng.randrange(2**31)))
    random.Random(f"{seed}:shuffle").shuffle(examples)
    return examples


def build_downstream_dataset(
    corpus: Sequence[CorpusEntry], task: TaskKind, seed: int = 0
) -> dict[str, list[InstructionExample]]:
    """Deterministic 8/1/1 train/valid/test split for a downstream task."""
    if task.kind not in ("classify", "regress"):
        raise ValueError("downstream task must be classify or regress")
    order = list(range(len(corpus)))
    random.Random(f"{seed}:split").shuffle(order)
    n_train = (8 * len(order)) // 10
    n_valid = len(order) // 10
    parts = {
        "train": order[:n_train],
        "valid": order[n_train : n_train + n_valid],
        "test": order[n_train + n_valid :],
    }
    return {name: [make_example(task, corpus[i].smiles) for i in idx] for name, idx in parts.items()}


def write_jsonl(examples: Iterable[InstructionExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[InstructionExample]:
    with open(path, encoding="utf-8") as fh:
        return [InstructionExample.from_record(json.loads(line)) for line in fh if line.strip()]


def write_corpus(corpus: Iterable[CorpusEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in corpus:
            fh.write(json.dumps({"smiles": e.smiles, "description": e.description}) + "\n")


def read_corpus(path: str | Path) -> list[CorpusEntry]:
    with open(path, encoding="utf-8") as fh:
        return [CorpusEntry(**json.loads(line)) for line in fh if line.strip()]
