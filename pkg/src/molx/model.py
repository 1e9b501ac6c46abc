"""MolX encoders, fingerprint fusion, and the small decoder language model."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from molx import tensor as T
from molx.data import BOS, EOS, PAD, VOCAB_SIZE, InstructionExample, tokenize
from molx.molgraph import N_FEATURES, MolecularGraph, morgan_fingerprint, node_features
from molx.nn import (
    EVAL,
    MLP,
    ForwardContext,
    Initializer,
    LayerNorm,
    Module,
    ParameterStore,
    TransformerBlock,
    sinusoidal_positions,
)
from molx.smiles import parse_smiles
from molx.tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    vocab_size: int = VOCAB_SIZE
    max_len: int = 256
    smiles_dim: int = 32
    smiles_heads: int = 4
    smiles_layers: int = 2
    smiles_mlp: int = 128
    node_features: int = N_FEATURES
    gin_hidden: int = 32
    gin_layers: int = 3
    fp_bits: int = 2048
    fp_radius: int = 2
    proj_hidden: int = 64
    dec_heads: int = 4
    dec_layers: int = 2
    dec_mlp: int = 256
    no_fingerprint: bool = False
    no_weighting: bool = False
    w_e_init: float = 1.0
    w_ef_init: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


class SequenceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# molecule featurization


@dataclass(frozen=True)
class MoleculeFeatures:
    smiles_ids: np.ndarray  # (L,)
    x: np.ndarray  # (n_atoms, node_features)
    neighbors: np.ndarray  # (n_atoms, max_degree), -1 padded, local indices
    fingerprint: np.ndarray  # (fp_bits,)


def featurize_graph(smiles: str, graph: MolecularGraph, fp_bits: int = 2048, fp_radius: int = 2) -> MoleculeFeatures:
    if len(graph.atoms) == 0:
        raise ValueError("cannot encode an empty graph")
    width = max(1, max(graph.degree(i) for i in range(len(graph.atoms))))
    nbr = np.full((len(graph.atoms), width), -1, dtype=np.int64)
    for i, adj in enumerate(graph.adjacency):
        nbr[i, : len(adj)] = adj
    fp = morgan_fingerprint(graph, fp_radius, fp_bits).bits.astype(np.float32)
    return MoleculeFeatures(np.asarray(tokenize(smiles), dtype=np.int64), node_features(graph), nbr, fp)


@lru_cache(maxsize=50_000)
def featurize(smiles: str, fp_bits: int = 2048, fp_radius: int = 2) -> MoleculeFeatures:
    return featurize_graph(smiles, parse_smiles(smiles), fp_bits, fp_radius)


@dataclass
class MoleculeBatch:
    smiles_ids: np.ndarray  # (B, L) padded with PAD
    smiles_mask: np.ndarray  # (B, L) bool
    x: np.ndarray  # (N, F) all atoms stacked
    neighbors: np.ndarray  # (N, W) global indices, -1 padded
    pool: np.ndarray  # (B, M) global atom indices per molecule, -1 padded
    fingerprints: np.ndarray  # (B, fp_bits)

    @classmethod
    def collate(cls, feats: Sequence[MoleculeFeatures]) -> "MoleculeBatch":
        b = len(feats)
        length = max(len(f.smiles_ids) for f in feats)
        ids = np.full((b, length), PAD, dtype=np.int64)
        mask = np.zeros((b, length), dtype=bool)
        for i, f in enumerate(feats):
            ids[i, : len(f.smiles_ids)] = f.smiles_ids
            mask[i, : len(f.smiles_ids)] = True
        sizes = [f.x.shape[0] for f in feats]
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        width = max(f.neighbors.shape[1] for f in feats)
        nbr = np.full((sum(sizes), width), -1, dtype=np.int64)
        pool = np.full((b, max(sizes)), -1, dtype=np.int64)
        for i, (f, off) in enumerate(zip(feats, offsets)):
            rows = slice(off, off + sizes[i])
            local = f.neighbors
            nbr[rows, : local.shape[1]] = np.where(local >= 0, local + off, -1)
            pool[i, : sizes[i]] = np.arange(off, off + sizes[i])
        x = np.concatenate([f.x for f in feats], axis=0)
        fps = np.stack([f.fingerprint for f in feats])
        return cls(ids, mask, x, nbr, pool, fps)


# ---------------------------------------------------------------------------
# encoders


class SmilesEncoder(Module):
    """Character embeddings + sinusoidal positions, bidirectional transformer, mean pool, projector."""

    def __init__(self, init: Initializer, cfg: ModelConfig):
        self.cfg = cfg
        self.embed = init.normal("embed", (cfg.vocab_size, cfg.smiles_dim), 1.0)
        self.blocks = [
            TransformerBlock(init.child(f"blocks.{i}"), cfg.smiles_dim, cfg.smiles_heads, cfg.smiles_mlp, causal=False)
            for i in range(cfg.smiles_layers)
        ]
        self.ln_out = LayerNorm(init.child("ln_out"), cfg.smiles_dim)
        self.proj = MLP(init.child("proj"), cfg.smiles_dim, cfg.proj_hidden, cfg.d_model)

    def token_states(self, ids: np.ndarray, mask: np.ndarray, ctx: ForwardContext = EVAL) -> Tensor:
        b, length = ids.shape
        if length > self.cfg.max_len:
            raise SequenceError(f"SMILES of length {length} exceeds {self.cfg.max_len}")
        h = T.embedding(self.embed, ids)
        pe = Tensor(sinusoidal_positions(length, self.cfg.smiles_dim).astype(h.data.dtype))
        h = T.add(h, pe)
        for block in self.blocks:
            h = block(h, ctx, key_mask=mask)
        return self.ln_out(h)

    def pooled(self, ids: np.ndarray, mask: np.ndarray, ctx: ForwardContext = EVAL) -> Tensor:
        h = self.token_states(ids, mask, ctx)
        b, length, d = h.shape
        index = np.where(mask, np.arange(b)[:, None] * length + np.arange(length)[None, :], -1)
        return T.gather_mean(T.reshape(h, (b * length, d)), index)

    def __call__(self, ids: np.ndarray, mask: np.ndarray, ctx: ForwardContext = EVAL) -> Tensor:
        return self.proj(self.pooled(ids, mask, ctx), ctx)


class GINLayer(Module):
    def __init__(self, init: Initializer, n_in: int, n_out: int):
        self.eps = init.constant("eps", (), 0.0)
        self.mlp = MLP(init.child("mlp"), n_in, n_out, n_out)

    def __call__(self, h: Tensor, neighbors: np.ndarray, ctx: ForwardContext = EVAL) -> Tensor:
        one = Tensor(np.ones((), dtype=h.data.dtype))
        agg = T.add(T.mul(h, T.add(one, self.eps)), T.gather_sum(h, neighbors))
        return self.mlp(agg, ctx)


class GraphEncoder(Module):
    """GIN message passing with sum aggregation, mean pooling over atoms, projector."""

    def __init__(self, init: Initializer, cfg: ModelConfig):
        self.layers = []
        width = cfg.node_features
        for i in range(cfg.gin_layers):
            self.layers.append(GINLayer(init.child(f"layers.{i}"), width, cfg.gin_hidden))
            width = cfg.gin_hidden
        self.proj = MLP(init.child("proj"), width, cfg.proj_hidden, cfg.d_model)

    def node_states(self, x: np.ndarray, neighbors: np.ndarray, ctx: ForwardContext = EVAL) -> Tensor:
        h = Tensor(x.astype(T._dtype()))
        for i, layer in enumerate(self.layers):
            h = layer(h, neighbors, ctx)
            if i < len(self.layers) - 1:
                h = T.gelu(h)
        return h

    def pooled(self, x: np.ndarray, neighbors: np.ndarray, pool: np.ndarray, ctx: ForwardContext = EVAL) -> Tensor:
        return T.gather_mean(self.node_states(x, neighbors, ctx), pool)

    def __call__(self, x, neighbors, pool, ctx: ForwardContext = EVAL) -> Tensor:
        return self.proj(self.pooled(x, neighbors, pool, ctx), ctx)


class FusionHead(Module):
    """Averages the two encoder outputs and mixes in the projected fingerprint with learned weights."""

    def __init__(self, init: Initializer, cfg: ModelConfig):
        self.cfg = cfg
        self.fp_proj = None if cfg.no_fingerprint else MLP(init.child("fp_proj"), cfg.fp_bits, cfg.proj_hidden, cfg.d_model)
        if cfg.no_weighting:
            self.w_e = self.w_ef = None
        else:
            self.w_e = init.constant("w_e", (), cfg.w_e_init)
            self.w_ef = None if cfg.no_fingerprint else init.constant("w_ef", (), cfg.w_ef_init)

    def __call__(self, e_s: Tensor, e_g: Tensor, fingerprints: np.ndarray | None, ctx: ForwardContext = EVAL) -> Tensor:
        if e_s.shape != e_g.shape:
            raise T.ShapeError(f"encoder outputs differ in shape: {e_s.shape} vs {e_g.shape}")
        e = T.scale(T.add(e_s, e_g), 0.5)
        if self.w_e is not None:
            e = T.mul(e, self.w_e)
        if self.fp_proj is None:
            return e
        e_f = self.fp_proj(Tensor(fingerprints.astype(e.data.dtype)), ctx)
        if self.w_ef is not None:
            e_f = T.mul(e_f, self.w_ef)
        return T.add(e, e_f)


class MolX(Module):
    def __init__(self, init: Initializer, cfg: ModelConfig):
        self.smiles_encoder = SmilesEncoder(init.child("smiles_encoder"), cfg)
        self.graph_encoder = GraphEncoder(init.child("graph_encoder"), cfg)
        self.fusion = FusionHead(init.child("fusion"), cfg)

    def __call__(self, batch: MoleculeBatch, ctx: ForwardContext = EVAL) -> Tensor:
        e_s = self.smiles_encoder(batch.smiles_ids, batch.smiles_mask, ctx)
        e_g = self.graph_encoder(batch.x, batch.neighbors, batch.pool, ctx)
        return self.fusion(e_s, e_g, batch.fingerprints, ctx)


# ---------------------------------------------------------------------------
# decoder


class DecoderLM(Module):
    """Causal character-level transformer whose output projection is tied to its input embedding."""

    def __init__(self, init: Initializer, cfg: ModelConfig):
        self.cfg = cfg
        self.embed = init.normal("embed", (cfg.vocab_size, cfg.d_model), 0.02)
        self.positions = init.normal("positions", (cfg.max_len, cfg.d_model), 0.02)
        self.blocks = [
            TransformerBlock(init.child(f"blocks.{i}"), cfg.d_model, cfg.dec_heads, cfg.dec_mlp, causal=True)
            for i in range(cfg.dec_layers)
        ]
        self.ln_out = LayerNorm(init.child("ln_out"), cfg.d_model)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise SequenceError(f"token id out of vocabulary range [0, {self.cfg.vocab_size})")
        return T.embedding(self.embed, ids)

    def __call__(
        self,
        ids: np.ndarray,
        soft: Tensor | None = None,
        soft_pos: np.ndarray | None = None,
        ctx: ForwardContext = EVAL,
    ) -> Tensor:
        """Logits (B, S, V). Row ``soft_pos[b]`` of the input is replaced by ``soft[b]``."""
        b, length = ids.shape
        if length > self.cfg.max_len:
            raise SequenceError(f"sequence length {length} exceeds {self.cfg.max_len}")
        h = self.embed_tokens(ids)
        if soft is not None:
            h = T.put_rows(h, soft, soft_pos)
        h = T.add(h, T.take_rows(T.reshape(self.positions, (1,) + self.positions.shape), np.zeros(length, dtype=np.int64), np.arange(length)))
        for block in self.blocks:
            h = block(h, ctx)
        h = self.ln_out(h)
        return T.matmul(h, T.transpose_last(self.embed))


# ---------------------------------------------------------------------------
# soft-token sequences


@dataclass
class SequenceBatch:
    ids: np.ndarray  # (B, S)
    soft_pos: np.ndarray  # (B,)
    targets: np.ndarray  # (B, S)
    weights: np.ndarray  # (B, S) 1 on answer positions
    molecules: MoleculeBatch

    @property
    def n_answer_tokens(self) -> int:
        return int(self.weights.sum())


def instruction_ids(instruction: str) -> list[int]:
    return [BOS] + tokenize(instruction)


def answer_ids(answer: str) -> list[int]:
    return tokenize(answer) + [EOS]


def layout_sequence(instr: Sequence[int], answer: Sequence[int]) -> tuple[list[int], int, list[int], list[float]]:
    """Input ids, soft-token slot, targets and loss weights for ``[z_1..z_T, e, y_1..y_{L-1}]``."""
    t, n = len(instr), len(answer)
    if n < 1:
        raise SequenceError("answer must have at least one token")
    ids = list(instr) + [PAD] + list(answer[:-1])
    targets = [PAD] * t + list(answer)
    weights = [0.0] * t + [1.0] * n
    return ids, t, targets, weights


def collate_examples(examples: Sequence[InstructionExample], cfg: ModelConfig) -> SequenceBatch:
    rows = [layout_sequence(instruction_ids(ex.instruction), answer_ids(ex.answer)) for ex in examples]
    length = max(len(r[0]) for r in rows)
    if length > cfg.max_len:
        raise SequenceError(f"sequence length {length} exceeds {cfg.max_len}")
    b = len(rows)
    ids = np.full((b, length), PAD, dtype=np.int64)
    targets = np.full((b, length), PAD, dtype=np.int64)
    weights = np.zeros((b, length))
    soft_pos = np.zeros(b, dtype=np.int64)
    for i, (seq, pos, tgt, w) in enumerate(rows):
        ids[i, : len(seq)] = seq
        targets[i, : len(tgt)] = tgt
        weights[i, : len(w)] = w
        soft_pos[i] = pos
    feats = [featurize(ex.smiles, cfg.fp_bits, cfg.fp_radius) for ex in examples]
    return SequenceBatch(ids, soft_pos, targets, weights, MoleculeBatch.collate(feats))


def sequence_nll(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Summed negative log-likelihood over answer positions (weights mark them)."""
    return T.token_nll(logits, targets, weights)


class MolXLM(Module):
    """MolX feeding one soft token into the decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, molx_seed: int | None = None):
        self.cfg = cfg
        self.seed = seed
        self.molx = MolX(Initializer(seed if molx_seed is None else molx_seed, "molx"), cfg)
        self.decoder = DecoderLM(Initializer(seed, "decoder"), cfg)

    def store(self) -> ParameterStore:
        return ParameterStore.of(self)

    def logits(self, batch: SequenceBatch, ctx: ForwardContext = EVAL) -> Tensor:
        e = self.molx(batch.molecules, ctx)
        return self.decoder(batch.ids, e, batch.soft_pos, ctx)

    def loss(self, batch: SequenceBatch, ctx: ForwardContext = EVAL) -> Tensor:
        """Mean per-answer-token negative log-likelihood over the batch."""
        total = sequence_nll(self.logits(batch, ctx), batch.targets, batch.weights)
        return T.scale(total, 1.0 / batch.n_answer_tokens)

    def generate(
        self, examples: Sequence[InstructionExample], max_new: int = 128, soft: np.ndarray | None = None
    ) -> list[list[int]]:
        """Greedy decoding; stops at EOS or after ``max_new`` tokens. Returns ids without EOS."""
        if not examples or max_new <= 0:
            return [[] for _ in examples]
        with T.no_tape():
            feats = [featurize(ex.smiles, self.cfg.fp_bits, self.cfg.fp_radius) for ex in examples]
            e = Tensor(soft) if soft is not None else self.molx(MoleculeBatch.collate(feats))
            prompts = [instruction_ids(ex.instruction) for ex in examples]
            return greedy_decode(self.decoder, prompts, e, max_new)


def greedy_decode(decoder: DecoderLM, prompts: Sequence[Sequence[int]], e: Tensor, max_new: int) -> list[list[int]]:
    b = len(prompts)
    outputs: list[list[int]] = [[] for _ in range(b)]
    done = [False] * b
    for _ in range(max_new):
        seqs = [list(p) + [PAD] + out for p, out in zip(prompts, outputs)]
        length = max(len(s) for s in seqs)
        if length > decoder.cfg.max_len:
            break
        ids = np.full((b, length), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        soft_pos = np.array([len(p) for p in prompts])
        logits = decoder(ids, e, soft_pos).data
        for i, s in enumerate(seqs):
            if done[i]:
                continue
            nxt = int(np.argmax(logits[i, len(s) - 1]))
            if nxt == EOS:
                done[i] = True
            else:
                outputs[i].append(nxt)
        if all(done):
            break
    return outputs
