"""AdamW, the warmup-cosine schedule, the training loops, and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from molx import tensor as T
from molx.data import (
    CorpusSpec,
    InstructionExample,
    VOCAB_VERSION,
    TaskKind,
    build_pretrain_dataset,
    detokenize,
    synth_corpus,
)
from molx.eval import MetricReport, evaluate_answers
from molx.lora import LoraConfig, attach_lora
from molx.model import ModelConfig, MolXLM, collate_examples
from molx.nn import ForwardContext, Parameter, ParameterStore

LogFn = Callable[[dict], None]


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float
    min_lr: float

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup ({self.warmup_steps}) < total ({self.total_steps})")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr exceeds peak_lr")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup to the peak, then cosine decay to the minimum at ``total_steps``."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float
) -> None:
    """One in-place AdamW update of the trainable entries of ``params``.

    Decay is decoupled: ``p -= lr * wd * p`` next to the bias-corrected Adam step.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr * state.weight_decay * p.data - lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# configuration

ABLATIONS = ("no_fingerprint", "no_weighting", "no_auxiliaries", "no_pretraining")
COMPONENTS = ("smiles_encoder", "graph_encoder", "fusion", "decoder", "lora")


def component_of(name: str) -> str:
    if ".lora_" in name:
        return "lora"
    parts = name.split(".")
    if parts[0] == "molx":
        return parts[1]
    return parts[0]


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage; flat so it round-trips through a key=value file."""

    batch_size: int = 8
    max_text_length: int = 256
    steps: int = 300
    epochs: int = 0  # when > 0, overrides ``steps``
    seed: int = 0
    peak_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 0  # 0 means 10% of the total
    weight_decay: float = 0.05
    no_fingerprint: bool = False
    no_weighting: bool = False
    no_auxiliaries: bool = False
    no_pretraining: bool = False
    random_init_encoders: bool = True
    frozen: tuple[str, ...] = ("decoder",)
    frozen_params: tuple[str, ...] = ()
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    eval_every: int = 0

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """The published recipe, kept for reference; far beyond a desk-scale budget."""
        return cls(batch_size=12, epochs=5, peak_lr=1e-5, min_lr=5e-6, warmup_steps=1000)

    def total_steps(self, n_examples: int) -> int:
        if self.epochs > 0:
            return self.epochs * math.ceil(n_examples / self.batch_size)
        return self.steps

    def schedule(self, n_examples: int) -> Schedule:
        total = self.total_steps(n_examples)
        warmup = self.warmup_steps or max(1, total // 10)
        return Schedule(warmup, total, self.peak_lr, self.min_lr)

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig()
        return dataclasses.replace(base, no_fingerprint=self.no_fingerprint, no_weighting=self.no_weighting)

    def lora(self) -> LoraConfig:
        return LoraConfig(self.lora_rank, self.lora_alpha, self.lora_dropout)

    def is_trainable(self, name: str) -> bool:
        return component_of(name) not in self.frozen and name not in self.frozen_params

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frozen"] = list(self.frozen)
        d["frozen_params"] = list(self.frozen_params)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if k in ("frozen", "frozen_params") else v
        return cls(**kwargs)


def parse_config_text(text: str) -> dict[str, object]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Values are JSON if they parse, else strings."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
        if key in ("frozen", "frozen_params") and isinstance(out[key], str):
            out[key] = [s.strip() for s in str(out[key]).split(",") if s.strip()]
    return out


# ---------------------------------------------------------------------------
# generic loop


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    tasks: dict[str, int]

    def to_dict(self) -> dict:
        return {"step": self.step, "lr": self.lr, "loss": self.loss, "tasks": self.tasks}


def apply_freeze(store: ParameterStore, cfg: TrainConfig) -> None:
    store.set_trainable(cfg.is_trainable)


def batches(n: int, batch_size: int, seed: int, steps: int):
    """Index batches walking a fresh seeded permutation each epoch."""
    epoch, pos = 0, 0
    order = T.rng_for(seed, "shuffle", epoch).permutation(n)
    for _ in range(steps):
        if pos + batch_size > n and pos > 0:
            epoch += 1
            pos = 0
            order = T.rng_for(seed, "shuffle", epoch).permutation(n)
        idx = order[pos : pos + batch_size]
        pos += batch_size
        yield idx


def train_loop(
    model: MolXLM,
    examples: Sequence[InstructionExample],
    cfg: TrainConfig,
    log: LogFn | None = None,
    on_step: Callable[[int], None] | None = None,
) -> list[StepLog]:
    """Optimize the currently trainable parameters of ``model`` on ``examples``."""
    if not examples:
        raise TrainingError("dataset is empty")
    store = model.store()
    trainable = store.trainable()
    schedule = cfg.schedule(len(examples))
    state = OptimizerState(weight_decay=cfg.weight_decay)
    history: list[StepLog] = []
    model_cfg = dataclasses.replace(model.cfg, max_len=min(model.cfg.max_len, cfg.max_text_length))
    for step, idx in enumerate(batches(len(examples), cfg.batch_size, cfg.seed, schedule.total_steps), 1):
        chosen = [examples[i] for i in idx]
        batch = collate_examples(chosen, model_cfg)
        lr = lr_at(schedule, step)
        try:
            with T.Tape() as tape:
                loss = model.loss(batch, ForwardContext.training(cfg.seed, step))
            grads = T.backward(tape, loss, trainable)
        except T.NonFiniteError as exc:
            raise TrainingError(f"non-finite value at step {step}: {exc}") from exc
        if not math.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {step}")
        adamw_step(trainable, grads, state, lr)
        entry = StepLog(step, lr, loss.item(), dict(sorted(Counter(str(e.task) for e in chosen).items())))
        history.append(entry)
        if log is not None:
            log(entry.to_dict())
        if on_step is not None:
            on_step(step)
    return history


# ---------------------------------------------------------------------------
# stages


BASE_LM_STEPS = 4000


def base_corpus_spec(n_molecules: int = 1500, seed: int = 10_000) -> CorpusSpec:
    return CorpusSpec(n_molecules, seed=seed)


def base_lm_recipe(seed: int = 0, steps: int = BASE_LM_STEPS) -> tuple[TrainConfig, list[InstructionExample]]:
    """Settings and data for the stand-in base language model.

    The corpus seed is offset so its molecules are disjoint in practice from
    corpora generated with small seeds.
    """
    cfg = TrainConfig(seed=seed, steps=steps, batch_size=16, peak_lr=3e-3, min_lr=3e-4, frozen=())
    data = build_pretrain_dataset(synth_corpus(base_corpus_spec(seed=10_000 + seed)), seed=seed)
    return cfg, data


def train_base_lm(
    model_cfg: ModelConfig,
    examples: Sequence[InstructionExample],
    cfg: TrainConfig,
    log: LogFn | None = None,
) -> dict[str, np.ndarray]:
    """Stand-in for a pre-trained language model.

    Trains the decoder jointly with a throwaway MolX so that the decoder learns
    the answer formats and how to read a soft token. Returns the decoder weights.
    """
    base_cfg = dataclasses.replace(model_cfg, no_fingerprint=False, no_weighting=False)
    model = MolXLM(base_cfg, seed=cfg.seed, molx_seed=cfg.seed + 7919)
    store = model.store()
    store.set_trainable(lambda name: True)
    train_loop(model, examples, dataclasses.replace(cfg, frozen=()), log)
    return {k: v for k, v in store.snapshot().items() if component_of(k) == "decoder"}


def cached_base_lm(
    cache_dir: str | Path, seed: int = 0, steps: int = BASE_LM_STEPS, model_cfg: ModelConfig | None = None, log: LogFn | None = None
) -> dict[str, np.ndarray]:
    """Decoder weights of the stand-in base model, trained once and kept under ``cache_dir``.

    The file name is a hash of every setting that determines the weights, so a
    changed recipe never reuses a stale file.
    """
    model_cfg = model_cfg or ModelConfig()
    cfg, data = base_lm_recipe(seed, steps)
    key = config_hash({"model": model_cfg.to_dict(), "train": cfg.to_dict(), "vocab": VOCAB_VERSION, "n": len(data)})
    path = Path(cache_dir) / f"{key}.ckpt"
    if path.exists():
        return {k: v for k, v in load_checkpoint(path).tensors.items() if component_of(k) == "decoder"}
    decoder = train_base_lm(model_cfg, data, cfg, log)
    holder = MolXLM(model_cfg, seed=seed)
    holder.store().load(decoder)
    save_checkpoint(holder, cfg, path)
    return decoder


def build_model(model_cfg: ModelConfig, cfg: TrainConfig, decoder_state: Mapping[str, np.ndarray] | None) -> MolXLM:
    model = MolXLM(model_cfg, seed=cfg.seed)
    if decoder_state is not None:
        model.store().load(dict(decoder_state))
    return model


@dataclass
class PretrainResult:
    model: MolXLM
    history: list[StepLog]
    epoch_loss: list[float]


def run_pretraining(
    cfg: TrainConfig,
    dataset: Sequence[InstructionExample],
    decoder_state: Mapping[str, np.ndarray] | None,
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    log: LogFn | None = None,
) -> PretrainResult:
    """Align a fresh MolX to the frozen decoder. Writes final and best checkpoints to ``out_dir``."""
    if not dataset:
        raise TrainingError("dataset is empty")
    if cfg.no_auxiliaries:
        dataset = [ex for ex in dataset if ex.task.kind == "description"]
    mcfg = cfg.model_config(model_cfg)
    model = build_model(mcfg, cfg, decoder_state)
    apply_freeze(model.store(), cfg)
    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch_size))
    epoch_loss: list[float] = []
    best = {"loss": math.inf}
    history: list[StepLog] = []

    def on_step(step: int) -> None:
        if step % steps_per_epoch and step != cfg.total_steps(len(dataset)):
            return
        start = len(epoch_loss) * steps_per_epoch
        mean = float(np.mean([h.loss for h in history[start:step]]))
        epoch_loss.append(mean)
        if log is not None:
            log({"epoch": len(epoch_loss), "mean_loss": mean})
        if out_dir is not None and mean < best["loss"]:
            best["loss"] = mean
            save_checkpoint(model, cfg, Path(out_dir) / "best.ckpt")

    def record(entry: dict) -> None:
        history.append(StepLog(**entry))
        if log is not None:
            log(entry)

    train_loop(model, dataset, cfg, record, on_step)
    if out_dir is not None:
        save_checkpoint(model, cfg, Path(out_dir) / "final.ckpt")
    return PretrainResult(model, history, epoch_loss)


def generate_answers(model: MolXLM, examples: Sequence[InstructionExample], batch_size: int = 32, max_new: int | None = None) -> list[str]:
    out: list[str] = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        limit = max_new if max_new is not None else max(len(e.answer) for e in chunk) + 8
        out.extend(detokenize(ids) for ids in model.generate(chunk, limit))
    return out


def evaluate_model(model: MolXLM, examples: Sequence[InstructionExample], task: TaskKind) -> MetricReport:
    answers = generate_answers(model, examples)
    return evaluate_answers(task, answers, [e.answer for e in examples])


def headline(report: MetricReport) -> float:
    """Single higher-is-better number used for model selection."""
    m = report.metrics
    if "accuracy" in m:
        return m["accuracy"]
    if "rmse" in m:
        return -m["rmse"] if m["rmse"] is not None else -math.inf
    return m.get("meteor") or 0.0


@dataclass
class FinetuneResult:
    model: MolXLM
    history: list[StepLog]
    validation: list[tuple[int, float]]
    trainable_fraction: float


def run_finetune_lora(
    cfg: TrainConfig,
    model: MolXLM,
    splits: Mapping[str, Sequence[InstructionExample]],
    task: TaskKind,
    log: LogFn | None = None,
) -> FinetuneResult:
    """Attach LoRA to the decoder and train adapters plus MolX on ``splits['train']``.

    ``model`` is modified in place. With ``eval_every`` set, the weights with the
    best validation score (latest on ties) are restored at the end.
    """
    attach_lora(model.decoder, cfg.lora(), seed=cfg.seed)
    store = model.store()
    ft_cfg = dataclasses.replace(cfg, frozen=tuple(c for c in cfg.frozen if c != "lora"))
    apply_freeze(store, ft_cfg)
    fraction = store.count(trainable_only=True) / store.count()
    validation: list[tuple[int, float]] = []
    best: dict = {"score": -math.inf, "state": None}
    valid = splits.get("valid") or []

    def on_step(step: int) -> None:
        total = ft_cfg.total_steps(len(splits["train"]))
        if not valid or not cfg.eval_every or (step % cfg.eval_every and step != total):
            return
        score = headline(evaluate_model(model, valid, task))
        validation.append((step, score))
        if log is not None:
            log({"step": step, "valid": score})
        if score >= best["score"]:
            best["score"] = score
            best["state"] = store.snapshot()

    history = train_loop(model, splits["train"], ft_cfg, log, on_step)
    if best["state"] is not None:
        store.load(best["state"])
    return FinetuneResult(model, history, validation, fraction)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MOLXCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config["train"])


def checkpoint_config(model: MolXLM, cfg: TrainConfig) -> dict:
    return {"model": model.cfg.to_dict(), "train": cfg.to_dict()}


def save_checkpoint(model: MolXLM, cfg: TrainConfig, path: str | Path) -> None:
    write_checkpoint(model.store(), checkpoint_config(model, cfg), path)


def write_checkpoint(store: ParameterStore, config: dict, path: str | Path) -> None:
    """Magic, version, header length, JSON header, then little-endian float32 tensors in header order."""
    entries, payload, offset = [], [], 0
    for name in sorted(store.tensors):
        p = store[name]
        data = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "trainable": bool(p.requires_grad)})
        payload.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps(
        {"config": config, "config_hash": config_hash(config), "tensors": entries, "payload_bytes": offset},
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(payload))


def load_checkpoint(path: str | Path, expected_config: Mapping | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    try:
        version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(raw[start : start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt header") from exc
    body = raw[start + hlen :]
    if len(body) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload has {len(body)} bytes, header says {header['payload_bytes']}")
    tensors, trainable = {}, {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
        trainable[e["name"]] = e["trainable"]
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match header config")
    if expected_config is not None and config_hash(expected_config) != header["config_hash"]:
        diffs = sorted(_diff_fields(dict(expected_config), header["config"]))
        warnings.warn(f"checkpoint config differs in: {', '.join(diffs)}", stacklevel=2)
    return Checkpoint(header["config"], tensors, trainable)


def _diff_fields(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(_diff_fields(va, vb, f"{prefix}{key}."))
        elif va != vb:
            out.append(prefix + key)
    return out


def load_into(store: ParameterStore, tensors: Mapping[str, np.ndarray], strict: bool = True) -> None:
    """Copy ``tensors`` into ``store``; all problems are reported together before anything is written."""
    problems = []
    for name, arr in tensors.items():
        if name not in store.tensors:
            problems.append(f"unknown tensor {name}")
        elif store[name].shape != arr.shape:
            problems.append(f"{name}: checkpoint {arr.shape} vs model {store[name].shape}")
    if strict:
        problems += [f"missing tensor {n}" for n in store.tensors if n not in tensors]
    if problems:
        raise CheckpointError("checkpoint does not fit model:\n  " + "\n  ".join(problems))
    store.load(dict(tensors))


def model_from_checkpoint(ckpt: Checkpoint, lora: bool = False) -> MolXLM:
    cfg = ckpt.train_config
    model = MolXLM(ckpt.model_config, seed=cfg.seed)
    if lora or any(component_of(n) == "lora" for n in ckpt.tensors):
        attach_lora(model.decoder, cfg.lora(), seed=cfg.seed)
    store = model.store()
    load_into(store, ckpt.tensors)
    for name, flag in ckpt.trainable.items():
        store[name].requires_grad = flag
    return model


def pretrain_dataset_for(corpus_spec: CorpusSpec, cfg: TrainConfig) -> list[InstructionExample]:
    return build_pretrain_dataset(synth_corpus(corpus_spec), seed=cfg.seed, auxiliaries=not cfg.no_auxiliaries)
