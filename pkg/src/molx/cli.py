"""Command-line entry point: ``molx <command> [flags]``."""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TextIO

from molx import __version__
from molx.data import (
    CorpusSpec,
    TaskKind,
    TokenizerError,
    build_downstream_dataset,
    build_pretrain_dataset,
    read_corpus,
    read_jsonl,
    synth_corpus,
    write_corpus,
    write_jsonl,
)
from molx.model import MolXLM
from molx.molgraph import compute_descriptors, morgan_fingerprint
from molx.smiles import SmilesError, canonical_smiles, parse_smiles
from molx.train import (
    ABLATIONS,
    CheckpointError,
    TrainConfig,
    TrainingError,
    BASE_LM_STEPS,
    base_lm_recipe,
    component_of,
    evaluate_model,
    generate_answers,
    load_checkpoint,
    model_from_checkpoint,
    parse_config_text,
    run_finetune_lora,
    run_pretraining,
    save_checkpoint,
    train_base_lm,
)

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class DomainError(Exception):
    pass


# ---------------------------------------------------------------------------
# chem commands


def _canonicalize(line: str) -> str:
    return canonical_smiles(parse_smiles(line))


def _fingerprint(line: str) -> str:
    return morgan_fingerprint(parse_smiles(line)).to_hex()


def _descriptors(line: str) -> str:
    # one name=value block per molecule, blocks separated by a blank line
    return compute_descriptors(parse_smiles(line)).to_text().rstrip("\n") + "\n"


CHEM_COMMANDS: dict[str, Callable[[str], str]] = {
    "canonicalize": _canonicalize,
    "fingerprint": _fingerprint,
    "descriptors": _descriptors,
}


def _safe(fn: Callable[[str], str], line: str) -> tuple[bool, str]:
    try:
        return True, fn(line)
    except SmilesError as exc:
        return False, str(exc.diagnostics)


def _process_lines(fn, lines: Iterable[str], workers: int) -> Iterator[tuple[bool, str]]:
    if workers <= 1:
        yield from (_safe(fn, line) for line in lines)
        return
    with ProcessPoolExecutor(workers) as pool:
        # map preserves input order
        yield from pool.map(_safe, *zip(*((fn, line) for line in lines)), chunksize=64)


def run_chem(args, out: TextIO, err: TextIO) -> int:
    fn = CHEM_COMMANDS[args.command]
    failures = []
    with _open_in(args.input) as fh:
        numbered = [(i, line.strip()) for i, line in enumerate(fh, 1) if line.strip()]
    with _open_out(args.output, out) as dst:
        for (lineno, _), (ok, text) in zip(numbered, _process_lines(fn, (l for _, l in numbered), args.workers)):
            if ok:
                dst.write(text + "\n")
            else:
                failures.append(lineno)
                err.write(f"line {lineno}: {text}\n")
    if failures:
        err.write(f"{len(failures)} line(s) failed: {', '.join(map(str, failures))}\n")
        return EXIT_DOMAIN
    return EXIT_OK


# ---------------------------------------------------------------------------
# data commands


def run_synth(args, out: TextIO, err: TextIO) -> int:
    corpus = synth_corpus(CorpusSpec(args.n_molecules, seed=args.seed, max_heavy_atoms=args.max_heavy_atoms))
    if args.output:
        write_corpus(corpus, args.output)
    else:
        for e in corpus:
            out.write(json.dumps({"smiles": e.smiles, "description": e.description}) + "\n")
    return EXIT_OK


def run_build_dataset(args, out: TextIO, err: TextIO) -> int:
    corpus = read_corpus(_require(args.input, "--input"))
    task = TaskKind.parse(args.task or "description")
    ablate = _ablations(args)
    if task.kind == "description":
        examples = build_pretrain_dataset(corpus, seed=args.seed, auxiliaries="no_auxiliaries" not in ablate)
        write_jsonl(examples, _require(args.output, "--output"))
        err.write(f"wrote {len(examples)} examples\n")
        return EXIT_OK
    splits = build_downstream_dataset(corpus, task, seed=args.seed)
    root = Path(_require(args.output, "--output"))
    root.mkdir(parents=True, exist_ok=True)
    for name, examples in splits.items():
        write_jsonl(examples, root / f"{name}.jsonl")
    err.write(" ".join(f"{k}={len(v)}" for k, v in splits.items()) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training commands


def _train_config(args) -> TrainConfig:
    values: dict = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    values["seed"] = args.seed
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lora_rank", "lora_rank"),
                      ("lora_alpha", "lora_alpha"), ("lora_dropout", "lora_dropout")):
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    for name in _ablations(args):
        values[name] = True
    return TrainConfig.from_dict(values)


def _jsonl_logger(path: Path | None):
    fh = open(path, "w") if path else None

    def log(entry: dict) -> None:
        line = json.dumps(entry, sort_keys=True)
        if fh:
            fh.write(line + "\n")
            fh.flush()

    return log, fh


def run_pretrain(args, out: TextIO, err: TextIO) -> int:
    cfg = _train_config(args)
    dataset = read_jsonl(_require(args.input, "--input"))
    out_dir = Path(_require(args.output, "--output"))
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config()
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        decoder = {k: v for k, v in ckpt.tensors.items() if component_of(k) == "decoder"}
    else:
        base_cfg, base_data = base_lm_recipe(cfg.seed, args.base_steps)
        err.write(f"training base language model: {base_cfg.steps} steps on {len(base_data)} examples\n")
        decoder = train_base_lm(model_cfg, base_data, base_cfg)
        base = MolXLM(model_cfg, seed=cfg.seed)
        base.store().load(decoder)
        save_checkpoint(base, base_cfg, out_dir / "base.ckpt")
    log, fh = _jsonl_logger(out_dir / "train_log.jsonl")
    try:
        result = run_pretraining(cfg, dataset, decoder, model_cfg, out_dir, log)
    finally:
        fh.close()
    err.write(f"pretrained {len(result.history)} steps; final epoch loss {result.epoch_loss[-1]:.4f}\n")
    return EXIT_OK


def _split_dir(path: str) -> dict:
    root = Path(path)
    if root.is_file():
        return {"train": read_jsonl(root), "valid": []}
    return {name: read_jsonl(root / f"{name}.jsonl") for name in ("train", "valid") if (root / f"{name}.jsonl").exists()}


def run_finetune(args, out: TextIO, err: TextIO) -> int:
    cfg = _train_config(args)
    ckpt = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    splits = _split_dir(_require(args.input, "--input"))
    if "train" not in splits:
        raise DomainError(f"{args.input}: no train split found")
    task = TaskKind.parse(args.task) if args.task else splits["train"][0].task
    model = model_from_checkpoint(ckpt)
    if cfg.no_pretraining:
        fresh = MolXLM(model.cfg, seed=cfg.seed)
        fresh.store().load({k: v for k, v in ckpt.tensors.items() if component_of(k) == "decoder"})
        model = fresh
    out_dir = Path(_require(args.output, "--output"))
    out_dir.mkdir(parents=True, exist_ok=True)
    log, fh = _jsonl_logger(out_dir / "finetune_log.jsonl")
    try:
        result = run_finetune_lora(cfg, model, splits, task, log)
    finally:
        fh.close()
    save_checkpoint(result.model, cfg, out_dir / "finetuned.ckpt")
    err.write(f"trainable fraction {result.trainable_fraction:.4%}\n")
    return EXIT_OK


def run_generate(args, out: TextIO, err: TextIO) -> int:
    model = model_from_checkpoint(load_checkpoint(_require(args.checkpoint, "--checkpoint")))
    examples = read_jsonl(_require(args.input, "--input"))
    answers = generate_answers(model, examples, max_new=args.max_new)
    with _open_out(args.output, out) as dst:
        for ex, ans in zip(examples, answers):
            dst.write(json.dumps({"instruction": ex.instruction, "smiles": ex.smiles, "generated": ans}) + "\n")
    return EXIT_OK


def run_evaluate(args, out: TextIO, err: TextIO) -> int:
    model = model_from_checkpoint(load_checkpoint(_require(args.checkpoint, "--checkpoint")))
    examples = read_jsonl(_require(args.input, "--input"))
    if args.task:
        task = TaskKind.parse(args.task)
        examples = [e for e in examples if str(e.task) == str(task)]
    else:
        task = examples[0].task
    if not examples:
        raise DomainError("no examples for the requested task")
    report = evaluate_model(model, examples, task)
    out.write(report.table())
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _ablations(args) -> list[str]:
    names = []
    for chunk in args.ablate or []:
        names.extend(s.strip() for s in chunk.split(",") if s.strip())
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation(s): {', '.join(bad)}; choose from {', '.join(ABLATIONS)}")
    return names


class UsageError(Exception):
    pass


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return value


@contextlib.contextmanager
def _open_in(path: str | None):
    if path is None or path == "-":
        yield sys.stdin
    else:
        with open(path, encoding="utf-8") as fh:
            yield fh


@contextlib.contextmanager
def _open_out(path: str | None, default: TextIO):
    if path is None or path == "-":
        yield default
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _task_arg(text: str) -> str:
    try:
        TaskKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return text


COMMANDS = {
    "canonicalize": ("Canonical SMILES for each input line.", run_chem),
    "fingerprint": ("2048-bit radius-2 Morgan fingerprint (hex) for each input line.", run_chem),
    "descriptors": ("Descriptor block (name=value lines) for each input line.", run_chem),
    "synth-data": ("Generate a synthetic molecule/description corpus.", run_synth),
    "build-dataset": ("Build the pre-training or a downstream instruction dataset.", run_build_dataset),
    "pretrain": ("Align MolX to a frozen decoder.", run_pretrain),
    "finetune": ("LoRA fine-tuning on a downstream task.", run_finetune),
    "generate": ("Greedy answers for a dataset file.", run_generate),
    "evaluate": ("Score generated answers against references.", run_evaluate),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="input file (default: stdin for line-based commands)")
    common.add_argument("--output", help="output file or directory (default: stdout where applicable)")
    common.add_argument("--seed", type=int, default=0, help="single seed threaded to every random choice")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--config", help="key = value file of training settings")
    training.add_argument("--checkpoint", help="checkpoint to start from")
    training.add_argument("--task", type=_task_arg,
                          help="description | property:<name> | canonicalize | classify | regress")
    training.add_argument("--ablate", action="append", metavar="FLAG[,FLAG]",
                          help=f"ablation flags: {', '.join(ABLATIONS)}")
    training.add_argument("--random-init-encoders", action="store_true", default=True,
                          help="start encoders from random weights (always on)")
    training.add_argument("--steps", type=int, help="optimizer steps")
    training.add_argument("--batch-size", type=int, help="examples per step")
    training.add_argument("--lora-rank", type=int, default=None, help="LoRA rank (default 8)")
    training.add_argument("--lora-alpha", type=float, default=None, help="LoRA alpha (default 32)")
    training.add_argument("--lora-dropout", type=float, default=None, help="LoRA dropout (default 0.1)")

    parser = argparse.ArgumentParser(prog="molx", description="Molecule encoders aligned to a small language model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (help_text, _) in COMMANDS.items():
        parents = [common] + ([training] if name in ("build-dataset", "pretrain", "finetune", "generate", "evaluate") else [])
        p = sub.add_parser(name, parents=parents, help=help_text, description=help_text)
        if name in CHEM_COMMANDS:
            p.add_argument("--workers", type=int, default=1, help="worker processes; output order is preserved")
        if name == "synth-data":
            p.add_argument("--n-molecules", type=int, default=1000, help="corpus size")
            p.add_argument("--max-heavy-atoms", type=int, default=8, help="largest molecule")
        if name == "pretrain":
            p.add_argument("--base-steps", type=int, default=BASE_LM_STEPS,
                           help="steps for the stand-in base language model when no --checkpoint is given")
        if name == "generate":
            p.add_argument("--max-new", type=int, default=128, help="maximum generated tokens")
    return parser


def main(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command][1](args, out, err)
    except UsageError as exc:
        parser.print_usage(err)
        err.write(f"molx: error: {exc}\n")
        return EXIT_USAGE
    except (DomainError, SmilesError, TokenizerError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        err.write(f"molx {args.command}: {exc}\n")
        return EXIT_DOMAIN


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
