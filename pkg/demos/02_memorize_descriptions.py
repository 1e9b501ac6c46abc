"""
Teaching MolX to talk through a frozen decoder
==============================================

The decoder language model stays frozen. Only MolX, the two encoders plus the
fingerprint fusion, learns to produce a single soft token that makes the
decoder describe the molecule. On 32 molecules it can memorize every
description.

The first run trains the stand-in base language model (several minutes on one
core) and caches it under ``$MOLX_CACHE`` (default ``~/.cache/molx``).

Run with ``python demos/02_memorize_descriptions.py``.
"""

import os
import time
from pathlib import Path

from molx.data import CorpusSpec, build_pretrain_dataset, synth_corpus
from molx.train import TrainConfig, cached_base_lm, generate_answers, run_pretraining

cache = Path(os.environ.get("MOLX_CACHE", Path.home() / ".cache" / "molx"))
start = time.perf_counter()
decoder = cached_base_lm(cache)
print(f"base language model ready in {time.perf_counter() - start:.0f}s")

corpus = synth_corpus(CorpusSpec(32, seed=1))
dataset = build_pretrain_dataset(corpus, seed=0, auxiliaries=False)
print(dataset[0].instruction)
print(" ->", dataset[0].answer)

# A fresh, randomly initialized MolX learns against the frozen decoder.
cfg = TrainConfig(batch_size=8, steps=1000, peak_lr=1e-2, min_lr=1e-3, no_auxiliaries=True)
result = run_pretraining(cfg, dataset, decoder)
print(f"\nmean loss per epoch: first {result.epoch_loss[0]:.3f}, last {result.epoch_loss[-1]:.4f}")

answers = generate_answers(result.model, dataset)
exact = sum(a == e.answer for a, e in zip(answers, dataset))
print(f"{exact}/{len(dataset)} descriptions reproduced exactly\n")
for answer, example in list(zip(answers, dataset))[:3]:
    print(f"{example.smiles:12s} {answer}")
