"""Text-overlap metrics, answer parsing, and property-prediction metrics."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from molx.data import TaskKind

METRIC_VERSION = 1
EPSILON = 1e-9
_TOKEN = re.compile(r"\w+|[^\w\s]")
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")
_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_SUFFIXES = ("ing", "es", "ed", "s")

TEXT_COLUMNS = (("BLE-2", "bleu2"), ("BLE-4", "bleu4"), ("ROG-1", "rouge1"), ("ROG-2", "rouge2"), ("ROG-L", "rougeL"), ("MET", "meteor"))


def metric_tokens(text: str) -> list[str]:
    """Lowercase, then split into word runs and single punctuation marks."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    empty_candidate: bool = False


def bleu_detail(candidate: str, reference: str, n: int = 4) -> BleuResult:
    cand, ref = metric_tokens(candidate), metric_tokens(reference)
    if not cand:
        return BleuResult(0.0, (0.0,) * n, 0.0, empty_candidate=True)
    precisions = []
    for k in range(1, n + 1):
        c, r = _ngrams(cand, k), _ngrams(ref, k)
        matched = sum(min(cnt, r[g]) for g, cnt in c.items())
        total = sum(c.values())
        precisions.append(max(matched, EPSILON) / max(total, 1))
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(cand)))
    geo = math.exp(sum(math.log(p) for p in precisions) / n)
    return BleuResult(bp * geo, tuple(precisions), bp)


def bleu_n(candidate: str, reference: str, n: int = 4) -> float:
    """Sentence BLEU with epsilon smoothing of zero k-gram matches."""
    if n < 1:
        raise ValueError("n must be positive")
    return bleu_detail(candidate, reference, n).score


# ---------------------------------------------------------------------------
# ROUGE


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: str, reference: str, variant: int | str = 1) -> float:
    """ROUGE-1/2 n-gram F1 or ROUGE-L LCS F1."""
    cand, ref = metric_tokens(candidate), metric_tokens(reference)
    if str(variant).upper() == "L":
        return _f1(lcs_length(cand, ref), len(cand), len(ref))
    n = int(variant)
    if n not in (1, 2):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    overlap = sum((c & r).values())
    return _f1(overlap, sum(c.values()), sum(r.values()))


# ---------------------------------------------------------------------------
# METEOR-lite


def stem(token: str) -> str:
    for suffix in _SUFFIXES:
        if token.endswith(suffix) and len(token) > len(suffix) + 1:
            return token[: -len(suffix)]
    return token


def align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Greedy one-to-one unigram alignment: exact matches first, then stem matches, left to right."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for key in (lambda t: t, stem):
        for i, tok in enumerate(cand):
            if i in used_c:
                continue
            for j, other in enumerate(ref):
                if j not in used_r and key(tok) == key(other):
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of alignments adjacent in both candidate and reference."""
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(candidate: str, reference: str) -> float:
    cand, ref = metric_tokens(candidate), metric_tokens(reference)
    pairs = align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return fmean * (1 - penalty)


# ---------------------------------------------------------------------------
# answers and task metrics


@dataclass(frozen=True)
class ParsedAnswer:
    value: float | bool | str | None
    parseable: bool


def parse_answer(text: str, task: TaskKind) -> ParsedAnswer:
    if task.kind in ("regress", "property"):
        m = _NUMBER.search(text)
        return ParsedAnswer(float(m.group()), True) if m else ParsedAnswer(None, False)
    if task.kind == "classify":
        m = _YES_NO.search(text)
        return ParsedAnswer(m.group().lower() == "yes", True) if m else ParsedAnswer(None, False)
    return ParsedAnswer(text, True)


@dataclass(frozen=True)
class RegressionMetrics:
    rmse: float | None  # None when nothing parsed
    n: int
    unparseable: int


def regression_metrics(pairs: Iterable[tuple[float | None, float]]) -> RegressionMetrics:
    sq, n, bad = 0.0, 0, 0
    for pred, target in pairs:
        if pred is None:
            bad += 1
            continue
        sq += (pred - target) ** 2
        n += 1
    return RegressionMetrics(math.sqrt(sq / n) if n else None, n + bad, bad)


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    f1: float
    n: int
    unparseable: int


def classification_metrics(pairs: Iterable[tuple[bool | None, bool]]) -> ClassificationMetrics:
    """Accuracy and positive-class F1; an unparseable prediction counts as wrong."""
    tp = fp = fn = tn = bad = 0
    for pred, target in pairs:
        if pred is None:
            bad += 1
            pred = not target
        if pred and target:
            tp += 1
        elif pred and not target:
            fp += 1
        elif target:
            fn += 1
        else:
            tn += 1
    n = tp + fp + fn + tn
    denom = 2 * tp + fp + fn
    return ClassificationMetrics((tp + tn) / n if n else 0.0, 2 * tp / denom if denom else 0.0, n, bad)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float | None] = field(default_factory=dict)
    n_examples: int = 0
    unparseable: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"version": METRIC_VERSION, "task": self.task, "n_examples": self.n_examples,
             "unparseable": self.unparseable, "metrics": self.metrics},
            sort_keys=True,
        )

    def table(self) -> str:
        if self.task in ("description", "canonicalize") or self.task.startswith("property"):
            if all(key in self.metrics for _, key in TEXT_COLUMNS):
                cols = TEXT_COLUMNS
            else:
                cols = tuple((k, k) for k in self.metrics)
        else:
            cols = tuple((k.upper() if k != "accuracy" else "ACC", k) for k in self.metrics)
        cells = [_fmt(self.metrics[key]) for _, key in cols]
        widths = [max(len(h), len(c)) for (h, _), c in zip(cols, cells)]
        head = "  ".join(h.rjust(w) for (h, _), w in zip(cols, widths))
        row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{head}\n{row}\n"


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def text_report(task: str, candidates: Sequence[str], references: Sequence[str]) -> MetricReport:
    """Per-example metrics averaged over the set."""
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    n = len(candidates)
    sums = dict.fromkeys((key for _, key in TEXT_COLUMNS), 0.0)
    for c, r in zip(candidates, references):
        sums["bleu2"] += bleu_n(c, r, 2)
        sums["bleu4"] += bleu_n(c, r, 4)
        sums["rouge1"] += rouge(c, r, 1)
        sums["rouge2"] += rouge(c, r, 2)
        sums["rougeL"] += rouge(c, r, "L")
        sums["meteor"] += meteor_lite(c, r)
    metrics = {k: (v / n if n else None) for k, v in sums.items()}
    metrics["exact"] = sum(c == r for c, r in zip(candidates, references)) / n if n else None
    report = MetricReport(task, metrics, n)
    return report


def evaluate_answers(task: TaskKind, candidates: Sequence[str], references: Sequence[str]) -> MetricReport:
    if task.kind == "classify":
        pairs = [(parse_answer(c, task).value, parse_answer(r, task).value) for c, r in zip(candidates, references)]
        m = classification_metrics(pairs)
        return MetricReport(str(task), {"accuracy": m.accuracy, "f1": m.f1}, m.n, m.unparseable)
    if task.kind in ("regress", "property"):
        pairs = [(parse_answer(c, task).value, parse_answer(r, task).value) for c, r in zip(candidates, references)]
        m = regression_metrics(pairs)
        return MetricReport(str(task), {"rmse": m.rmse}, m.n, m.unparseable)
    return text_report(str(task), candidates, references)
