"""Evaluation arithmetic: bits per byte, word-level perplexity and VQA accuracy.

NLLs are natural-log throughout; bits appear only in the returned metrics.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

LN2 = math.log(2.0)
# whitespace set used for word counts: space, \n, \r, \t, \f
_WORD_SPLIT = re.compile(rb"[ \n\r\t\f]+")


@dataclass(frozen=True)
class CorpusStats:
    L_B: int
    L_W: int
    L_S: int | None = None

    def __post_init__(self):
        if self.L_B < 1 or self.L_W < 1:
            raise ValueError("corpus counts must be ≥ 1")
        if self.L_S is not None and self.L_S < 1:
            raise ValueError("subword count must be ≥ 1")

    @property
    def bytes_per_word(self) -> float:
        return self.L_B / self.L_W

    @classmethod
    def from_bytes(cls, data: bytes, subwords: int | None = None) -> "CorpusStats":
        return cls(len(data), count_words(data), subwords)


def count_words(data: bytes) -> int:
    return sum(1 for w in _WORD_SPLIT.split(data) if w)


# Byte and word counts of the PG19 test split.
PG19_TEST = CorpusStats(L_B=41_289_101, L_W=6_966_499)


def bpb_from_byte_nll(nll: float) -> float:
    if nll < 0:
        raise ValueError(f"negative NLL {nll}")
    return nll / LN2


def bpb_from_subword_nll(nll: float, stats: CorpusStats) -> float:
    if stats.L_S is None:
        raise ValueError("stats carry no subword count")
    if nll < 0:
        raise ValueError(f"negative NLL {nll}")
    return stats.L_S / stats.L_B * nll / LN2


def word_log_ppl_from_byte_nll(nll: float, stats: CorpusStats) -> float:
    if nll < 0:
        raise ValueError(f"negative NLL {nll}")
    return stats.L_B / stats.L_W * nll


def word_ppl_from_byte_nll(nll: float, stats: CorpusStats) -> tuple[float, float]:
    """(word perplexity, its natural log); the perplexity is inf on overflow."""
    log_ppl = word_log_ppl_from_byte_nll(nll, stats)
    try:
        return math.exp(log_ppl), log_ppl
    except OverflowError:
        return math.inf, log_ppl


def word_ppl_from_bpb(bpb: float, stats: CorpusStats) -> float:
    return word_ppl_from_byte_nll(bpb * LN2, stats)[0]


def bpb_from_word_ppl(ppl: float, stats: CorpusStats) -> float:
    if ppl < 1:
        raise ValueError(f"perplexity {ppl} < 1")
    return math.log(ppl) * stats.L_W / stats.L_B / LN2


def word_ppl_from_subword_ppl(ppl_sub: float, ratio: float) -> float:
    """``ratio`` is subwords per word (L_S / L_W)."""
    if ppl_sub < 1:
        raise ValueError(f"subword perplexity {ppl_sub} < 1 implies a negative NLL")
    if ratio <= 0:
        raise ValueError("ratio must be > 0")
    return ppl_sub ** ratio


QUESTION_TYPES = ("E", "C", "CI", "CA", "QA")


def vqa_accuracy(predictions: Sequence[int], answers: Sequence[int],
                 question_types: Sequence[str]) -> dict[str, Any]:
    """Exact-match accuracy per question type plus the micro-averaged overall."""
    if not len(predictions) == len(answers) == len(question_types):
        raise ValueError("predictions, answers and question types differ in length")
    unknown = set(question_types) - set(QUESTION_TYPES)
    if unknown:
        raise ValueError(f"unknown question type(s) {sorted(unknown)}")
    hits, totals = Counter(), Counter(question_types)
    for p, a, q in zip(predictions, answers, question_types):
        hits[q] += int(p) == int(a)
    per_type = {q: hits[q] / totals[q] for q in QUESTION_TYPES if totals[q]}
    n = len(predictions)
    return {
        "overall": sum(hits.values()) / n if n else 0.0,
        "per_type": per_type,
        "counts": {q: totals[q] for q in QUESTION_TYPES if totals[q]},
    }


def relative_improvements(values: Sequence[float]) -> list[float]:
    """(v[i] - v[i+1]) / v[i] between consecutive entries; positive means lower."""
    return [(a - b) / a for a, b in zip(values, values[1:])]


@dataclass
class EvalReport:
    nll: float
    bpb: float
    n_bytes: int
    context_length: int
    word_ppl: float | None = None
    word_log_ppl: float | None = None
    accuracy: dict[str, Any] | None = None
    corpus: dict[str, Any] | None = None
    config_hash: str = ""
    split: str = ""
    step: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_nll(cls, nll: float, n_bytes: int, context_length: int,
                 stats: CorpusStats | None = None, **kw) -> "EvalReport":
        report = cls(nll=nll, bpb=bpb_from_byte_nll(nll), n_bytes=n_bytes,
                     context_length=context_length, **kw)
        if stats is not None:
            report.word_ppl, report.word_log_ppl = word_ppl_from_byte_nll(nll, stats)
            report.corpus = asdict(stats)
        return report

    def to_json(self) -> str:
        d = asdict(self)
        if d["word_ppl"] == math.inf:
            d["word_ppl"] = None  # log value still reported
        return json.dumps(d, sort_keys=True)
