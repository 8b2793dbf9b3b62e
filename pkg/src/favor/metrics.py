"""Scoring rules: WER with an S/D/I breakdown, and answer matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from . import kernels

YES_NO_OPPOSITE = {"yes": "no", "no": "yes"}
SCORE_KINDS = ("multiple_choice", "open", "ocr")

# how each synthetic task is scored
TASK_SCORING = {"temporal_qa": "multiple_choice", "avm": "multiple_choice", "isqa": "multiple_choice", "toy_asr": "wer"}


@dataclass(frozen=True)
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_len

    def __add__(self, other: "WerResult") -> "WerResult":
        return WerResult(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )


def _words(x) -> list[str]:
    if isinstance(x, str):
        return x.lower().split()
    return [str(w).lower() for w in x]


def wer(reference, hypothesis) -> WerResult:
    """Minimal edit alignment of hypothesis against reference, counted per error type."""
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    ids: dict[str, int] = {}
    r = [ids.setdefault(w, len(ids)) for w in ref]
    h = [ids.setdefault(w, len(ids)) for w in hyp]
    s, d, i = kernels.edit_ops(r, h)
    return WerResult(s, d, i, len(ref))


def corpus_wer(pairs) -> WerResult:
    total = WerResult(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    return total


def contains_phrase(words: Sequence[str], phrase: Sequence[str]) -> bool:
    """True if ``phrase`` occurs in ``words`` as a contiguous, in-order run."""
    n = len(phrase)
    if n == 0:
        return False
    return any(list(words[i : i + n]) == list(phrase) for i in range(len(words) - n + 1))


def word_match(reference, hypothesis) -> bool:
    """Open-answer rule: the reference occurs word-for-word in the answer.

    For a yes/no reference the opposite word must not also appear.
    """
    ref, hyp = _words(reference), _words(hypothesis)
    if not contains_phrase(hyp, ref):
        return False
    if len(ref) == 1 and ref[0] in YES_NO_OPPOSITE and YES_NO_OPPOSITE[ref[0]] in hyp:
        return False
    return True


def ocr_score(references, hypothesis) -> float:
    """Each reference answer found in the hypothesis is worth 1/3, capped at 1."""
    hits = sum(word_match(r, hypothesis) for r in references)
    return min(hits / 3.0, 1.0)


@dataclass
class EvalRecord:
    task_id: str
    kind: str
    hypothesis: list[str]
    reference: list[str] | list[list[str]]
    score: float | None = None
    prompt: list[str] | None = None


Judge = Callable[[EvalRecord], float]


def score_answer(record: EvalRecord, kind: str) -> float:
    """Score one answer.

    ``multiple_choice`` needs an exact match of the whole answer, ``open``
    uses :func:`word_match`, and ``ocr`` treats ``record.reference`` as a
    list of acceptable answers scored by :func:`ocr_score`.
    """
    if kind == "multiple_choice":
        return float(_words(record.hypothesis) == _words(record.reference))
    if kind == "open":
        return float(word_match(record.reference, record.hypothesis))
    if kind == "ocr":
        return ocr_score(record.reference, record.hypothesis)
    raise ValueError(f"unknown scoring kind {kind!r}; expected one of {SCORE_KINDS}")


def exact_judge(record: EvalRecord) -> float:
    """Stand-in for a model-based equivalence judge: the symbolic open-answer rule."""
    return score_answer(record, "open")
