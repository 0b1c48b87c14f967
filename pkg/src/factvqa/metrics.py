"""Answer metrics, prediction selection, and the answer vocabulary.

Answer normalization is pinned here once: lowercase, trim, collapse
internal whitespace. No article stripping and no numeral mapping, so
("two", "2") never match.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def vqa_accuracy(predicted: str, annotator_answers: list[str]) -> float:
    """min(1, votes/3): full credit once three annotators agree."""
    pred = normalize_answer(predicted)
    votes = sum(1 for a in annotator_answers if normalize_answer(a) == pred)
    return min(1.0, votes / 3.0)


def exact_match(predicted: str, labeled: str) -> int:
    return int(normalize_answer(predicted) == normalize_answer(labeled))


@dataclass
class Prediction:
    answer: str
    index: int
    used_fallback: bool = False


def predict_answer(distribution: np.ndarray, answers: list[str],
                   task: str = "open_ended",
                   choices: list[str] | None = None) -> Prediction:
    """Answer string with the highest score.

    Open-ended picks the global argmax. Multi-choice restricts to the
    given choices; choices outside the vocabulary score -inf, and if no
    choice is in the vocabulary at all the first choice is returned with
    the fallback flag set. Ties go to the lowest vocabulary index.
    """
    if task == "open_ended":
        index = int(np.argmax(distribution))
        return Prediction(answers[index], index)
    if task != "multi_choice":
        raise ValueError(f"unknown task {task!r}")
    if not choices:
        raise ValueError("multi-choice prediction needs a non-empty choice list")
    lookup = {}
    for i, a in enumerate(answers):
        lookup.setdefault(normalize_answer(a), i)
    best = None
    for choice in choices:
        index = lookup.get(normalize_answer(choice))
        if index is None:
            continue
        score = distribution[index]
        if best is None or score > best[0] or (score == best[0] and index < best[1]):
            best = (score, index)
    if best is None:
        return Prediction(choices[0], -1, used_fallback=True)
    return Prediction(answers[best[1]], best[1])


class AnswerVocabulary:
    """Frequency-ranked candidate answers, normalized."""

    def __init__(self, answers: list[str]):
        self.answers = list(answers)
        self.index = {}
        for i, a in enumerate(self.answers):
            self.index.setdefault(a, i)

    def __len__(self):
        return len(self.answers)

    def lookup(self, answer: str) -> int | None:
        return self.index.get(normalize_answer(answer))

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self.answers).encode("utf-8")).hexdigest()

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.answers) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AnswerVocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def answer_vocab(answer_lists: list[list[str]],
                 size: int | None = 2000) -> tuple[AnswerVocabulary, float]:
    """Top-N answers by frequency over every annotator answer, with the
    fraction of answer tokens the vocabulary covers. ``size=None`` keeps
    every unique answer (single-word exact-match corpora)."""
    counts = Counter()
    for answers in answer_lists:
        counts.update(normalize_answer(a) for a in answers)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if size is not None:
        ranked = ranked[:size]
    vocab = AnswerVocabulary([a for a, _ in ranked])
    total = sum(counts.values())
    covered = sum(c for a, c in counts.items() if a in vocab.index)
    return vocab, (covered / total if total else 0.0)
