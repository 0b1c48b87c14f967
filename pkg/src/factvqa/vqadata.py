"""VQA-style evaluation examples and their JSONL serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InputError
from .metrics import normalize_answer


@dataclass
class VqaExample:
    question_id: str
    image_id: str
    question: str
    answers: list[str]
    choices: list[str] | None = None
    question_type: str = "other"

    def __post_init__(self):
        if not self.answers:
            raise InputError(f"example {self.question_id} has no answers")
        if self.choices is not None and not self.choices:
            raise InputError(f"example {self.question_id} has an empty choice list")

    def target_answer(self) -> str:
        """Most frequent annotator answer; ties go lexicographically first."""
        counts: dict[str, int] = {}
        for a in self.answers:
            key = normalize_answer(a)
            counts[key] = counts.get(key, 0) + 1
        return min(counts, key=lambda a: (-counts[a], a))

    def to_record(self) -> dict:
        record = {
            "question_id": self.question_id,
            "image_id": self.image_id,
            "question": self.question,
            "answers": self.answers,
            "question_type": self.question_type,
        }
        if self.choices is not None:
            record["choices"] = self.choices
        return record

    @classmethod
    def from_record(cls, record: dict) -> "VqaExample":
        answers = record.get("answers")
        if answers is None and "answer" in record:
            answers = [record["answer"]]
        return cls(
            question_id=str(record["question_id"]),
            image_id=str(record["image_id"]),
            question=record["question"],
            answers=list(answers),
            choices=record.get("choices"),
            question_type=record.get("question_type", "other"),
        )


def read_vqa_examples(path: str | Path) -> list[VqaExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                examples.append(VqaExample.from_record(json.loads(line)))
    return examples


def write_vqa_examples(examples: list[VqaExample], path: str | Path):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), separators=(",", ":"), ensure_ascii=True) + "\n")
    tmp.replace(path)
