"""Deterministic toy corpora for desk-scale runs, demos, and tests.

Every generator is a pure function of its seed, so fixtures and the CLI
smoke pipeline reproduce byte-identically anywhere.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SUBJECTS = ["plate", "sky", "grass", "cat", "dog", "train", "man", "woman"]
COLORS = ["white", "blue", "green", "black", "red", "brown"]
RELATIONS = ["on", "under", "near", "behind"]
PLACES = ["table", "desk", "track", "field", "chair", "wall", "floor", "road"]
CONCEPTS = ["train station", "bus stop", "kitchen", "park", "beach", "street"]


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def toy_annotations(n_images: int = 30, seed: int = 2024) -> list[dict]:
    """Per-image annotation records with QA pairs engineered to overlap
    lexically with the image's candidate facts at graded strengths, so
    relevance thresholds between 0.1 and 0.5 actually discriminate."""
    rng = _rng(seed)
    records = []
    for i in range(n_images):
        subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        relation = RELATIONS[int(rng.integers(len(RELATIONS)))]
        place = PLACES[int(rng.integers(len(PLACES)))]
        concept = CONCEPTS[int(rng.integers(len(CONCEPTS)))]
        records.append({
            "image_id": f"toy-{i:03d}",
            "qa": [
                {"question": f"what color is the {subject}", "answer": color},
                {"question": f"where is the {subject}", "answer": place},
                {"question": "what place is shown here", "answer": concept},
                {"question": f"is the {place} empty today", "answer": "yes"},
                {"question": f"could someone possibly walk across this whole {place} "
                             "area quickly without trouble", "answer": "no"},
                {"question": "does anything look unusual in this scene", "answer": "no"},
            ],
            "concepts": [concept],
            "attributes": [[subject, color]],
            "relationships": [[subject, relation, place]],
        })
    return records


def write_toy_annotations(path: str | Path, n_images: int = 30, seed: int = 2024):
    records = toy_annotations(n_images, seed)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, separators=(",", ":"), ensure_ascii=True) + "\n")


def detector_fixture(n: int = 50, seed: int = 7) -> list[dict]:
    """Aligned examples over small element pools (8 subjects, 4 relations,
    8 objects), one synthetic image per example."""
    rng = _rng(seed)
    examples = []
    for i in range(n):
        subject = SUBJECTS[int(rng.integers(8))]
        relation = RELATIONS[int(rng.integers(4))]
        obj = PLACES[int(rng.integers(8))]
        examples.append({
            "id": f"det-{i:03d}#q0",
            "image_id": f"det-{i:03d}",
            "question": f"what is the {subject} {relation}",
            "answer": obj,
            "fact": {"s": subject, "r": relation, "o": obj},
            "score": 1.0,
            "split": "train",
        })
    return examples


def vqa_fixture(n: int = 32, seed: int = 13, n_answers: int = 10) -> list[dict]:
    """VQA-style examples whose answer is a deterministic function of the
    question words, so a small model can reach perfect training accuracy."""
    rng = _rng(seed)
    examples = []
    for i in range(n):
        subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        color = COLORS[(i + int(rng.integers(2))) % len(COLORS)]
        question = f"what color is the {subject} number {i}"
        answers = [color] * n_answers if n_answers > 1 else [color]
        examples.append({
            "question_id": f"vq-{i:04d}",
            "image_id": f"vqa-img-{i:02d}",
            "question": question,
            "answers": answers,
            "question_type": "other" if i % 3 else "color",
        })
    return examples


def write_jsonl(records: list[dict], path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, separators=(",", ":"), ensure_ascii=True) + "\n")


def _question_type(question: str) -> str:
    if question.startswith("what color"):
        return "color"
    if question.startswith("where"):
        return "location"
    return "other"


def toy_vqa_examples(n_images: int = 30, seed: int = 2024,
                     train_fraction: float = 0.8,
                     n_annotators: int = 10) -> tuple[list[dict], list[dict]]:
    """VQA-style train/eval records over the same images and QA pairs as
    :func:`toy_annotations`, with every annotator agreeing."""
    records = toy_annotations(n_images, seed)
    cut = int(train_fraction * n_images)
    train, evaluation = [], []
    for i, record in enumerate(records):
        bucket = train if i < cut else evaluation
        for j, pair in enumerate(record["qa"]):
            bucket.append({
                "question_id": f"{record['image_id']}#q{j}",
                "image_id": record["image_id"],
                "question": pair["question"],
                "answers": [pair["answer"]] * n_annotators,
                "question_type": _question_type(pair["question"]),
            })
    return train, evaluation


def write_toy_workspace_inputs(directory: str | Path, n_images: int = 30,
                               seed: int = 2024):
    """Annotations plus VQA train/eval JSONL files, ready for the CLI."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_toy_annotations(directory / "annotations.jsonl", n_images, seed)
    train, evaluation = toy_vqa_examples(n_images, seed)
    write_jsonl(train, directory / "vqa_train.jsonl")
    write_jsonl(evaluation, directory / "vqa_eval.jsonl")


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Generate the toy corpus.")
    parser.add_argument("--out", default="work", help="output directory")
    parser.add_argument("--n-images", type=int, default=30)
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args()
    write_toy_workspace_inputs(args.out, args.n_images, args.seed)
    print(f"wrote annotations.jsonl, vqa_train.jsonl, vqa_eval.jsonl to {args.out}/")
