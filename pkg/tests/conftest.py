"""Shared fixtures: a fully built toy workspace (dataset, detector, vqa)."""

import json
from pathlib import Path

import pytest

from factvqa.builder import read_examples
from factvqa.runner import (
    RunConfig,
    run_build_dataset,
    run_train_detector,
    run_train_vqa,
)
from factvqa.toydata import write_toy_annotations
from factvqa.vqadata import VqaExample, write_vqa_examples

TOY_CONFIG = {
    "data": {
        "annotations": "annotations.jsonl",
        "dataset": "build/dataset.jsonl",
        "element_vocab": "build/element_vocab.json",
        "question_vocab": "build/question_vocab.txt",
        "features": {"backend": "synthetic", "shape": [8, 2, 2]},
        "threshold": 0.25,
        "element_vocab_sizes": [30, 8, 30],
        "answer_vocab_size": 30,
        "detector_checkpoint": "det/detector.rvqc",
        "msan_checkpoint": "vqa/msan.rvqc",
        "answer_vocab": "vqa/answers.txt",
        "vqa_train": "vqa_train.jsonl",
        "vqa_eval": "vqa_eval.jsonl",
    },
    "detector": {
        "feature_channels": 8, "question_embed_dim": 10, "question_hidden_dim": 14,
        "common_dim": 16, "dropout": 0.0, "lr": 5e-3, "momentum": 0.9,
        "weight_decay": 0.0, "batch_size": 16, "l2_weight": 1e-7,
    },
    "msan": {
        "k_facts": 3, "element_embed_dim": 6, "word_embed_dim": 10,
        "hidden_dim": 14, "mlb_dim": 10, "variant": "full", "dropout": 0.0,
        "lr": 5e-3, "momentum": 0.9, "weight_decay": 0.0, "batch_size": 16,
    },
    "train": {
        "detector_epochs": 12, "detector_target_accuracy": 0.9,
        "msan_epochs": 25, "val_every": 4, "patience": 1000000,
        "msan_target_accuracy": 0.95,
    },
    "eval": {"task": "open_ended", "metric": "vqa_vote", "ks": [1, 5, 10],
             "split": "test", "thresholds": [0.1, 0.2, 0.3, 0.4]},
}


def question_type(question: str) -> str:
    if question.startswith("what color"):
        return "color"
    if question.startswith("where"):
        return "location"
    return "other"


def derive_vqa_examples(aligned, n_annotators=10):
    return [
        VqaExample(
            question_id=ex.id,
            image_id=ex.image_id,
            question=ex.question,
            answers=[ex.answer] * n_annotators,
            question_type=question_type(ex.question),
        )
        for ex in aligned
    ]


def build_toy_workspace(root: Path, seed: int = 5) -> Path:
    """Annotations -> dataset -> detector -> attention model, all on disk."""
    root.mkdir(parents=True, exist_ok=True)
    write_toy_annotations(root / "annotations.jsonl", n_images=30, seed=2024)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(TOY_CONFIG, indent=2), encoding="utf-8")
    config = RunConfig.load(config_path)
    run_build_dataset(config, seed, root / "build")
    aligned = read_examples(root / "build" / "dataset.jsonl")
    write_vqa_examples(derive_vqa_examples([ex for ex in aligned if ex.split == "train"]),
                       root / "vqa_train.jsonl")
    write_vqa_examples(derive_vqa_examples([ex for ex in aligned if ex.split == "test"]),
                       root / "vqa_eval.jsonl")
    run_train_detector(config, seed, root / "det")
    run_train_vqa(config, seed, root / "vqa")
    return config_path


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory) -> Path:
    """Path of a run config whose artifacts are fully built."""
    root = tmp_path_factory.mktemp("toy-workspace")
    return build_toy_workspace(root)
