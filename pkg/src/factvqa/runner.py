"""End-to-end orchestration: run configs, pipeline stages, evaluation.

A run config is a JSON file with sections {data, detector, msan, train,
eval}. Every stage writes machine-readable JSON reports that embed the
seed and a content hash of the config, and all file writes go through a
write-temp-then-rename path so partially written artifacts never appear.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .builder import (
    AliasTable,
    ElementVocabulary,
    build_dataset,
    build_vocabulary,
    dataset_stats,
    read_annotations,
    read_examples,
    write_examples,
)
from .detector import (
    DetectorConfig,
    DetectorModel,
    eval_detector,
    resolve_examples,
    train_detector,
)
from .encoders import QuestionVocab, make_feature_provider, mean_pool
from .errors import ConfigurationError
from .metrics import (
    AnswerVocabulary,
    answer_vocab,
    exact_match,
    predict_answer,
    vqa_accuracy,
)
from .substrate import canonical_json
from .vqadata import VqaExample, read_vqa_examples
from .vqa_model import MsanConfig, MsanModel, TrainItem, TrainSettings, train_msan

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    raw: dict
    root: Path

    SECTIONS = ("data", "detector", "msan", "train", "eval")

    @classmethod
    def load(cls, path: str | Path, root: str | Path | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file does not exist: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        for section in cls.SECTIONS:
            raw.setdefault(section, {})
        return cls(raw=raw, root=Path(root) if root else path.parent)

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def path(self, section: str, key: str, required: bool = True) -> Path | None:
        value = self.section(section).get(key)
        if value is None:
            if required:
                raise ConfigurationError(f"config is missing {section}.{key}")
            return None
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    def existing_path(self, section: str, key: str) -> Path:
        p = self.path(section, key)
        if not p.exists():
            raise ConfigurationError(f"{section}.{key} points at a missing path: {p}")
        return p

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.raw)).hexdigest()[:16]


def write_report(report: dict, path: str | Path):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _stamp(report: dict, config: RunConfig, seed: int) -> dict:
    report["seed"] = seed
    report["config_hash"] = config.hash()
    return report


# ---------------------------------------------------------------- stages


def run_build_dataset(config: RunConfig, seed: int, out: Path) -> dict:
    data = config.section("data")
    records = read_annotations(config.existing_path("data", "annotations"))
    aliases = None
    if data.get("aliases"):
        alias_paths = {role: (Path(p) if Path(p).is_absolute() else config.root / p)
                       for role, p in data["aliases"].items()}
        for p in alias_paths.values():
            if not p.exists():
                raise ConfigurationError(f"alias table does not exist: {p}")
        aliases = AliasTable.load(alias_paths)
    threshold = float(data.get("threshold", 0.3))
    examples, build_report = build_dataset(
        records, threshold=threshold, seed=seed,
        scorer_name=data.get("scorer", "tfidf"), aliases=aliases,
        image_disjoint=bool(data.get("image_disjoint", False)))
    out.mkdir(parents=True, exist_ok=True)
    write_examples(examples, out / "dataset.jsonl")

    train = [ex for ex in examples if ex.split == "train"]
    sizes = tuple(data.get("element_vocab_sizes", (2000, 256, 2000)))
    vocab, coverage = build_vocabulary(train, sizes=sizes) if train else (None, {})
    if vocab is not None:
        vocab.save(out / "element_vocab.json")
    qvocab = QuestionVocab.build([ex.question for ex in train],
                                 max_size=data.get("question_vocab_size"))
    qvocab.save(out / "question_vocab.txt")

    report = _stamp({
        "build": build_report.to_dict(),
        "threshold": threshold,
        "splits": dict(sorted(
            (s, sum(1 for ex in examples if ex.split == s))
            for s in ("train", "dev", "test"))),
        "element_vocab_sizes": list(vocab.sizes()) if vocab else None,
        "element_coverage": coverage,
        "question_vocab_size": len(qvocab),
        "outputs": ["dataset.jsonl", "element_vocab.json", "question_vocab.txt"],
    }, config, seed)
    write_report(report, out / "build_report.json")
    return report


def run_dataset_stats(config: RunConfig, seed: int, out: Path) -> dict:
    examples = read_examples(config.existing_path("data", "dataset"))
    thresholds = config.section("eval").get("thresholds", [0.1, 0.2, 0.3, 0.4])
    report = _stamp(dataset_stats(examples, thresholds=thresholds), config, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "dataset_stats.json")
    return report


def _load_vocabs(config: RunConfig) -> tuple[ElementVocabulary, QuestionVocab]:
    return (ElementVocabulary.load(config.existing_path("data", "element_vocab")),
            QuestionVocab.load(config.existing_path("data", "question_vocab")))


def _provider(config: RunConfig):
    spec = dict(config.section("data").get("features", {"backend": "synthetic", "shape": [64, 4, 4]}))
    if spec.get("backend") == "files":
        if "dir" not in spec:
            raise ConfigurationError("features backend 'files' needs data.features.dir")
        directory = Path(spec["dir"])
        if not directory.is_absolute():
            directory = config.root / directory
        if not directory.exists():
            raise ConfigurationError(f"feature directory does not exist: {directory}")
        spec["dir"] = str(directory)
    return make_feature_provider(spec)


def run_train_detector(config: RunConfig, seed: int, out: Path) -> dict:
    element_vocab, question_vocab = _load_vocabs(config)
    dataset_path = config.existing_path("data", "dataset")
    train = read_examples(dataset_path, split="train")
    dev = read_examples(dataset_path, split="dev")
    if not train:
        raise ConfigurationError(f"no training examples in {dataset_path}")
    overrides = dict(config.section("detector"))
    overrides["vocab_sizes"] = element_vocab.sizes()
    det_config = DetectorConfig(**overrides)
    provider = _provider(config)
    train_resolved, train_dropped = resolve_examples(train, element_vocab, question_vocab)
    dev_resolved, dev_dropped = resolve_examples(dev, element_vocab, question_vocab)
    model = DetectorModel.create(det_config, element_vocab, question_vocab, seed=seed)
    train_section = config.section("train")
    best, history = train_detector(
        train_resolved, model, provider, seed=seed,
        epochs=int(train_section.get("detector_epochs", 20)),
        dev_examples=dev_resolved or None,
        target_accuracy=train_section.get("detector_target_accuracy"))
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "detector.rvqc", seed=seed)
    report = _stamp({
        "best_dev": best,
        "epochs_run": len(history),
        "n_train": len(train_resolved),
        "n_dev": len(dev_resolved),
        "n_dropped_oov": train_dropped + dev_dropped,
        "history": history,
        "outputs": ["detector.rvqc"],
    }, config, seed)
    write_report(report, out / "detector_train_log.json")
    return report


def run_eval_detector(config: RunConfig, seed: int, out: Path) -> dict:
    element_vocab, question_vocab = _load_vocabs(config)
    model = DetectorModel.load(config.existing_path("data", "detector_checkpoint"),
                               element_vocab, question_vocab)
    split = config.section("eval").get("split", "test")
    examples = read_examples(config.existing_path("data", "dataset"), split=split)
    if not examples:
        raise ConfigurationError(f"no examples in split {split!r}")
    resolved, dropped = resolve_examples(examples, element_vocab, question_vocab)
    ks = tuple(config.section("eval").get("ks", (1, 5, 10)))
    metrics = eval_detector(model, resolved, _provider(config), ks=ks)
    metrics["n_dropped_oov"] = dropped
    report = _stamp(metrics, config, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "detector_metrics.json")
    return report


def _msan_config(config: RunConfig, element_vocab: ElementVocabulary,
                 n_answers: int) -> MsanConfig:
    overrides = dict(config.section("msan"))
    overrides["fact_vocab_sizes"] = element_vocab.sizes()
    overrides["answer_vocab_size"] = n_answers
    features = config.section("data").get("features", {})
    if "shape" in features:
        overrides.setdefault("feature_channels", features["shape"][0])
    return MsanConfig(**overrides)


def prepare_items(examples: list[VqaExample], detector: DetectorModel | None,
                  provider, answers: AnswerVocabulary, question_vocab: QuestionVocab,
                  k: int, variant: str) -> tuple[list[TrainItem], dict, int]:
    """Tokenize questions, cache feature maps, attach detector facts, and
    resolve answer targets. Examples whose target answer is outside the
    vocabulary are dropped (counted); evaluation keeps every example."""
    fmaps = {}
    pooled = {}
    items = []
    dropped = 0
    for ex in examples:
        if ex.image_id not in fmaps:
            fmaps[ex.image_id] = provider.get(ex.image_id)
            pooled[ex.image_id] = mean_pool(fmaps[ex.image_id])
        target = answers.lookup(ex.target_answer())
        if target is None:
            dropped += 1
            continue
        tokens = question_vocab.encode(ex.question)
        if variant == "q_i":
            facts = []
        else:
            det_tokens = detector.question_vocab.encode(ex.question)
            facts = detector.top_facts(pooled[ex.image_id], det_tokens, k)
        items.append(TrainItem(tokens, ex.image_id, target, facts))
    return items, fmaps, dropped


def run_train_vqa(config: RunConfig, seed: int, out: Path) -> dict:
    element_vocab, question_vocab = _load_vocabs(config)
    examples = read_vqa_examples(config.existing_path("data", "vqa_train"))
    if not examples:
        raise ConfigurationError("VQA training set is empty")
    size = config.section("data").get("answer_vocab_size", 2000)
    answers, coverage = answer_vocab([ex.answers for ex in examples], size=size)
    msan_config = _msan_config(config, element_vocab, len(answers))

    detector = None
    if msan_config.variant != "q_i":
        detector = DetectorModel.load(config.existing_path("data", "detector_checkpoint"),
                                      element_vocab, question_vocab)
    provider = _provider(config)
    items, fmaps, dropped = prepare_items(examples, detector, provider, answers,
                                          question_vocab, msan_config.k_facts,
                                          msan_config.variant)
    if not items:
        raise ConfigurationError("every training example was dropped at answer resolution")
    model = MsanModel.create(msan_config, question_vocab, answers.answers, seed=seed)
    train_section = config.section("train")
    settings = TrainSettings(
        epochs=int(train_section.get("msan_epochs", 20)),
        val_every=int(train_section.get("val_every", 10_000)),
        patience=int(train_section.get("patience", 5)),
        target_accuracy=train_section.get("msan_target_accuracy"),
    )
    summary, history = train_msan(items, model, fmaps, seed=seed, settings=settings)
    out.mkdir(parents=True, exist_ok=True)
    answers.save(out / "answers.txt")
    model.save(out / "msan.rvqc", seed=seed,
               extra={"answer_coverage": coverage})
    report = _stamp({
        "summary": summary,
        "history": history,
        "n_items": len(items),
        "n_dropped_answers": dropped,
        "answer_coverage": coverage,
        "variant": msan_config.variant,
        "outputs": ["msan.rvqc", "answers.txt"],
    }, config, seed)
    write_report(report, out / "msan_train_log.json")
    return report


@dataclass
class Pipeline:
    """Frozen models plus vocabularies, ready for prediction."""

    msan: MsanModel
    detector: DetectorModel | None
    provider: object
    answers: AnswerVocabulary

    @classmethod
    def load(cls, config: RunConfig) -> "Pipeline":
        element_vocab, question_vocab = _load_vocabs(config)
        answers = AnswerVocabulary.load(config.existing_path("data", "answer_vocab"))
        msan = MsanModel.load(config.existing_path("data", "msan_checkpoint"),
                              question_vocab, answers.answers)
        detector = None
        if msan.config.variant != "q_i":
            detector = DetectorModel.load(
                config.existing_path("data", "detector_checkpoint"),
                element_vocab, question_vocab)
        return cls(msan=msan, detector=detector, provider=_provider(config),
                   answers=answers)

    def forward(self, question: str, image_id: str):
        fmap = self.provider.get(image_id)
        tokens = self.msan.question_vocab.encode(question)
        facts = []
        if self.msan.config.variant != "q_i":
            det_tokens = self.detector.question_vocab.encode(question)
            facts = self.detector.top_facts(mean_pool(fmap), det_tokens,
                                            self.msan.config.k_facts)
        result = self.msan.forward(tokens, fmap, facts)
        return result, fmap

    def _answer_rank(self, distribution: np.ndarray, top: int = 5) -> list[dict]:
        order = np.argsort(-distribution, kind="stable")[:top]
        return [{"answer": self.answers.answers[i], "score": float(distribution[i])}
                for i in order]

    def predict(self, question: str, image_id: str, question_id: str = "",
                task: str = "open_ended", choices: list[str] | None = None) -> dict:
        result, fmap = self.forward(question, image_id)
        distribution = result.answer_probs.data
        prediction = predict_answer(distribution, self.answers.answers, task, choices)
        record = {
            "question_id": question_id,
            "answer": prediction.answer,
            "answer_rank": self._answer_rank(distribution),
            "visual_weights": (result.visual.weights.tolist()
                               if result.visual is not None else None),
            "facts": self._fact_records(result),
        }
        if prediction.used_fallback:
            record["used_fallback"] = True
        return record

    def _fact_records(self, result) -> list[dict]:
        records = []
        for i, fact in enumerate(result.facts):
            s, r, o = (self.detector.fact_strings(fact) if self.detector
                       else (str(fact.subject), str(fact.relation), str(fact.object)))
            weight = (float(result.semantic.weights[i])
                      if result.semantic is not None else None)
            records.append({"s": s, "r": r, "o": o,
                            "detector_score": fact.score,
                            "attention_weight": weight})
        return records

    def case_study(self, question: str, image_id: str, question_id: str = "",
                   top5: bool = False) -> dict:
        result, fmap = self.forward(question, image_id)
        distribution = result.answer_probs.data
        facts = self._fact_records(result)
        record = {
            "question_id": question_id,
            "image_id": image_id,
            "question": question,
            "answer": self.answers.answers[int(np.argmax(distribution))],
            "answer_rank": self._answer_rank(distribution),
            "visual_grid": (np.asarray(result.visual.weights)
                            .reshape(fmap.height, fmap.width).tolist()
                            if result.visual is not None else None),
            "facts": facts[:5] if top5 else facts,
            "n_facts_displayed": min(5, len(facts)) if top5 else len(facts),
            "n_facts_generated": len(facts),
        }
        return record


def evaluate_examples(pipeline: Pipeline, examples: list[VqaExample],
                      task: str, metric: str) -> dict:
    """Overall plus per-question-type accuracy under the chosen metric."""
    if metric not in ("vqa_vote", "exact_match"):
        raise ConfigurationError(f"unknown metric {metric!r}")
    per_type: dict[str, list[float]] = {}
    scores = []
    n_fallback = 0
    for ex in examples:
        result, _ = pipeline.forward(ex.question, ex.image_id)
        prediction = predict_answer(result.answer_probs.data, pipeline.answers.answers,
                                    task, ex.choices)
        n_fallback += prediction.used_fallback
        if metric == "vqa_vote":
            score = vqa_accuracy(prediction.answer, ex.answers)
        else:
            score = float(exact_match(prediction.answer, ex.answers[0]))
        scores.append(score)
        per_type.setdefault(ex.question_type, []).append(score)
    overall = float(np.mean(scores)) if scores else 0.0
    return {
        "all": overall,
        "per_type": {t: float(np.mean(v)) for t, v in sorted(per_type.items())},
        "n": len(examples),
        "n_fallback": n_fallback,
        "task": task,
        "metric": metric,
    }


def run_eval_vqa(config: RunConfig, seed: int, out: Path) -> dict:
    pipeline = Pipeline.load(config)
    examples = read_vqa_examples(config.existing_path("data", "vqa_eval"))
    if not examples:
        raise ConfigurationError("VQA evaluation set is empty")
    eval_section = config.section("eval")
    report = evaluate_examples(pipeline, examples,
                               task=eval_section.get("task", "open_ended"),
                               metric=eval_section.get("metric", "vqa_vote"))
    report = _stamp(report, config, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "vqa_metrics.json")
    return report
