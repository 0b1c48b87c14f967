"""Construction of fact-aligned VQA datasets.

From per-image semantic annotations (concepts, attributes, relationships)
and question-answer pairs, this module templates candidate fact triples,
scores each candidate against its QA pair, keeps the best match above a
threshold, splits 60/20/20, canonicalizes aliased surface forms, and
builds frequency-ranked element vocabularies for the detector.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError
from .encoders import tokenize

log = logging.getLogger(__name__)

KIND_CONCEPT = "concept"
KIND_ATTRIBUTE = "attribute"
KIND_RELATION = "relation"


@dataclass(frozen=True)
class FactTriple:
    subject: str
    relation: str
    object: str
    # template kind is builder-side metadata; identity is the three elements
    kind: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.subject and self.relation and self.object):
            raise InputError(f"fact triple has an empty element: {self!r}")
        if self.kind == KIND_CONCEPT and (self.subject != "there" or self.relation != "is"):
            raise InputError(f"concept facts are (there, is, object): {self!r}")
        if self.kind == KIND_ATTRIBUTE and self.relation != "is":
            raise InputError(f"attribute facts are (subject, is, attribute): {self!r}")

    def text(self) -> str:
        return f"{self.subject} {self.relation} {self.object}"

    def to_dict(self) -> dict:
        return {"s": self.subject, "r": self.relation, "o": self.object}


@dataclass(frozen=True)
class AlignedExample:
    """One image-question-answer tuple with its supporting fact."""

    id: str
    image_id: str
    question: str
    answer: str
    fact: FactTriple
    score: float
    split: str = ""

    def to_json_line(self) -> str:
        record = {
            "id": self.id,
            "image_id": self.image_id,
            "question": self.question,
            "answer": self.answer,
            "fact": self.fact.to_dict(),
            "score": self.score,
            "split": self.split,
        }
        return json.dumps(record, separators=(",", ":"), ensure_ascii=True)

    @classmethod
    def from_record(cls, record: dict) -> "AlignedExample":
        fact = record["fact"]
        return cls(
            id=record["id"],
            image_id=record["image_id"],
            question=record["question"],
            answer=record["answer"],
            fact=FactTriple(fact["s"], fact["r"], fact["o"]),
            score=float(record["score"]),
            split=record.get("split", ""),
        )


def template_facts(record: dict) -> tuple[list[FactTriple], int]:
    """Candidate triples from one image's semantic annotations.

    Concepts become (there, is, X), attributes (subject, is, attribute),
    relationships pass through. Malformed entries are skipped; the second
    return value counts them.
    """
    facts: list[FactTriple] = []
    skipped = 0
    for concept in record.get("concepts", []):
        if isinstance(concept, str) and concept.strip():
            facts.append(FactTriple("there", "is", concept.strip(), KIND_CONCEPT))
        else:
            skipped += 1
    for entry in record.get("attributes", []):
        if (isinstance(entry, (list, tuple)) and len(entry) == 2
                and all(isinstance(x, str) and x.strip() for x in entry)):
            facts.append(FactTriple(entry[0].strip(), "is", entry[1].strip(), KIND_ATTRIBUTE))
        else:
            skipped += 1
    for entry in record.get("relationships", []):
        if (isinstance(entry, (list, tuple)) and len(entry) == 3
                and all(isinstance(x, str) and x.strip() for x in entry)):
            facts.append(FactTriple(*(x.strip() for x in entry), KIND_RELATION))
        else:
            skipped += 1
    return facts, skipped


class TfidfRelevanceScorer:
    """Cosine similarity of L2-normalized TF-IDF bags.

    Term frequency is the raw in-document count; inverse document
    frequency is the smoothed ln((1+N)/(1+df)) + 1 fitted over the corpus
    the scorer was built from. Tokens never seen in the corpus still get
    the df=0 weight, so two texts sharing a novel word are not orthogonal.
    """

    name = "tfidf"

    def __init__(self, corpus_texts: list[str]):
        self.n_docs = len(corpus_texts)
        df = Counter()
        for text in corpus_texts:
            df.update(set(tokenize(text)))
        self._df = dict(df)

    def _idf(self, token: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self._df.get(token, 0))) + 1.0

    def _vector(self, text: str) -> dict[str, float]:
        counts = Counter(tokenize(text))
        vec = {t: c * self._idf(t) for t, c in counts.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        if norm == 0.0:
            return {}
        return {t: w / norm for t, w in vec.items()}

    def score(self, qa_text: str, fact: FactTriple) -> float:
        a = self._vector(qa_text)
        b = self._vector(fact.text())
        dot = sum(w * b[t] for t, w in a.items() if t in b)
        return min(1.0, max(0.0, dot))


SCORER_REGISTRY = {"tfidf": TfidfRelevanceScorer}


def make_scorer(name: str, corpus_texts: list[str]):
    if name not in SCORER_REGISTRY:
        raise ConfigurationError(
            f"unknown relevance scorer {name!r}; available: {sorted(SCORER_REGISTRY)}"
        )
    return SCORER_REGISTRY[name](corpus_texts)


def score_relevance(qa_text: str, fact: FactTriple, scorer) -> float:
    return scorer.score(qa_text, fact)


def select_fact(candidates: list[tuple[FactTriple, float]], threshold: float) -> tuple[FactTriple, float] | None:
    """Best-scoring candidate at or above the threshold; ties keep the
    earliest candidate; None when everything is filtered out."""
    best = None
    for fact, score in candidates:
        if score < threshold:
            continue
        if best is None or score > best[1]:
            best = (fact, score)
    return best


def split_dataset(examples: list[AlignedExample], seed: int,
                  image_disjoint: bool = False) -> list[AlignedExample]:
    """Seeded shuffle, then 60/20/20 train/dev/test by position.

    Train and dev sizes are floors of the exact ratios; test takes the
    remainder. The optional image-disjoint mode assigns whole images to a
    split, so sizes then track the ratios only approximately.
    """
    if not examples:
        raise InputError("cannot split an empty dataset")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(examples)
    n_train = int(0.6 * n)
    n_dev = int(0.2 * n)
    if image_disjoint:
        images = sorted({ex.image_id for ex in examples})
        order = [images[i] for i in rng.permutation(len(images))]
        per_image = Counter(ex.image_id for ex in examples)
        assignment: dict[str, str] = {}
        seen = 0
        for image in order:
            if seen < n_train:
                assignment[image] = "train"
            elif seen < n_train + n_dev:
                assignment[image] = "dev"
            else:
                assignment[image] = "test"
            seen += per_image[image]
        return [replace(ex, split=assignment[ex.image_id]) for ex in examples]
    order = rng.permutation(n)
    tags = [""] * n
    for position, index in enumerate(order):
        if position < n_train:
            tags[index] = "train"
        elif position < n_train + n_dev:
            tags[index] = "dev"
        else:
            tags[index] = "test"
    return [replace(ex, split=tag) for ex, tag in zip(examples, tags)]


class AliasTable:
    """Per-role canonicalization maps; canonical forms are fixed points."""

    ROLES = ("subject", "relation", "object")

    def __init__(self, subject: dict | None = None, relation: dict | None = None,
                 object: dict | None = None):
        self.maps = {
            "subject": dict(subject or {}),
            "relation": dict(relation or {}),
            "object": dict(object or {}),
        }
        for role, table in self.maps.items():
            for surface, canonical in table.items():
                resolved = table.get(canonical, canonical)
                if resolved != canonical:
                    raise ConfigurationError(
                        f"{role} alias {surface!r} -> {canonical!r} is not a fixed point "
                        f"({canonical!r} maps on to {resolved!r})"
                    )

    def canonical(self, role: str, form: str) -> str:
        return self.maps[role].get(form, form)

    @classmethod
    def load(cls, paths: dict[str, str | Path]) -> "AliasTable":
        maps = {}
        for role in cls.ROLES:
            if role in paths:
                maps[role] = json.loads(Path(paths[role]).read_text(encoding="utf-8"))
        return cls(**maps)


def merge_aliases(examples: list[AlignedExample], table: AliasTable) -> list[AlignedExample]:
    merged = []
    for ex in examples:
        fact = ex.fact
        new_fact = FactTriple(
            table.canonical("subject", fact.subject),
            table.canonical("relation", fact.relation),
            table.canonical("object", fact.object),
            fact.kind,
        )
        merged.append(ex if new_fact == fact else replace(ex, fact=new_fact))
    return merged


@dataclass
class ElementVocabulary:
    """Frequency-ranked candidate lists for the three fact elements."""

    subjects: list[str]
    relations: list[str]
    objects: list[str]
    counts: dict = field(default_factory=dict)

    def index_maps(self) -> dict[str, dict[str, int]]:
        return {
            "subject": {s: i for i, s in enumerate(self.subjects)},
            "relation": {r: i for i, r in enumerate(self.relations)},
            "object": {o: i for i, o in enumerate(self.objects)},
        }

    def sizes(self) -> tuple[int, int, int]:
        return (len(self.subjects), len(self.relations), len(self.objects))

    def to_dict(self) -> dict:
        return {"subjects": self.subjects, "relations": self.relations, "objects": self.objects}

    def save(self, path: str | Path):
        Path(path).write_text(
            json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "ElementVocabulary":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["subjects"], data["relations"], data["objects"])


def _top_elements(counts: Counter, size: int, role: str) -> list[str]:
    if size > len(counts):
        log.warning("requested %d %ss but only %d unique; padding to unique count",
                    size, role, len(counts))
        size = len(counts)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [element for element, _ in ranked[:size]]


def build_vocabulary(train_examples: list[AlignedExample],
                     sizes: tuple[int, int, int] = (2000, 256, 2000)
                     ) -> tuple[ElementVocabulary, dict]:
    """Top-N elements per role by training frequency, plus the fraction of
    training examples each role's vocabulary covers."""
    if not train_examples:
        raise InputError("cannot build an element vocabulary from an empty training split")
    subject_counts = Counter(ex.fact.subject for ex in train_examples)
    relation_counts = Counter(ex.fact.relation for ex in train_examples)
    object_counts = Counter(ex.fact.object for ex in train_examples)
    vocab = ElementVocabulary(
        subjects=_top_elements(subject_counts, sizes[0], "subject"),
        relations=_top_elements(relation_counts, sizes[1], "relation"),
        objects=_top_elements(object_counts, sizes[2], "object"),
        counts={
            "subjects": dict(subject_counts),
            "relations": dict(relation_counts),
            "objects": dict(object_counts),
        },
    )
    n = len(train_examples)
    maps = vocab.index_maps()
    coverage = {
        "subject": sum(1 for ex in train_examples if ex.fact.subject in maps["subject"]) / n,
        "relation": sum(1 for ex in train_examples if ex.fact.relation in maps["relation"]) / n,
        "object": sum(1 for ex in train_examples if ex.fact.object in maps["object"]) / n,
    }
    return vocab, coverage


def dataset_stats(examples: list[AlignedExample],
                  thresholds: list[float] | None = None, top_n: int = 10) -> dict:
    """Counts per threshold, unique images/elements, and top-N tables."""
    rows = []
    for threshold in sorted(thresholds or []):
        kept = [ex for ex in examples if ex.score >= threshold]
        rows.append({
            "threshold": threshold,
            "n_examples": len(kept),
            "n_unique_images": len({ex.image_id for ex in kept}),
        })
    n = len(examples)

    def top_table(counts: Counter) -> list[dict]:
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
        return [{"value": v, "count": c, "pct": 100.0 * c / n if n else 0.0} for v, c in ranked]

    return {
        "n_examples": n,
        "n_unique_images": len({ex.image_id for ex in examples}),
        "splits": dict(Counter(ex.split for ex in examples if ex.split)),
        "unique_elements": {
            "subjects": len({ex.fact.subject for ex in examples}),
            "relations": len({ex.fact.relation for ex in examples}),
            "objects": len({ex.fact.object for ex in examples}),
        },
        "thresholds": rows,
        "top": {
            "subjects": top_table(Counter(ex.fact.subject for ex in examples)),
            "relations": top_table(Counter(ex.fact.relation for ex in examples)),
            "objects": top_table(Counter(ex.fact.object for ex in examples)),
            "facts": top_table(Counter(ex.fact.text() for ex in examples)),
        },
    }


@dataclass
class BuildReport:
    n_images: int = 0
    n_images_skipped: int = 0
    n_qa_pairs: int = 0
    n_malformed_annotations: int = 0
    n_below_threshold: int = 0
    n_examples: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_dataset(records: list[dict], threshold: float, seed: int,
                  scorer_name: str = "tfidf", aliases: AliasTable | None = None,
                  image_disjoint: bool = False) -> tuple[list[AlignedExample], BuildReport]:
    """Full pipeline: template, score, select, merge, split.

    Images lacking either QA pairs or semantic annotations are dropped.
    Output is ordered by example id, so identical inputs and seed always
    serialize to identical bytes.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold must be in [0, 1], got {threshold}")
    report = BuildReport()
    candidates_per_image: dict[str, list[FactTriple]] = {}
    qa_per_image: dict[str, list[dict]] = {}
    corpus: list[str] = []
    for record in records:
        image_id = record.get("image_id")
        qa = record.get("qa") or []
        facts, skipped = template_facts(record)
        report.n_malformed_annotations += skipped
        if not image_id or not qa or not facts:
            report.n_images_skipped += 1
            continue
        report.n_images += 1
        report.n_qa_pairs += len(qa)
        candidates_per_image[image_id] = facts
        qa_per_image[image_id] = qa
        corpus.extend(f"{pair['question']} {pair['answer']}" for pair in qa)
        corpus.extend(fact.text() for fact in facts)
    scorer = make_scorer(scorer_name, corpus)

    examples: list[AlignedExample] = []
    for image_id in sorted(candidates_per_image):
        facts = candidates_per_image[image_id]
        for j, pair in enumerate(qa_per_image[image_id]):
            qa_text = f"{pair['question']} {pair['answer']}"
            scored = [(fact, scorer.score(qa_text, fact)) for fact in facts]
            best = select_fact(scored, threshold)
            if best is None:
                report.n_below_threshold += 1
                continue
            examples.append(AlignedExample(
                id=f"{image_id}#q{j}",
                image_id=image_id,
                question=pair["question"],
                answer=pair["answer"],
                fact=best[0],
                score=best[1],
            ))
    if aliases is not None:
        examples = merge_aliases(examples, aliases)
    if examples:
        examples = split_dataset(examples, seed, image_disjoint=image_disjoint)
    examples.sort(key=lambda ex: ex.id)
    report.n_examples = len(examples)
    return examples, report


def read_annotations(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_examples(examples: list[AlignedExample], path: str | Path):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json_line() + "\n")
    tmp.replace(path)


def read_examples(path: str | Path, split: str | None = None) -> list[AlignedExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            ex = AlignedExample.from_record(json.loads(line))
            if split is None or ex.split == split:
                examples.append(ex)
    return examples
