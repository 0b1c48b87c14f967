"""Relation fact detector: predict (subject, relation, object) for an
image-question pair with three softmax heads over a fused embedding.

The pooled image vector and the question encoding are projected into a
common space with tanh layers, fused by element-wise addition, and read
out by one classifier head per fact element. A predicted fact's score is
the sum of its three element probabilities, so exact top-K fact lists
can be enumerated from the per-head top-K entries.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .builder import AlignedExample, ElementVocabulary
from .encoders import QuestionEncoder, QuestionVocab, TokenSequence, mean_pool
from .errors import ConfigurationError, DimensionError
from .substrate import (
    Context,
    ParameterStore,
    RmsProp,
    RngState,
    Tensor,
    add,
    constant,
    cross_entropy,
    init_linear,
    linear,
    matmul,
    mul,
    save_checkpoint,
    load_checkpoint,
    softmax,
    sum_all,
    tanh,
)

log = logging.getLogger(__name__)


@dataclass
class DetectorConfig:
    feature_channels: int = 2048
    question_embed_dim: int = 620
    question_hidden_dim: int = 2400
    common_dim: int = 1200
    vocab_sizes: tuple[int, int, int] = (2000, 256, 2000)
    loss_weights: tuple[float, float, float] = (1.0, 0.8, 1.2)
    l2_weight: float = 1e-7
    dropout: float = 0.5
    lr: float = 3e-4
    momentum: float = 0.98
    weight_decay: float = 0.01
    batch_size: int = 100

    def __post_init__(self):
        self.vocab_sizes = tuple(self.vocab_sizes)
        self.loss_weights = tuple(self.loss_weights)
        if min(self.feature_channels, self.question_embed_dim, self.question_hidden_dim,
               self.common_dim, *self.vocab_sizes) < 1:
            raise ConfigurationError("all detector dimensions must be positive")
        if min(self.loss_weights) <= 0:
            raise ConfigurationError("loss weights must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        d["loss_weights"] = list(self.loss_weights)
        return d


@dataclass
class DetectorOutput:
    p_sub: Tensor
    p_rel: Tensor
    p_obj: Tensor

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.p_sub.data, self.p_rel.data, self.p_obj.data)


@dataclass(frozen=True)
class ScoredFact:
    subject: int
    relation: int
    object: int
    score: float

    def indices(self) -> tuple[int, int, int]:
        return (self.subject, self.relation, self.object)


def init_detector_params(store: ParameterStore, config: DetectorConfig,
                         question_vocab_size: int, rng: np.random.Generator):
    encoder = QuestionEncoder("q_enc", question_vocab_size,
                              config.question_embed_dim, config.question_hidden_dim)
    encoder.init_params(store, rng)
    c = config.common_dim
    init_linear(store, "img_proj", c, config.feature_channels, rng)
    init_linear(store, "q_proj", c, config.question_hidden_dim, rng)
    bound = 1.0 / np.sqrt(c)
    store.add("fuse.w_v", rng.uniform(-bound, bound, size=(c, c)))
    store.add("fuse.w_q", rng.uniform(-bound, bound, size=(c, c)))
    store.add("fuse.b", np.zeros(c), regularizable=False)
    n_sub, n_rel, n_obj = config.vocab_sizes
    init_linear(store, "head_sub", n_sub, c, rng)
    init_linear(store, "head_rel", n_rel, c, rng)
    init_linear(store, "head_obj", n_obj, c, rng)
    return encoder


def detector_forward(ctx: Context, config: DetectorConfig,
                     v_pooled, q) -> DetectorOutput:
    """Fuse pooled image and question features, emit three distributions.

    Dropout (from ctx) is applied in front of every linear transformation
    while training.
    """
    v = v_pooled if isinstance(v_pooled, Tensor) else constant(v_pooled)
    q = q if isinstance(q, Tensor) else constant(q)
    if v.data.shape != (config.feature_channels,):
        raise DimensionError(
            f"pooled image feature has shape {v.data.shape}, expected ({config.feature_channels},)")
    if q.data.shape != (config.question_hidden_dim,):
        raise DimensionError(
            f"question feature has shape {q.data.shape}, expected ({config.question_hidden_dim},)")
    c = config.common_dim
    f_v = tanh(linear(ctx, "img_proj", v, c, config.feature_channels))
    f_q = tanh(linear(ctx, "q_proj", q, c, config.question_hidden_dim))
    fused = add(add(matmul(ctx.param("fuse.w_v"), ctx.drop(f_v)),
                    matmul(ctx.param("fuse.w_q"), ctx.drop(f_q))),
                ctx.param("fuse.b"))
    h = tanh(fused)
    n_sub, n_rel, n_obj = config.vocab_sizes
    return DetectorOutput(
        p_sub=softmax(linear(ctx, "head_sub", h, n_sub, c)),
        p_rel=softmax(linear(ctx, "head_rel", h, n_rel, c)),
        p_obj=softmax(linear(ctx, "head_obj", h, n_obj, c)),
    )


def l2_penalty(store: ParameterStore, weight: float) -> Tensor | None:
    """weight * sum of squared entries over regularizable parameters."""
    if weight == 0.0:
        return None
    total = None
    for name in store.values:
        if not store.regularizable[name] or store.frozen[name]:
            continue
        w = store.tensor(name)
        term = sum_all(mul(w, w))
        total = term if total is None else add(total, term)
    if total is None:
        return None
    return mul(constant(np.asarray(weight)), total)


def detector_loss(out: DetectorOutput, target: tuple[int, int, int],
                  store: ParameterStore, config: DetectorConfig) -> Tensor:
    """Weighted sum of the three cross entropies plus the L2 term."""
    s, r, o = target
    lam_s, lam_r, lam_o = config.loss_weights
    loss = add(add(mul(constant(np.asarray(lam_s)), cross_entropy(out.p_sub, s)),
                   mul(constant(np.asarray(lam_r)), cross_entropy(out.p_rel, r))),
               mul(constant(np.asarray(lam_o)), cross_entropy(out.p_obj, o)))
    penalty = l2_penalty(store, config.l2_weight)
    if penalty is not None:
        loss = add(loss, penalty)
    return loss


def _head_top_k(p: np.ndarray, k: int) -> list[int]:
    # stable argsort keeps the lowest index first among ties
    return list(np.argsort(-p, kind="stable")[:k])


def top_k_facts(probs: tuple[np.ndarray, np.ndarray, np.ndarray], k: int) -> list[ScoredFact]:
    """Exact top-K triples by summed probability.

    Any top-K joint sum can only use per-head top-K entries (scores are
    independent and additive), so enumerating those K^3 combinations is
    exhaustive. Ties order by ascending (subject, relation, object).
    """
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    p_sub, p_rel, p_obj = probs
    sizes = (p_sub.shape[0], p_rel.shape[0], p_obj.shape[0])
    if k > min(sizes):
        total = sizes[0] * sizes[1] * sizes[2]
        if k > total:
            log.warning("top-K of %d exceeds the %d possible triples; clamping", k, total)
        else:
            log.warning("top-K of %d saturates per-element lists for vocabulary "
                        "sizes %s", k, sizes)
    combos = []
    for s in _head_top_k(p_sub, k):
        for r in _head_top_k(p_rel, k):
            for o in _head_top_k(p_obj, k):
                score = float(p_sub[s] + p_rel[r] + p_obj[o])
                combos.append((-score, s, r, o))
    combos.sort()
    return [ScoredFact(s, r, o, -neg) for neg, s, r, o in combos[:k]]


@dataclass
class ResolvedExample:
    image_id: str
    question: str
    tokens: TokenSequence
    target: tuple[int, int, int]


def resolve_examples(examples: list[AlignedExample], element_vocab: ElementVocabulary,
                     question_vocab: QuestionVocab) -> tuple[list[ResolvedExample], int]:
    """Map fact elements and question tokens to indices; drop OOV facts."""
    maps = element_vocab.index_maps()
    resolved = []
    dropped = 0
    for ex in examples:
        s = maps["subject"].get(ex.fact.subject)
        r = maps["relation"].get(ex.fact.relation)
        o = maps["object"].get(ex.fact.object)
        if s is None or r is None or o is None:
            dropped += 1
            continue
        resolved.append(ResolvedExample(
            image_id=ex.image_id,
            question=ex.question,
            tokens=question_vocab.encode(ex.question),
            target=(s, r, o),
        ))
    if dropped:
        log.info("dropped %d examples with out-of-vocabulary fact elements", dropped)
    return resolved, dropped


def _vocab_checksum(element_vocab: ElementVocabulary) -> str:
    blob = json.dumps(element_vocab.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _question_vocab_checksum(vocab: QuestionVocab) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()


class DetectorModel:
    """Parameters, config, and vocabularies bundled for forward passes."""

    def __init__(self, config: DetectorConfig, store: ParameterStore,
                 element_vocab: ElementVocabulary, question_vocab: QuestionVocab):
        self.config = config
        self.store = store
        self.element_vocab = element_vocab
        self.question_vocab = question_vocab
        self.encoder = QuestionEncoder("q_enc", len(question_vocab),
                                       config.question_embed_dim, config.question_hidden_dim)

    @classmethod
    def create(cls, config: DetectorConfig, element_vocab: ElementVocabulary,
               question_vocab: QuestionVocab, seed: int) -> "DetectorModel":
        store = ParameterStore()
        init_detector_params(store, config, len(question_vocab),
                             RngState(seed).derive("detector-init").generator())
        return cls(config, store, element_vocab, question_vocab)

    def context(self, train: bool = False, rng=None) -> Context:
        return Context(self.store, train=train,
                       dropout_p=self.config.dropout if train else 0.0, rng=rng)

    def forward(self, v_pooled: np.ndarray, tokens: TokenSequence,
                train: bool = False, rng=None, zero_question: bool = False) -> DetectorOutput:
        ctx = self.context(train=train, rng=rng)
        if zero_question:
            q = constant(np.zeros(self.config.question_hidden_dim))
        else:
            q = self.encoder.encode(ctx, tokens)
        return detector_forward(ctx, self.config, v_pooled, q)

    def top_facts(self, v_pooled: np.ndarray, tokens: TokenSequence, k: int) -> list[ScoredFact]:
        out = self.forward(v_pooled, tokens)
        return top_k_facts(out.numpy(), k)

    def fact_strings(self, fact: ScoredFact) -> tuple[str, str, str]:
        return (self.element_vocab.subjects[fact.subject],
                self.element_vocab.relations[fact.relation],
                self.element_vocab.objects[fact.object])

    def checkpoint_config(self, seed: int, optimizer: RmsProp | None = None) -> dict:
        return {
            "kind": "detector",
            "model": self.config.to_dict(),
            "question_vocab_size": len(self.question_vocab),
            "seed": seed,
            "optimizer": optimizer.describe() if optimizer else None,
            "vocab_checksums": {
                "elements": _vocab_checksum(self.element_vocab),
                "question": _question_vocab_checksum(self.question_vocab),
            },
        }

    def save(self, path: str | Path, seed: int, optimizer: RmsProp | None = None):
        save_checkpoint(path, self.store, self.checkpoint_config(seed, optimizer))

    @classmethod
    def load(cls, path: str | Path, element_vocab: ElementVocabulary,
             question_vocab: QuestionVocab) -> "DetectorModel":
        store, config = load_checkpoint(path)
        if config.get("kind") != "detector":
            raise ConfigurationError(f"{path} is not a detector checkpoint")
        checks = config.get("vocab_checksums", {})
        if checks.get("elements") != _vocab_checksum(element_vocab):
            raise ConfigurationError("element vocabulary does not match checkpoint")
        if checks.get("question") != _question_vocab_checksum(question_vocab):
            raise ConfigurationError("question vocabulary does not match checkpoint")
        model_config = dict(config["model"])
        return cls(DetectorConfig(**model_config), store, element_vocab, question_vocab)


def _pool_features(examples: list[ResolvedExample], provider) -> dict[str, np.ndarray]:
    pooled = {}
    for ex in examples:
        if ex.image_id not in pooled:
            pooled[ex.image_id] = mean_pool(provider.get(ex.image_id))
    return pooled


def eval_detector(model: DetectorModel, examples: list[ResolvedExample], provider,
                  ks: tuple[int, ...] = (1, 5, 10), zero_question: bool = False) -> dict:
    """Per-head accuracies and recall@k of the ground-truth triple."""
    if not examples:
        raise ConfigurationError("cannot evaluate on an empty example list")
    ks = tuple(sorted(ks))
    pooled = _pool_features(examples, provider)
    head_hits = np.zeros(3)
    recall_hits = {k: 0 for k in ks}
    k_max = max(ks)
    for ex in examples:
        out = model.forward(pooled[ex.image_id], ex.tokens, zero_question=zero_question)
        p_sub, p_rel, p_obj = out.numpy()
        preds = (int(np.argmax(p_sub)), int(np.argmax(p_rel)), int(np.argmax(p_obj)))
        head_hits += np.array(preds) == np.array(ex.target)
        ranked = top_k_facts((p_sub, p_rel, p_obj), k_max)
        for rank, fact in enumerate(ranked):
            if fact.indices() == ex.target:
                for k in ks:
                    if rank < k:
                        recall_hits[k] += 1
                break
    n = len(examples)
    return {
        "subject_acc": float(head_hits[0] / n),
        "relation_acc": float(head_hits[1] / n),
        "object_acc": float(head_hits[2] / n),
        "recall": {str(k): recall_hits[k] / n for k in ks},
        "n_examples": n,
    }


def train_detector(train_examples: list[ResolvedExample], model: DetectorModel,
                   provider, seed: int, epochs: int,
                   dev_examples: list[ResolvedExample] | None = None,
                   target_accuracy: float | None = None) -> tuple[dict, list[dict]]:
    """Minibatch RMSProp training with per-epoch dev evaluation.

    Returns the best dev metrics (by recall@1) and the per-epoch log. The
    model keeps the best-epoch parameter values.
    """
    if not train_examples:
        raise ConfigurationError("training set is empty")
    config = model.config
    dev = dev_examples if dev_examples else train_examples
    pooled = _pool_features(train_examples, provider)
    state = RngState(seed)
    shuffle_rng = state.derive("detector-shuffle").generator()
    dropout_rng = state.derive("detector-dropout").generator()
    optimizer = RmsProp(lr=config.lr, momentum=config.momentum,
                        weight_decay=config.weight_decay)
    history: list[dict] = []
    best_metrics: dict | None = None
    best_values: dict[str, np.ndarray] | None = None
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_examples))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_examples[i] for i in order[start:start + config.batch_size]]
            model.store.zero_grads()
            batch_loss = 0.0
            for ex in batch:
                out = model.forward(pooled[ex.image_id], ex.tokens,
                                    train=True, rng=dropout_rng)
                loss = detector_loss(out, ex.target, model.store, config)
                loss.backward()
                batch_loss += float(loss.data)
            inv = 1.0 / len(batch)
            for name in model.store.grads:
                model.store.grads[name] *= inv
            optimizer.step(model.store)
            epoch_loss += batch_loss
        metrics = eval_detector(model, dev, provider, ks=(1,))
        entry = {
            "epoch": epoch,
            "loss": epoch_loss / len(train_examples),
            "subject_acc": metrics["subject_acc"],
            "relation_acc": metrics["relation_acc"],
            "object_acc": metrics["object_acc"],
            "recall_at_1": metrics["recall"]["1"],
        }
        history.append(entry)
        if best_metrics is None or metrics["recall"]["1"] > best_metrics["recall"]["1"]:
            best_metrics = metrics
            best_values = {n: v.copy() for n, v in model.store.values.items()}
        if target_accuracy is not None and min(
                metrics["subject_acc"], metrics["relation_acc"], metrics["object_acc"]
        ) >= target_accuracy:
            break
    if best_values is not None:
        for name, values in best_values.items():
            model.store.values[name][...] = values
    return best_metrics or {}, history
