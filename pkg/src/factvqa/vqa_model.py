"""Multi-step attention network for VQA.

The full model runs three stages over an image-question pair:

1. context-aware visual attention: low-rank bilinear pooling of the
   question encoding against every image region, softmax weights over
   regions, a weighted region sum gated by a question projection;
2. fact-aware semantic attention: the visual representation queries the
   embeddings of the K candidate facts proposed by a frozen detector,
   and a second softmax selects among them;
3. joint embedding: the visual and semantic representations are fused
   (element-wise addition by default) and classified over the answer
   vocabulary.

Five ablation variants reroute or sever these paths; see ``VARIANTS``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .detector import ScoredFact
from .encoders import FeatureMap, QuestionEncoder, QuestionVocab, TokenSequence
from .errors import ConfigurationError, DimensionError, InputError
from .substrate import (
    Context,
    ParameterStore,
    RmsProp,
    RngState,
    Tensor,
    add,
    concat,
    constant,
    cross_entropy,
    init_embedding,
    init_linear,
    linear,
    load_checkpoint,
    matmul,
    mul,
    reshape,
    save_checkpoint,
    softmax,
    stack_rows,
    take_row,
    tanh,
    transpose,
)

log = logging.getLogger(__name__)

VARIANTS = ("full", "q_i", "q_r", "q_i_att", "avg_fact", "mul_fusion")


@dataclass
class MsanConfig:
    k_facts: int = 10
    element_embed_dim: int = 900
    word_embed_dim: int = 620
    hidden_dim: int = 2400
    mlb_dim: int = 1200
    answer_vocab_size: int = 2000
    fact_vocab_sizes: tuple[int, int, int] = (2000, 256, 2000)
    feature_channels: int = 2048
    variant: str = "full"
    dropout: float = 0.5
    lr: float = 3e-4
    momentum: float = 0.99
    weight_decay: float = 1e-8
    batch_size: int = 200

    def __post_init__(self):
        self.fact_vocab_sizes = tuple(self.fact_vocab_sizes)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.k_facts < 1:
            raise ConfigurationError("k_facts must be >= 1")
        if min(self.element_embed_dim, self.word_embed_dim, self.hidden_dim,
               self.mlb_dim, self.answer_vocab_size, self.feature_channels,
               *self.fact_vocab_sizes) < 1:
            raise ConfigurationError("all model dimensions must be positive")

    @property
    def fact_dim(self) -> int:
        return 3 * self.element_embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fact_vocab_sizes"] = list(self.fact_vocab_sizes)
        return d


@dataclass
class AttentionRecord:
    """Normalized attention weights plus the vector they produced."""

    weights: np.ndarray
    attended: np.ndarray


@dataclass
class MsanResult:
    answer_probs: Tensor
    visual: AttentionRecord | None
    semantic: AttentionRecord | None
    facts: list[ScoredFact]


def init_mlb_params(store: ParameterStore, prefix: str, x_dim: int, y_dim: int,
                    d: int, rng: np.random.Generator):
    xb = 1.0 / np.sqrt(x_dim)
    yb = 1.0 / np.sqrt(y_dim)
    store.add(f"{prefix}.u", rng.uniform(-xb, xb, size=(d, x_dim)))
    store.add(f"{prefix}.v", rng.uniform(-yb, yb, size=(d, y_dim)))
    init_linear(store, f"{prefix}.p", d, d, rng)


def mlb(ctx: Context, prefix: str, x: Tensor, y: Tensor) -> Tensor:
    """Low-rank bilinear pooling: W_p (tanh(Ux) * tanh(Vy)) + b_p.

    ``y`` may be a single vector or a matrix of row vectors; a matrix
    broadcasts ``x`` across rows and returns one pooled row per input row.
    The row case reuses the single-vector arithmetic per row (sharing the
    tanh(Ux) node), so batched and looped invocations agree bitwise.
    """
    u = ctx.param(f"{prefix}.u")
    v = ctx.param(f"{prefix}.v")
    if x.data.shape != (u.data.shape[1],):
        raise DimensionError(
            f"mlb {prefix!r}: x has shape {x.data.shape}, expected ({u.data.shape[1]},)")
    gx = tanh(matmul(u, ctx.drop(x)))
    d = u.data.shape[0]
    w = ctx.param(f"{prefix}.p.w", (d, d))
    b = ctx.param(f"{prefix}.p.b", (d,))

    def pool_one(vec: Tensor) -> Tensor:
        if vec.data.shape != (v.data.shape[1],):
            raise DimensionError(
                f"mlb {prefix!r}: y has shape {vec.data.shape}, expected ({v.data.shape[1]},)")
        gy = tanh(matmul(v, ctx.drop(vec)))
        joint = mul(gx, gy)
        return add(matmul(w, ctx.drop(joint)), b)

    if y.data.ndim == 1:
        return pool_one(y)
    return stack_rows([pool_one(take_row(y, i)) for i in range(y.data.shape[0])])


def _attention_weights(ctx: Context, prefix: str, pooled_rows: Tensor) -> Tensor:
    """Linear map of each pooled row to a logit, softmax across rows."""
    w = ctx.param(f"{prefix}.w")
    b = ctx.param(f"{prefix}.b")
    logits = add(reshape(matmul(ctx.drop(pooled_rows), transpose(w)), (pooled_rows.data.shape[0],)), b)
    return softmax(logits)


def init_msan_params(store: ParameterStore, config: MsanConfig,
                     question_vocab_size: int, rng: np.random.Generator) -> QuestionEncoder:
    encoder = QuestionEncoder("q_enc", question_vocab_size,
                              config.word_embed_dim, config.hidden_dim)
    encoder.init_params(store, rng)
    h, c, d = config.hidden_dim, config.feature_channels, config.mlb_dim
    init_mlb_params(store, "vis_mlb", h, c, d, rng)
    bound = 1.0 / np.sqrt(d)
    store.add("vis_att.w", rng.uniform(-bound, bound, size=(1, d)))
    store.add("vis_att.b", np.zeros(1), regularizable=False)
    init_linear(store, "vis_proj", h, c, rng)
    init_linear(store, "vis_qgate", h, h, rng)
    n_sub, n_rel, n_obj = config.fact_vocab_sizes
    n = config.element_embed_dim
    init_embedding(store, "fact_embed.sub", n_sub, n, rng)
    init_embedding(store, "fact_embed.rel", n_rel, n, rng)
    init_embedding(store, "fact_embed.obj", n_obj, n, rng)
    init_mlb_params(store, "sem_mlb", h, config.fact_dim, d, rng)
    store.add("sem_att.w", rng.uniform(-bound, bound, size=(1, d)))
    store.add("sem_att.b", np.zeros(1), regularizable=False)
    init_linear(store, "joint_v", h, h, rng)
    init_linear(store, "joint_s", h, config.fact_dim, rng)
    init_linear(store, "answer_head", config.answer_vocab_size, h, rng)
    return encoder


def visual_attention(ctx: Context, config: MsanConfig, q: Tensor,
                     fmap: FeatureMap, uniform: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (weights over regions, attended region vector, f_v)."""
    regions = constant(fmap.regions())  # (H*W, C)
    n_regions = regions.data.shape[0]
    if uniform:
        weights = constant(np.full(n_regions, 1.0 / n_regions))
    else:
        pooled = mlb(ctx, "vis_mlb", q, regions)
        weights = _attention_weights(ctx, "vis_att", pooled)
    attended = matmul(transpose(regions), weights)  # (C,)
    gate = tanh(linear(ctx, "vis_qgate", q, config.hidden_dim, config.hidden_dim))
    f_v = mul(linear(ctx, "vis_proj", attended, config.hidden_dim, config.feature_channels), gate)
    return weights, attended, f_v


def embed_facts(ctx: Context, config: MsanConfig, facts: list[ScoredFact]) -> Tensor:
    """(K, 3n) matrix: per-fact concatenation of element embeddings."""
    if not facts:
        raise InputError("fact set is empty")
    n_sub, n_rel, n_obj = config.fact_vocab_sizes
    sub = ctx.param("fact_embed.sub")
    rel = ctx.param("fact_embed.rel")
    obj = ctx.param("fact_embed.obj")
    rows = []
    for fact in facts:
        if not (0 <= fact.subject < n_sub and 0 <= fact.relation < n_rel
                and 0 <= fact.object < n_obj):
            raise IndexError(f"fact indices {fact.indices()} outside vocabularies "
                             f"{config.fact_vocab_sizes}")
        rows.append(concat([take_row(sub, fact.subject),
                            take_row(rel, fact.relation),
                            take_row(obj, fact.object)]))
    return stack_rows(rows)


def semantic_attention(ctx: Context, config: MsanConfig, query: Tensor,
                       fact_rows: Tensor, uniform: bool = False) -> tuple[Tensor, Tensor]:
    """Returns (weights over facts, attended fact vector)."""
    k = fact_rows.data.shape[0]
    if k == 0:
        raise InputError("semantic attention needs at least one fact")
    if uniform:
        weights = constant(np.full(k, 1.0 / k))
    else:
        pooled = mlb(ctx, "sem_mlb", query, fact_rows)
        weights = _attention_weights(ctx, "sem_att", pooled)
    attended = matmul(transpose(fact_rows), weights)  # (3n,)
    return weights, attended


def joint_answer(ctx: Context, config: MsanConfig, f_v: Tensor | None,
                 f_s: Tensor | None) -> Tensor:
    """Fuse the available knowledge paths and classify over answers."""
    variant = config.variant
    h_dim = config.hidden_dim
    branch_v = None if f_v is None else tanh(linear(ctx, "joint_v", f_v, h_dim, h_dim))
    branch_s = None if f_s is None else tanh(linear(ctx, "joint_s", f_s, h_dim, config.fact_dim))
    if variant in ("full", "avg_fact"):
        h = add(branch_v, branch_s)
    elif variant == "mul_fusion":
        h = mul(branch_v, branch_s)
    elif variant in ("q_i", "q_i_att"):
        h = branch_v
    elif variant == "q_r":
        h = branch_s
    else:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return softmax(linear(ctx, "answer_head", h, config.answer_vocab_size, h_dim))


class MsanModel:
    """Parameters plus vocabularies for the attention network."""

    def __init__(self, config: MsanConfig, store: ParameterStore,
                 question_vocab: QuestionVocab, answers: list[str]):
        if len(answers) != config.answer_vocab_size:
            raise ConfigurationError(
                f"answer vocabulary has {len(answers)} entries, config says "
                f"{config.answer_vocab_size}")
        self.config = config
        self.store = store
        self.question_vocab = question_vocab
        self.answers = list(answers)
        self.encoder = QuestionEncoder("q_enc", len(question_vocab),
                                       config.word_embed_dim, config.hidden_dim)

    @classmethod
    def create(cls, config: MsanConfig, question_vocab: QuestionVocab,
               answers: list[str], seed: int) -> "MsanModel":
        store = ParameterStore()
        init_msan_params(store, config, len(question_vocab),
                         RngState(seed).derive("msan-init").generator())
        return cls(config, store, question_vocab, answers)

    def context(self, train: bool = False, rng=None) -> Context:
        return Context(self.store, train=train,
                       dropout_p=self.config.dropout if train else 0.0, rng=rng)

    def forward(self, tokens: TokenSequence, fmap: FeatureMap,
                facts: list[ScoredFact] | None, train: bool = False,
                rng=None) -> MsanResult:
        config = self.config
        variant = config.variant
        ctx = self.context(train=train, rng=rng)
        q = self.encoder.encode(ctx, tokens)

        weights_v = attended_v = f_v = None
        if variant != "q_r":
            weights_v, attended_v, f_v = visual_attention(
                ctx, config, q, fmap, uniform=(variant == "q_i"))

        weights_s = attended_s = f_s = None
        if variant not in ("q_i", "q_i_att"):
            if not facts:
                raise InputError(f"variant {variant!r} needs candidate facts")
            fact_rows = embed_facts(ctx, config, facts)
            query = q if variant == "q_r" else f_v
            weights_s, attended_s = semantic_attention(
                ctx, config, query, fact_rows, uniform=(variant == "avg_fact"))
            f_s = attended_s

        probs = joint_answer(ctx, config, f_v, f_s)
        return MsanResult(
            answer_probs=probs,
            visual=None if weights_v is None else AttentionRecord(
                weights_v.data.copy(), attended_v.data.copy()),
            semantic=None if weights_s is None else AttentionRecord(
                weights_s.data.copy(), attended_s.data.copy()),
            facts=list(facts) if facts else [],
        )

    def answers_checksum(self) -> str:
        return hashlib.sha256("\n".join(self.answers).encode("utf-8")).hexdigest()

    def checkpoint_config(self, seed: int, optimizer: RmsProp | None = None,
                          extra: dict | None = None) -> dict:
        config = {
            "kind": "msan",
            "model": self.config.to_dict(),
            "question_vocab_size": len(self.question_vocab),
            "seed": seed,
            "optimizer": optimizer.describe() if optimizer else None,
            "answer_vocab_checksum": self.answers_checksum(),
        }
        if extra:
            config.update(extra)
        return config

    def save(self, path: str | Path, seed: int, optimizer: RmsProp | None = None,
             extra: dict | None = None):
        save_checkpoint(path, self.store, self.checkpoint_config(seed, optimizer, extra))

    @classmethod
    def load(cls, path: str | Path, question_vocab: QuestionVocab,
             answers: list[str]) -> "MsanModel":
        store, config = load_checkpoint(path)
        if config.get("kind") != "msan":
            raise ConfigurationError(f"{path} is not an attention-model checkpoint")
        model_config = dict(config["model"])
        model = cls(MsanConfig(**model_config), store, question_vocab, answers)
        if config.get("answer_vocab_checksum") != model.answers_checksum():
            raise ConfigurationError("answer vocabulary does not match checkpoint")
        return model


@dataclass
class TrainItem:
    """One training example with its detector facts already attached."""

    tokens: TokenSequence
    image_id: str
    target: int
    facts: list[ScoredFact]


@dataclass
class TrainSettings:
    epochs: int = 50
    val_every: int = 10_000
    patience: int = 5
    target_accuracy: float | None = None


def _accuracy(model: MsanModel, items: list[TrainItem],
              fmaps: dict[str, FeatureMap]) -> float:
    hits = 0
    for item in items:
        result = model.forward(item.tokens, fmaps[item.image_id], item.facts)
        hits += int(np.argmax(result.answer_probs.data)) == item.target
    return hits / len(items)


def train_msan(items: list[TrainItem], model: MsanModel, fmaps: dict[str, FeatureMap],
               seed: int, settings: TrainSettings,
               val_items: list[TrainItem] | None = None) -> tuple[dict, list[dict]]:
    """RMSProp training with periodic validation and early stopping.

    Validation runs every ``val_every`` optimizer steps; training stops
    once ``patience`` consecutive validations fail to improve the best
    accuracy. The model keeps its best-validation parameters.
    """
    if not items:
        raise ConfigurationError("training set is empty")
    config = model.config
    val = val_items if val_items else items
    state = RngState(seed)
    shuffle_rng = state.derive("msan-shuffle").generator()
    dropout_rng = state.derive("msan-dropout").generator()
    optimizer = RmsProp(lr=config.lr, momentum=config.momentum,
                        weight_decay=config.weight_decay)
    history: list[dict] = []
    best_acc = -1.0
    best_values: dict[str, np.ndarray] | None = None
    stale = 0
    iteration = 0
    stop = False

    def validate(epoch: int):
        nonlocal best_acc, best_values, stale, stop
        acc = _accuracy(model, val, fmaps)
        improved = acc > best_acc
        if improved:
            best_acc = acc
            best_values = {n: v.copy() for n, v in model.store.values.items()}
            stale = 0
        else:
            stale += 1
        history.append({"iteration": iteration, "epoch": epoch,
                        "val_accuracy": acc, "improved": improved})
        if stale >= settings.patience:
            stop = True
        if settings.target_accuracy is not None and acc >= settings.target_accuracy:
            stop = True

    for epoch in range(settings.epochs):
        order = shuffle_rng.permutation(len(items))
        for start in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[start:start + config.batch_size]]
            model.store.zero_grads()
            for item in batch:
                result = model.forward(item.tokens, fmaps[item.image_id], item.facts,
                                       train=True, rng=dropout_rng)
                loss = cross_entropy(result.answer_probs, item.target)
                loss.backward()
            inv = 1.0 / len(batch)
            for name in model.store.grads:
                model.store.grads[name] *= inv
            optimizer.step(model.store)
            iteration += 1
            if iteration % settings.val_every == 0:
                validate(epoch)
                if stop:
                    break
        if stop:
            break
    if not history or history[-1]["iteration"] != iteration:
        validate(settings.epochs - 1)
    if best_values is not None:
        for name, values in best_values.items():
            model.store.values[name][...] = values
    summary = {"best_accuracy": best_acc, "n_validations": len(history),
               "stopped_early": stop, "iterations": iteration}
    return summary, history
