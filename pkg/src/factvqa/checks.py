"""Built-in verification battery: gradient checks for every layer type
plus fast self-test probes. The CLI exposes these as ``grad-check`` and
``selftest`` so a deployment can prove its numerics in seconds.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from .detector import ScoredFact, top_k_facts
from .encoders import QuestionVocab, SyntheticFeatureProvider, load_features, store_features
from .metrics import vqa_accuracy
from .substrate import (
    Context,
    ParameterStore,
    RngState,
    constant,
    cross_entropy,
    dropout,
    grad_check,
    gru_step,
    init_gru,
    init_linear,
    linear,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
    softmax,
    sum_all,
    tanh,
)
from .vqa_model import (
    MsanConfig,
    MsanModel,
    init_mlb_params,
    init_msan_params,
    joint_answer,
    mlb,
    embed_facts,
    semantic_attention,
    visual_attention,
)


def _report(name, report):
    return {"name": name, "passed": report.passed,
            "max_rel_error": report.max_rel_error, "n_coords": report.n_coords,
            "tolerance": report.tolerance}


def gradient_check_suite() -> list[dict]:
    """One finite-difference check per layer type, small shapes."""
    results = []

    store = ParameterStore()
    rng = RngState(101).generator()
    init_linear(store, "lin", 5, 4, rng)
    x = constant(rng.uniform(-1, 1, 4))
    results.append(_report("linear", grad_check(
        lambda: sum_all(linear(Context(store), "lin", x, 5, 4)), store, tolerance=1e-5)))

    act_store = ParameterStore()
    act_store.add("w", rng.uniform(-1, 1, (4, 3)))
    results.append(_report("tanh", grad_check(
        lambda: sum_all(tanh(act_store.tensor("w"))), act_store, tolerance=1e-5)))
    results.append(_report("sigmoid", grad_check(
        lambda: sum_all(sigmoid(act_store.tensor("w"))), act_store, tolerance=1e-5)))

    sm_store = ParameterStore()
    init_linear(sm_store, "head", 6, 4, rng)
    x2 = constant(rng.uniform(-1, 1, 4))
    results.append(_report("softmax_cross_entropy", grad_check(
        lambda: cross_entropy(softmax(linear(Context(sm_store), "head", x2, 6, 4)), 2),
        sm_store, tolerance=1e-5)))

    gru_store = ParameterStore()
    init_gru(gru_store, "gru", 4, 5, rng)
    init_linear(gru_store, "out", 3, 5, rng)
    xs = [constant(rng.uniform(-1, 1, 4)) for _ in range(3)]

    def gru_loss():
        ctx = Context(gru_store)
        h = constant(np.zeros(5))
        for x_t in xs:
            h = gru_step(ctx, "gru", x_t, h)
        return cross_entropy(softmax(linear(ctx, "out", h, 3, 5)), 1)

    results.append(_report("gru_step", grad_check(gru_loss, gru_store, tolerance=1e-5)))

    mlb_store = ParameterStore()
    init_mlb_params(mlb_store, "m", 4, 5, 6, rng)
    mx = constant(rng.uniform(-1, 1, 4))
    my = constant(rng.uniform(-1, 1, 5))
    results.append(_report("mlb", grad_check(
        lambda: cross_entropy(softmax(mlb(Context(mlb_store), "m", mx, my)), 0),
        mlb_store, tolerance=1e-5)))

    config = MsanConfig(
        k_facts=3, element_embed_dim=4, word_embed_dim=5, hidden_dim=6,
        mlb_dim=6, answer_vocab_size=4, fact_vocab_sizes=(5, 3, 5),
        feature_channels=6, variant="full", dropout=0.0)
    att_store = ParameterStore()
    init_msan_params(att_store, config, 6, RngState(102).generator())
    fmap = SyntheticFeatureProvider((6, 2, 2)).get("gradcheck")
    q = constant(rng.uniform(-1, 1, 6))
    facts = [ScoredFact(0, 1, 2, 1.0), ScoredFact(4, 0, 3, 0.9), ScoredFact(2, 2, 0, 0.5)]

    vis_names = [n for n in att_store.names() if n.startswith(("vis_", "joint_v", "answer_head"))]

    def vis_loss():
        ctx = Context(att_store)
        _, _, f_v = visual_attention(ctx, config, q, fmap)
        return cross_entropy(joint_answer(ctx, MsanConfig(**{**config.to_dict(), "variant": "q_i_att"}), f_v, None), 0)

    results.append(_report("visual_attention", grad_check(
        vis_loss, att_store, tolerance=1e-5, names=vis_names)))

    sem_names = [n for n in att_store.names()
                 if n.startswith(("fact_embed", "sem_", "joint_s", "answer_head"))]

    def sem_loss():
        ctx = Context(att_store)
        rows = embed_facts(ctx, config, facts)
        _, f_s = semantic_attention(ctx, config, q, rows)
        return cross_entropy(joint_answer(ctx, MsanConfig(**{**config.to_dict(), "variant": "q_r"}), None, f_s), 1)

    results.append(_report("semantic_attention", grad_check(
        sem_loss, att_store, tolerance=1e-5, names=sem_names)))

    joint_names = [n for n in att_store.names() if n.startswith(("joint_", "answer_head"))]

    def joint_loss():
        ctx = Context(att_store)
        f_v = constant(rng.uniform(-1, 1, 6) * 0 + 0.3)
        f_s = constant(np.linspace(-1, 1, 12))
        return cross_entropy(joint_answer(ctx, config, f_v, f_s), 2)

    results.append(_report("joint_embedding", grad_check(
        joint_loss, att_store, tolerance=1e-5, names=joint_names)))

    qvocab = QuestionVocab(["<unk>", "what", "is", "the", "cat", "sky"])
    model = MsanModel(config, att_store, qvocab, ["a", "b", "c", "d"])
    tokens = qvocab.encode("what is the cat")

    def full_loss():
        return cross_entropy(model.forward(tokens, fmap, facts).answer_probs, 3)

    results.append(_report("full_model", grad_check(
        full_loss, att_store, tolerance=1e-4)))
    return results


def _probe(name, fn) -> dict:
    try:
        detail = fn()
        return {"name": name, "passed": True, "detail": detail}
    except AssertionError as exc:
        return {"name": name, "passed": False, "detail": str(exc)}


def selftest_suite() -> list[dict]:
    """Quick property probes over every subsystem."""
    results = [{"name": f"grad:{r['name']}", "passed": r["passed"],
                "detail": f"max_rel_error={r['max_rel_error']:.2e}"}
               for r in gradient_check_suite()]

    def softmax_simplex():
        rng = RngState(7).generator()
        for _ in range(50):
            y = softmax(constant(rng.uniform(-1e4, 1e4, int(rng.integers(1, 24))))).data
            assert np.all(y >= 0) and abs(y.sum() - 1.0) < 1e-9
        return "50 random simplex checks"

    def topk_oracle():
        rng = RngState(8).generator()
        for _ in range(30):
            sizes = tuple(int(rng.integers(1, 9)) for _ in range(3))
            probs = tuple(_dist(rng, n) for n in sizes)
            k = int(rng.integers(1, 9))
            got = top_k_facts(probs, k)
            want = _brute_force(probs, min(k, sizes[0] * sizes[1] * sizes[2]))
            assert got == want
        return "30 exhaustive comparisons"

    def roundtrips():
        with tempfile.TemporaryDirectory() as tmp:
            store = ParameterStore()
            store.add("w", RngState(9).generator().normal(size=(3, 2)))
            a, b = Path(tmp) / "a.rvqc", Path(tmp) / "b.rvqc"
            save_checkpoint(a, store, {"probe": True})
            loaded, config = load_checkpoint(a)
            save_checkpoint(b, loaded, config)
            assert a.read_bytes() == b.read_bytes()
            fmap = SyntheticFeatureProvider((4, 2, 2)).get("probe")
            fa, fb = Path(tmp) / "a.rvqf", Path(tmp) / "b.rvqf"
            store_features(fmap, fa)
            store_features(load_features(fa), fb)
            assert fa.read_bytes() == fb.read_bytes()
        return "checkpoint and feature files bitwise stable"

    def metric_exactness():
        for n in range(11):
            got = vqa_accuracy("yes", ["yes"] * n + ["no"] * (10 - n))
            assert got == min(1.0, n / 3.0)
        return "voting accuracy exact for 0..10 votes"

    def dropout_stats():
        y = dropout(constant(np.ones(100_000)), 0.5,
                    RngState(10).generator(), train=True).data
        frac = (y != 0).mean()
        assert abs(frac - 0.5) < 0.01
        assert np.all(y[y != 0] == 2.0)
        return f"survivor fraction {frac:.3f}"

    results.append(_probe("softmax_simplex", softmax_simplex))
    results.append(_probe("topk_matches_bruteforce", topk_oracle))
    results.append(_probe("serialization_roundtrips", roundtrips))
    results.append(_probe("metric_exactness", metric_exactness))
    results.append(_probe("dropout_statistics", dropout_stats))
    return results


def _dist(rng, n):
    v = rng.uniform(0, 1, n)
    return v / v.sum()


def _brute_force(probs, k):
    p_sub, p_rel, p_obj = probs
    combos = []
    for s in range(p_sub.shape[0]):
        for r in range(p_rel.shape[0]):
            for o in range(p_obj.shape[0]):
                combos.append((-float(p_sub[s] + p_rel[r] + p_obj[o]), s, r, o))
    combos.sort()
    return [ScoredFact(s, r, o, -neg) for neg, s, r, o in combos[:k]]
