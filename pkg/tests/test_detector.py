"""Fact detector: forward contract, loss arithmetic, top-K, training."""

import math

import numpy as np
import pytest

from factvqa.builder import AlignedExample, build_vocabulary
from factvqa.detector import (
    DetectorConfig,
    DetectorModel,
    DetectorOutput,
    ScoredFact,
    detector_forward,
    detector_loss,
    eval_detector,
    resolve_examples,
    top_k_facts,
    train_detector,
)
from factvqa.encoders import QuestionVocab, SyntheticFeatureProvider, mean_pool
from factvqa.errors import ConfigurationError, DimensionError
from factvqa.substrate import Context, ParameterStore, RngState, constant, grad_check
from factvqa.detector import init_detector_params
from factvqa.toydata import detector_fixture


def tiny_config(**overrides):
    defaults = dict(
        feature_channels=6, question_embed_dim=5, question_hidden_dim=7,
        common_dim=8, vocab_sizes=(4, 4, 4), dropout=0.0,
        lr=5e-3, momentum=0.9, weight_decay=0.0, batch_size=10,
    )
    defaults.update(overrides)
    return DetectorConfig(**defaults)


def fixture_model(n=50, seed=42, **config_overrides):
    examples = [AlignedExample.from_record(r) for r in detector_fixture(n, seed=7)]
    vocab, _ = build_vocabulary(examples, sizes=(8, 4, 8))
    qvocab = QuestionVocab.build([ex.question for ex in examples])
    config = DetectorConfig(
        feature_channels=8, question_embed_dim=12, question_hidden_dim=16,
        common_dim=24, vocab_sizes=vocab.sizes(), dropout=0.0,
        lr=5e-3, momentum=0.9, weight_decay=0.0, batch_size=10,
        **config_overrides,
    )
    provider = SyntheticFeatureProvider((8, 2, 2))
    resolved, dropped = resolve_examples(examples, vocab, qvocab)
    assert dropped == 0
    model = DetectorModel.create(config, vocab, qvocab, seed=seed)
    return model, resolved, provider


class TestForward:
    def test_zero_parameters_give_uniform_heads(self):
        config = tiny_config()
        store = ParameterStore()
        init_detector_params(store, config, question_vocab_size=3,
                             rng=RngState(1).generator())
        for name in store.names():
            store.values[name][...] = 0.0
        out = detector_forward(Context(store), config,
                               np.ones(6), np.ones(7))
        for p in out.numpy():
            np.testing.assert_allclose(p, 0.25, atol=1e-15)

    def test_deterministic_across_runs(self):
        model, resolved, provider = fixture_model()
        ex = resolved[0]
        pooled = mean_pool(provider.get(ex.image_id))
        a = model.forward(pooled, ex.tokens).numpy()
        b = model.forward(pooled, ex.tokens).numpy()
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_shape_mismatch_rejected(self):
        config = tiny_config()
        store = ParameterStore()
        init_detector_params(store, config, 3, RngState(1).generator())
        with pytest.raises(DimensionError):
            detector_forward(Context(store), config, np.ones(5), np.ones(7))

    def test_heads_sum_to_one_for_random_parameters(self):
        config = tiny_config()
        store = ParameterStore()
        init_detector_params(store, config, 3, RngState(8).generator())
        rng = RngState(9).generator()
        for _ in range(20):
            out = detector_forward(Context(store), config,
                                   rng.uniform(-2, 2, 6), rng.uniform(-2, 2, 7))
            for p in out.numpy():
                assert abs(p.sum() - 1.0) < 1e-9
                assert np.all(p >= 0)

    def test_end_to_end_gradient(self):
        config = tiny_config(l2_weight=1e-4)
        examples = [AlignedExample.from_record(r) for r in detector_fixture(4, seed=3)]
        vocab, _ = build_vocabulary(examples, sizes=(4, 4, 4))
        qvocab = QuestionVocab.build([ex.question for ex in examples])
        config = tiny_config(l2_weight=1e-4, vocab_sizes=vocab.sizes())
        model = DetectorModel.create(config, vocab, qvocab, seed=5)
        resolved, _ = resolve_examples(examples, vocab, qvocab)
        ex = resolved[0]
        pooled = mean_pool(SyntheticFeatureProvider((6, 2, 2)).get(ex.image_id))

        def f():
            out = model.forward(pooled, ex.tokens)
            return detector_loss(out, ex.target, model.store, config)

        report = grad_check(f, model.store, tolerance=1e-5)
        assert report.passed, report


class TestLoss:
    def _onehot_output(self, sizes, target):
        def onehot(n, i):
            v = np.zeros(n)
            v[i] = 1.0
            return constant(v)
        return DetectorOutput(onehot(sizes[0], target[0]),
                              onehot(sizes[1], target[1]),
                              onehot(sizes[2], target[2]))

    def test_perfect_prediction_zero_weights(self):
        config = tiny_config(l2_weight=1e-7)
        store = ParameterStore()
        store.add("w", np.zeros((3, 3)))
        out = self._onehot_output((4, 4, 4), (1, 2, 3))
        loss = detector_loss(out, (1, 2, 3), store, config)
        assert float(loss.data) == 0.0

    def test_uniform_heads_arithmetic(self):
        # lambda_s + lambda_r + lambda_o = 3.0, so uniform size-4 heads
        # cost exactly 3*ln(4).
        config = tiny_config(l2_weight=0.0)
        store = ParameterStore()
        uniform = constant(np.full(4, 0.25))
        out = DetectorOutput(uniform, uniform, uniform)
        loss = detector_loss(out, (0, 1, 2), store, config)
        assert float(loss.data) == pytest.approx(3.0 * math.log(4.0), abs=1e-9)

    def test_matches_component_sum(self):
        config = tiny_config(l2_weight=3e-3)
        store = ParameterStore()
        rng = RngState(17).generator()
        store.add("layer.w", rng.normal(size=(3, 2)))
        store.add("layer.b", rng.normal(size=3), regularizable=False)

        def random_dist(n):
            v = rng.uniform(0.05, 1.0, n)
            return v / v.sum()

        p = [random_dist(4), random_dist(4), random_dist(4)]
        out = DetectorOutput(constant(p[0]), constant(p[1]), constant(p[2]))
        target = (2, 0, 3)
        loss = float(detector_loss(out, target, store, config).data)
        lam = config.loss_weights
        expected = (lam[0] * -math.log(p[0][2]) + lam[1] * -math.log(p[1][0])
                    + lam[2] * -math.log(p[2][3])
                    + config.l2_weight * float((store.values["layer.w"] ** 2).sum()))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_lower_bound_is_l2_term(self):
        config = tiny_config(l2_weight=1e-3)
        store = ParameterStore()
        store.add("w", RngState(3).generator().normal(size=(4, 4)))
        bound = config.l2_weight * float((store.values["w"] ** 2).sum())
        rng = RngState(4).generator()
        for _ in range(10):
            v = rng.uniform(0.01, 1.0, 4)
            out = DetectorOutput(constant(v / v.sum()), constant(v / v.sum()),
                                 constant(v / v.sum()))
            loss = float(detector_loss(out, (0, 1, 2), store, config).data)
            assert loss > bound
        # equality exactly at one-hot predictions
        onehot = np.zeros(4)
        onehot[1] = 1.0
        out = DetectorOutput(constant(onehot), constant(onehot), constant(onehot))
        assert float(detector_loss(out, (1, 1, 1), store, config).data) == pytest.approx(bound, rel=1e-15)

    def test_out_of_range_target(self):
        config = tiny_config(l2_weight=0.0)
        uniform = constant(np.full(4, 0.25))
        out = DetectorOutput(uniform, uniform, uniform)
        with pytest.raises(IndexError):
            detector_loss(out, (0, 9, 0), ParameterStore(), config)


def brute_force_top_k(probs, k):
    p_sub, p_rel, p_obj = probs
    combos = []
    for s in range(p_sub.shape[0]):
        for r in range(p_rel.shape[0]):
            for o in range(p_obj.shape[0]):
                score = float(p_sub[s] + p_rel[r] + p_obj[o])
                combos.append((-score, s, r, o))
    combos.sort()
    return [ScoredFact(s, r, o, -neg) for neg, s, r, o in combos[:k]]


def random_dists(rng, sizes):
    out = []
    for n in sizes:
        v = rng.uniform(0.0, 1.0, n)
        out.append(v / v.sum())
    return tuple(out)


class TestTopK:
    def test_k1_is_per_head_argmax(self):
        rng = RngState(2).generator()
        probs = random_dists(rng, (10, 6, 10))
        [fact] = top_k_facts(probs, 1)
        assert fact.indices() == tuple(int(np.argmax(p)) for p in probs)

    def test_matches_brute_force_10_6_10(self):
        rng = RngState(22).generator()
        probs = random_dists(rng, (10, 6, 10))
        assert top_k_facts(probs, 10) == brute_force_top_k(probs, 10)

    def test_uniform_distributions_tie_break(self):
        probs = (np.full(4, 0.25), np.full(4, 0.25), np.full(4, 0.25))
        facts = top_k_facts(probs, 4)
        assert [f.indices() for f in facts] == [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)]

    def test_property_exhaustive_over_small_vocabularies(self):
        rng = RngState(100).generator()
        for trial in range(120):
            sizes = tuple(int(rng.integers(1, 13)) for _ in range(3))
            k = int(rng.integers(1, 13))
            probs = random_dists(rng, sizes)
            assert top_k_facts(probs, k) == brute_force_top_k(probs, k), (trial, sizes, k)

    def test_scores_in_range_and_sorted(self):
        rng = RngState(5).generator()
        facts = top_k_facts(random_dists(rng, (9, 5, 7)), 5)
        scores = [f.score for f in facts]
        assert all(0.0 <= s <= 3.0 for s in scores)
        assert scores == sorted(scores, reverse=True)

    def test_oversized_k_clamped_to_possible_triples(self):
        probs = random_dists(RngState(6).generator(), (3, 3, 3))
        facts = top_k_facts(probs, 50)
        assert len(facts) == 27
        assert facts == brute_force_top_k(probs, 27)

    def test_invalid_k(self):
        with pytest.raises(ConfigurationError):
            top_k_facts(random_dists(RngState(6).generator(), (3, 3, 3)), 0)


class TestTraining:
    def test_overfits_fixture(self):
        model, resolved, provider = fixture_model()
        best, history = train_detector(resolved, model, provider, seed=42,
                                       epochs=300, target_accuracy=0.95)
        metrics = eval_detector(model, resolved, provider, ks=(1,))
        assert len(history) <= 300
        assert metrics["subject_acc"] >= 0.95
        assert metrics["relation_acc"] >= 0.95
        assert metrics["object_acc"] >= 0.95

    def test_first_batch_loss_matches_independent_computation(self):
        # dropout is zero, so a fresh identically-seeded model must assign
        # the same loss that detector_loss computes by hand.
        model_a, resolved, provider = fixture_model(n=10)
        model_b, _, _ = fixture_model(n=10)
        config = model_a.config
        order = RngState(42).derive("detector-shuffle").generator().permutation(len(resolved))
        batch = [resolved[i] for i in order[:config.batch_size]]
        expected = 0.0
        for ex in batch:
            pooled = mean_pool(provider.get(ex.image_id))
            out = model_b.forward(pooled, ex.tokens)
            expected += float(detector_loss(out, ex.target, model_b.store, config).data)
        expected /= len(resolved[:config.batch_size]) and len(batch)
        _, history = train_detector(batch, model_a, provider, seed=42, epochs=1)
        assert history[0]["loss"] == pytest.approx(expected, rel=1e-12)

    def test_same_seed_identical_first_epoch(self):
        model_a, resolved, provider = fixture_model()
        model_b, _, _ = fixture_model()
        _, hist_a = train_detector(resolved, model_a, provider, seed=9, epochs=1)
        _, hist_b = train_detector(resolved, model_b, provider, seed=9, epochs=1)
        assert hist_a[0]["loss"] == hist_b[0]["loss"]

    def test_empty_dataset_rejected(self):
        model, _, provider = fixture_model(n=5)
        with pytest.raises(ConfigurationError):
            train_detector([], model, provider, seed=1, epochs=1)


class TestEval:
    def _hand_model(self):
        # Zero weights and bias = ln(p) make every head emit the same
        # distribution [0.5, 0.3, 0.2] regardless of the input.
        examples = [AlignedExample.from_record(r) for r in detector_fixture(3, seed=1)]
        vocab, _ = build_vocabulary(examples, sizes=(3, 3, 3))
        # vocabulary may have fewer than 3 uniques; force exact sizes
        vocab.subjects = (vocab.subjects + ["pad-s1", "pad-s2"])[:3]
        vocab.relations = (vocab.relations + ["pad-r1", "pad-r2"])[:3]
        vocab.objects = (vocab.objects + ["pad-o1", "pad-o2"])[:3]
        qvocab = QuestionVocab.build([ex.question for ex in examples])
        config = tiny_config(vocab_sizes=(3, 3, 3))
        model = DetectorModel.create(config, vocab, qvocab, seed=2)
        for name in model.store.names():
            model.store.values[name][...] = 0.0
        dist = np.log(np.array([0.5, 0.3, 0.2]))
        for head in ("head_sub", "head_rel", "head_obj"):
            model.store.values[f"{head}.b"][...] = dist
        return model, examples, qvocab

    def test_recall_matches_hand_enumeration(self):
        # With every head fixed at [0.5, 0.3, 0.2] the ranked triples are
        # (0,0,0); then the 1.3-tie (0,0,1),(0,1,0),(1,0,0); then the
        # 1.2-tie (0,0,2),(0,2,0),(2,0,0). Targets placed at ranks 1, 4, 7
        # give recall 1/3, 2/3, 3/3 at k = 1, 5, 10.
        model, examples, qvocab = self._hand_model()
        from factvqa.detector import ResolvedExample
        provider = SyntheticFeatureProvider((6, 2, 2))
        targets = [(0, 0, 0), (1, 0, 0), (2, 0, 0)]
        resolved = [
            ResolvedExample(image_id=f"img-{i}", question="q",
                            tokens=qvocab.encode(examples[0].question), target=t)
            for i, t in enumerate(targets)
        ]
        metrics = eval_detector(model, resolved, provider, ks=(1, 5, 10))
        assert metrics["recall"]["1"] == pytest.approx(1 / 3)
        assert metrics["recall"]["5"] == pytest.approx(2 / 3)
        assert metrics["recall"]["10"] == pytest.approx(1.0)

    def test_recall_non_decreasing_in_k(self):
        model, resolved, provider = fixture_model(n=20)
        train_detector(resolved, model, provider, seed=3, epochs=5)
        metrics = eval_detector(model, resolved, provider, ks=(1, 5, 10))
        r = metrics["recall"]
        assert r["1"] <= r["5"] <= r["10"]

    def test_zeroed_question_degrades_recall(self):
        model, resolved, provider = fixture_model()
        train_detector(resolved, model, provider, seed=42, epochs=40,
                       target_accuracy=0.95)
        full = eval_detector(model, resolved, provider, ks=(1,))
        blind = eval_detector(model, resolved, provider, ks=(1,), zero_question=True)
        assert blind["recall"]["1"] < full["recall"]["1"]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model, resolved, provider = fixture_model(n=10)
        train_detector(resolved, model, provider, seed=4, epochs=2)
        path = tmp_path / "det.rvqc"
        model.save(path, seed=4)
        loaded = DetectorModel.load(path, model.element_vocab, model.question_vocab)
        ex = resolved[0]
        pooled = mean_pool(provider.get(ex.image_id))
        for a, b in zip(model.forward(pooled, ex.tokens).numpy(),
                        loaded.forward(pooled, ex.tokens).numpy()):
            assert a.tobytes() == b.tobytes()

    def test_vocab_mismatch_rejected(self, tmp_path):
        model, _, _ = fixture_model(n=10)
        path = tmp_path / "det.rvqc"
        model.save(path, seed=4)
        other_qvocab = QuestionVocab(["<unk>", "different"])
        with pytest.raises(ConfigurationError, match="question vocabulary"):
            DetectorModel.load(path, model.element_vocab, other_qvocab)
        from factvqa.builder import ElementVocabulary
        other_elements = ElementVocabulary(["x"], ["y"], ["z"])
        with pytest.raises(ConfigurationError, match="element vocabulary"):
            DetectorModel.load(path, other_elements, model.question_vocab)
