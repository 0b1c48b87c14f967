"""Question encoding, feature providers, and the feature file format."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from factvqa.errors import ConfigurationError, FormatError, InputError
from factvqa.encoders import (
    FeatureMap,
    FileFeatureProvider,
    QuestionEncoder,
    QuestionVocab,
    SyntheticFeatureProvider,
    load_features,
    make_feature_provider,
    mean_pool,
    store_features,
    tokenize,
)
from factvqa.substrate import Context, ParameterStore, RngState

GOLDEN = json.loads((Path(__file__).parent / "golden_feature_checksums.json").read_text())


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("What's ON the Plate?") == ["what", "s", "on", "the", "plate"]

    def test_whitespace_collapse(self):
        assert tokenize("  a\t b\n") == ["a", "b"]


class TestQuestionVocab:
    def test_unk_reserved_at_zero(self):
        vocab = QuestionVocab.build(["red plate", "red sky"])
        assert vocab.tokens[0] == "<unk>"
        assert vocab.encode("red").tokens == [vocab.index["red"]]

    def test_oov_maps_to_unk(self):
        vocab = QuestionVocab.build(["red plate"])
        assert vocab.encode("blue").tokens == [0]

    def test_frequency_then_lexicographic_order(self):
        vocab = QuestionVocab.build(["b b a a c"])
        assert vocab.tokens == ["<unk>", "a", "b", "c"]

    def test_round_trip(self, tmp_path):
        vocab = QuestionVocab.build(["what color is the plate"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        assert QuestionVocab.load(path).tokens == vocab.tokens

    def test_empty_question_rejected(self):
        vocab = QuestionVocab.build(["hello"])
        with pytest.raises(InputError):
            vocab.encode("?!")


def build_encoder(seed=3, vocab_size=7, embed_dim=4, hidden_dim=5):
    store = ParameterStore()
    enc = QuestionEncoder("q", vocab_size, embed_dim, hidden_dim)
    enc.init_params(store, RngState(seed).generator())
    return enc, store


class TestQuestionEncoder:
    def test_zero_weights_give_zero_vector(self):
        store = ParameterStore()
        enc = QuestionEncoder("q", 4, 3, 5)
        enc.init_params(store, RngState(1).generator())
        for name in store.names():
            store.values[name][...] = 0.0
        seq = QuestionVocab(["<unk>", "a"]).encode("a")
        h = enc.encode(Context(store), seq)
        np.testing.assert_array_equal(h.data, np.zeros(5))

    def test_deterministic(self):
        enc, store = build_encoder()
        vocab = QuestionVocab(["<unk>", "what", "is", "this"])
        seq = vocab.encode("what is this")
        a = enc.encode(Context(store), seq).data
        b = enc.encode(Context(store), seq).data
        np.testing.assert_array_equal(a, b)

    def test_order_sensitivity(self):
        enc, store = build_encoder()
        vocab = QuestionVocab(["<unk>", "a", "b", "c", "d"])
        h1 = enc.encode(Context(store), vocab.encode("a b c d")).data
        h2 = enc.encode(Context(store), vocab.encode("d c b a")).data
        assert np.linalg.norm(h1 - h2) > 0

    def test_purity_across_calls(self):
        # Encoding one sequence must not leak state into the next call.
        enc, store = build_encoder()
        vocab = QuestionVocab(["<unk>", "a", "b"])
        before = enc.encode(Context(store), vocab.encode("a")).data.copy()
        enc.encode(Context(store), vocab.encode("b a b"))
        after = enc.encode(Context(store), vocab.encode("a")).data
        np.testing.assert_array_equal(before, after)


class TestSyntheticFeatures:
    def test_same_id_bitwise_identical(self):
        p = SyntheticFeatureProvider((8, 2, 2))
        a = p.get("img-1").data
        b = p.get("img-1").data
        assert a.tobytes() == b.tobytes()

    def test_distinct_ids_differ_everywhere(self):
        p = SyntheticFeatureProvider((64, 4, 4))
        a = p.get("img-1").data
        b = p.get("img-2").data
        assert (a != b).mean() >= 0.99

    def test_requested_shape_honored(self):
        p = SyntheticFeatureProvider((2048, 14, 14))
        assert p.get("big").data.size == 401_408

    def test_values_bounded(self):
        arr = SyntheticFeatureProvider((16, 3, 3)).get("bounds").data
        assert arr.min() >= -1.0 and arr.max() <= 1.0

    def test_golden_checksums(self):
        p = SyntheticFeatureProvider(tuple(GOLDEN["shape"]))
        for image_id, expected in GOLDEN["sha256"].items():
            digest = hashlib.sha256(p.get(image_id).data.astype("<f8").tobytes()).hexdigest()
            assert digest == expected, image_id


class TestMeanPool:
    def test_constant_map(self):
        pooled = mean_pool(FeatureMap(np.full((5, 3, 2), 3.0)))
        np.testing.assert_array_equal(pooled, np.full(5, 3.0))

    def test_single_position_identity(self):
        arr = np.arange(6, dtype=np.float64).reshape(6, 1, 1)
        np.testing.assert_array_equal(mean_pool(FeatureMap(arr)), np.arange(6))

    def test_matches_sum_oracle(self):
        arr = RngState(9).generator().uniform(-1, 1, (8, 2, 2))
        pooled = mean_pool(FeatureMap(arr))
        oracle = np.array([arr[c].sum() / 4.0 for c in range(8)])
        np.testing.assert_allclose(pooled, oracle, atol=1e-12)

    def test_commutes_with_channel_permutation(self):
        arr = RngState(10).generator().uniform(-1, 1, (6, 3, 3))
        perm = RngState(11).generator().permutation(6)
        lhs = mean_pool(FeatureMap(arr[perm]))
        rhs = mean_pool(FeatureMap(arr))[perm]
        np.testing.assert_array_equal(lhs, rhs)


class TestFeatureFiles:
    def test_round_trip_bitwise(self, tmp_path):
        fmap = SyntheticFeatureProvider((8, 2, 3)).get("rt")
        first = tmp_path / "a.rvqf"
        second = tmp_path / "b.rvqf"
        store_features(fmap, first)
        store_features(load_features(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_synthetic_values_survive_round_trip(self, tmp_path):
        fmap = SyntheticFeatureProvider((4, 2, 2)).get("exact")
        path = tmp_path / "exact.rvqf"
        store_features(fmap, path)
        np.testing.assert_array_equal(load_features(path).data, fmap.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rvqf"
        store_features(SyntheticFeatureProvider((2, 1, 1)).get("x"), path)
        data = bytearray(path.read_bytes())
        data[0] = 0
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_features(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.rvqf"
        store_features(SyntheticFeatureProvider((4, 2, 2)).get("x"), path)
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(FormatError):
            load_features(path)

    def test_header_size_mismatch(self, tmp_path):
        path = tmp_path / "mismatch.rvqf"
        store_features(SyntheticFeatureProvider((4, 2, 2)).get("x"), path)
        data = bytearray(path.read_bytes())
        data[6:10] = (9).to_bytes(4, "little")  # claim 9 channels
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="declares"):
            load_features(path)


class TestProviders:
    def test_file_provider_round_trip(self, tmp_path):
        fmap = SyntheticFeatureProvider((4, 2, 2)).get("img-9")
        store_features(fmap, tmp_path / "img-9.rvqf")
        loaded = FileFeatureProvider(tmp_path).get("img-9")
        np.testing.assert_array_equal(loaded.data, fmap.data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="img-404"):
            FileFeatureProvider(tmp_path).get("img-404")

    def test_factory(self, tmp_path):
        assert make_feature_provider({"backend": "synthetic", "shape": [4, 2, 2]}).backend == "synthetic"
        assert make_feature_provider({"backend": "files", "dir": str(tmp_path)}).backend == "files"
        with pytest.raises(ConfigurationError):
            make_feature_provider({"backend": "resnet"})
