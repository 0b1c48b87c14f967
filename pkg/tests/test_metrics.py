"""Answer metrics, prediction selection, answer vocabulary, VQA examples."""

import numpy as np
import pytest

from factvqa.errors import InputError
from factvqa.metrics import (
    AnswerVocabulary,
    answer_vocab,
    exact_match,
    normalize_answer,
    predict_answer,
    vqa_accuracy,
)
from factvqa.vqadata import VqaExample, read_vqa_examples, write_vqa_examples


class TestVqaAccuracy:
    def test_three_votes_full_credit(self):
        answers = ["blue"] * 3 + ["red"] * 7
        assert vqa_accuracy("blue", answers) == 1.0

    def test_two_votes_partial_credit(self):
        answers = ["blue"] * 2 + ["red"] * 8
        assert vqa_accuracy("blue", answers) == pytest.approx(2 / 3, abs=1e-9)

    def test_zero_votes(self):
        assert vqa_accuracy("green", ["red"] * 10) == 0.0

    def test_exact_lattice_for_all_vote_counts(self):
        for n in range(11):
            got = vqa_accuracy("yes", ["yes"] * n + ["no"] * (10 - n))
            assert got == min(1.0, n / 3.0)

    def test_normalization_applied(self):
        assert vqa_accuracy(" Blue ", ["blue", "BLUE", "blue "]) == 1.0


class TestExactMatch:
    def test_equal(self):
        assert exact_match("white", "white") == 1

    def test_case_and_whitespace(self):
        assert exact_match("white", "White ") == 1

    def test_no_numeral_canonicalization(self):
        assert exact_match("two", "2") == 0

    def test_internal_whitespace_collapsed(self):
        assert normalize_answer("train  station") == "train station"


class TestPredictAnswer:
    ANSWERS = ["zero", "one", "two", "three", "four", "five", "six", "seven"]

    def test_open_ended_argmax(self):
        dist = np.array([0.1, 0.5, 0.2, 0.05, 0.05, 0.04, 0.03, 0.03])
        assert predict_answer(dist, self.ANSWERS).answer == "one"

    def test_multi_choice_restriction(self):
        dist = np.array([0.3, 0.5, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0])
        pred = predict_answer(dist, self.ANSWERS, task="multi_choice",
                              choices=["zero", "two"])
        assert pred.answer == "zero"
        assert not pred.used_fallback

    def test_tie_goes_to_lowest_index(self):
        dist = np.zeros(8)
        dist[3] = dist[7] = 0.5
        assert predict_answer(dist, self.ANSWERS).index == 3
        pred = predict_answer(dist, self.ANSWERS, task="multi_choice",
                              choices=["seven", "three"])
        assert pred.index == 3

    def test_fallback_when_no_choice_in_vocabulary(self):
        dist = np.full(8, 0.125)
        pred = predict_answer(dist, self.ANSWERS, task="multi_choice",
                              choices=["eight", "nine"])
        assert pred.answer == "eight"
        assert pred.used_fallback


class TestAnswerVocab:
    def test_top_one(self):
        vocab, coverage = answer_vocab([["a"], ["a"], ["a"], ["b"]], size=1)
        assert vocab.answers == ["a"]
        assert coverage == pytest.approx(0.75)

    def test_keep_all_mode(self):
        vocab, coverage = answer_vocab([["a", "b"], ["c"]], size=None)
        assert sorted(vocab.answers) == ["a", "b", "c"]
        assert coverage == 1.0

    def test_counts_every_annotator_answer(self):
        vocab, _ = answer_vocab([["a", "b", "b"], ["b"]], size=1)
        assert vocab.answers == ["b"]

    def test_round_trip(self, tmp_path):
        vocab, _ = answer_vocab([["white"], ["blue"], ["white"]], size=2)
        vocab.save(tmp_path / "answers.txt")
        loaded = AnswerVocabulary.load(tmp_path / "answers.txt")
        assert loaded.answers == vocab.answers
        assert loaded.checksum() == vocab.checksum()


class TestVqaExample:
    def test_target_is_most_frequent(self):
        ex = VqaExample("q1", "i1", "what", ["red", "blue", "blue"])
        assert ex.target_answer() == "blue"

    def test_target_tie_lexicographic(self):
        ex = VqaExample("q1", "i1", "what", ["red", "blue"])
        assert ex.target_answer() == "blue"

    def test_empty_answers_rejected(self):
        with pytest.raises(InputError):
            VqaExample("q1", "i1", "what", [])

    def test_empty_choices_rejected(self):
        with pytest.raises(InputError):
            VqaExample("q1", "i1", "what", ["a"], choices=[])

    def test_jsonl_round_trip(self, tmp_path):
        examples = [
            VqaExample("q1", "i1", "what color", ["red"] * 10, question_type="other"),
            VqaExample("q2", "i2", "how many", ["2"], choices=["1", "2"],
                       question_type="number"),
        ]
        path = tmp_path / "vqa.jsonl"
        write_vqa_examples(examples, path)
        assert read_vqa_examples(path) == examples

    def test_single_answer_field_accepted(self):
        ex = VqaExample.from_record(
            {"question_id": 3, "image_id": "i", "question": "q", "answer": "cat"})
        assert ex.answers == ["cat"]
