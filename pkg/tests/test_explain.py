"""Explanation protocol: question battery, bounded dialogue, summarization."""
from __future__ import annotations

import json
import math

import numpy as np
import pytest
from PIL import Image

from slicelens.backends import HashingTextEncoder, RuleChat, RuleVision, ScriptedChat
from slicelens.detections import BBox, Detection, DetectionKind
from slicelens.errors import ContractError
from slicelens.explain import (
    ExplanationRecord,
    PromptConfig,
    build_interpreter_prompt,
    build_summarizer_prompt,
    embed_explanations,
    explain_detection,
    interpret,
    keywords,
    predefined_qa,
    questioner_loop,
    read_explanations,
    select_representatives,
    summarize_slice,
    token_count,
    write_explanations,
)
from slicelens.regions import region_set
from slicelens.slices import SliceExplanation

CONFIG = PromptConfig()
IMG = Image.new("RGB", (64, 64), (90, 120, 150))


def det(kind: str, iou: float, with_both: bool = False) -> Detection:
    pred = BBox(10, 10, 20, 20)
    gt = BBox(16, 10, 20, 20) if with_both else None
    if kind == "FN" and gt is None:
        gt = BBox(10, 10, 20, 20)
        pred = BBox(16, 10, 20, 20) if with_both else None
    return Detection(
        id=f"{kind}-{iou}", image_id="img.png", kind=DetectionKind(kind),
        predicted_box=pred, gt_box=gt, iou=iou, class_name="car",
        confidence=0.5 if kind == "FP" else None,
    )


def echo_vision(answers=None):
    log = []

    def fn(image, question):
        log.append(question)
        if answers:
            return answers[(len(log) - 1) % len(answers)]
        return f"answer to: {question}"

    vision = RuleVision(fn)
    vision.log = log
    return vision


class TestPredefinedQa:
    def test_fp_low_iou_asks_four_questions(self):
        d = det("FP", 0.1, with_both=True)
        regions = region_set(d, 64, 64)
        vlm = echo_vision()
        qa = predefined_qa(d, regions, vlm, lambda b: IMG, "car", CONFIG)
        assert len(qa) == 4
        assert [p.region for p in qa] == ["DR", "CR", "CR", "CR"]

    def test_fn_with_partial_overlap_asks_six(self):
        d = Detection(
            id="fn", image_id="img.png", kind=DetectionKind.FN,
            predicted_box=BBox(16, 10, 20, 20), gt_box=BBox(10, 10, 20, 20),
            iou=0.3, class_name="car",
        )
        regions = region_set(d, 64, 64)
        qa = predefined_qa(d, regions, echo_vision(), lambda b: IMG, "car", CONFIG)
        assert len(qa) == 6
        assert [p.region for p in qa] == ["DR", "CR", "CR", "CR", "CR", "IR"]
        assert qa[0].question.startswith("Describe the car shown")
        assert "[obj]" not in " ".join(p.question for p in qa)

    def test_scripted_answers_echoed_verbatim(self):
        d = det("FP", 0.0)
        regions = region_set(d, 64, 64)
        script = ["alpha", "beta", "gamma", "delta"]
        qa = predefined_qa(d, regions, echo_vision(script), lambda b: IMG, "car", CONFIG)
        assert [p.answer for p in qa] == script

    def test_tp_rejected(self):
        d = Detection(id="tp", image_id="i", kind=DetectionKind.TP,
                      predicted_box=BBox(0, 0, 5, 5), gt_box=BBox(0, 0, 5, 5),
                      iou=1.0, class_name="car", confidence=0.9)
        with pytest.raises(ContractError):
            predefined_qa(d, region_set(d, 64, 64), echo_vision(), lambda b: IMG, "car", CONFIG)

    def test_gating_property_random(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            iou = float(rng.uniform(0, 0.49))
            kind = "FP" if rng.integers(0, 2) else "FN"
            d = Detection(
                id="x", image_id="i", kind=DetectionKind(kind),
                predicted_box=BBox(10, 10, 20, 20),
                gt_box=BBox(10 + (1 - iou) * 10, 10, 20, 20) if iou > 0 else (
                    BBox(40, 40, 10, 10) if kind == "FN" else None),
                iou=iou, class_name="car", confidence=0.5 if kind == "FP" else None,
            )
            regions = region_set(d, 128, 128)
            qa = predefined_qa(d, regions, echo_vision(), lambda b: IMG, "car", CONFIG)
            assert (len(qa) == 6) == (iou > 0.2)
            assert (len(qa) == 4) == (iou <= 0.2)


class TestQuestionerLoop:
    def run_loop(self, chat):
        qa = [
            p for p in predefined_qa(
                det("FP", 0.0), region_set(det("FP", 0.0), 64, 64),
                echo_vision(), lambda b: IMG, "car", CONFIG)
        ]
        return questioner_loop(qa, IMG, chat, echo_vision(), "car", "FP", CONFIG)

    def test_immediate_stop(self):
        assert self.run_loop(ScriptedChat(["STOP"])) == []

    def test_never_stops_is_bounded_at_ten(self):
        followups = self.run_loop(ScriptedChat(["Why is there a glare?"], loop=True))
        assert len(followups) == 10

    def test_three_questions_then_stop(self):
        chat = ScriptedChat(["Q one?", "Q two?", "Q three?", "STOP"])
        followups = self.run_loop(chat)
        assert [q for q, _ in followups] == ["Q one?", "Q two?", "Q three?"]

    def test_stop_detection_is_trimmed_case_insensitive(self):
        assert self.run_loop(ScriptedChat(["  stop  "])) == []
        assert self.run_loop(ScriptedChat(["Stop"])) == []

    def test_malformed_output_treated_as_question(self):
        chat = ScriptedChat(["{not json", "STOP"])
        followups = self.run_loop(chat)
        assert followups[0][0] == "{not json"

    def test_adversarial_whitespace_never_exceeds_budget(self):
        chat = RuleChat(lambda prompt: "   keep going???   ")
        assert len(self.run_loop(chat)) == 10


class TestInterpret:
    def test_fixed_sentence_stored_with_token_count(self):
        text = "The detector confused a snow bank with a car."
        out, tokens = interpret("FP", "car", [], [], ScriptedChat([text]), CONFIG)
        assert out == text
        assert tokens == math.ceil(len(text) / 4)

    def test_prompt_contains_kind_marker_and_qa(self):
        d = det("FN", 0.0)
        regions = region_set(d, 64, 64)
        qa = predefined_qa(d, regions, echo_vision(["a1", "a2", "a3", "a4"]),
                           lambda b: IMG, "car", CONFIG)
        prompt = build_interpreter_prompt("FN", "car", qa, [("extra?", "yes")], CONFIG)
        assert "FN" in prompt
        assert "car" in prompt
        for p in qa:
            assert p.question in prompt and p.answer in prompt
        assert "extra?" in prompt and "yes" in prompt

    def test_token_count_rule(self):
        assert token_count("") == 0
        assert token_count("abcd") == 1
        assert token_count("abcde") == 2


def record(det_id: str, text: str, vec) -> ExplanationRecord:
    return ExplanationRecord(
        detection_id=det_id, qa_pairs=[], followups=[],
        explanation_text=text, token_count=token_count(text),
        sentence_embedding=np.asarray(vec, dtype=np.float32),
    )


class TestSelectRepresentatives:
    def test_eighty_percent_of_identical_records(self):
        records = [record(f"d{i}", "tiny", [1.0, 0.0]) for i in range(10)]
        assert len(select_representatives(records)) == 8

    def test_budget_caps_large_records(self):
        text = "x" * 2400  # 600 tokens
        records = [record(f"d{i}", text, [1.0, 0.0]) for i in range(10)]
        chosen = select_representatives(records)
        assert len(chosen) == 3  # 3*600 <= 2000 < 4*600

    def test_single_record_regardless_of_budget(self):
        big = record("d0", "x" * 100000, [0.0, 1.0])
        assert select_representatives([big]) == [big]

    def test_centroid_ordering(self):
        # centroid is (5, 0): distances are far=5, near=4, mid=1
        records = [
            record("far", "a", [10.0, 0.0]),
            record("near", "b", [1.0, 0.0]),
            record("mid", "c", [4.0, 0.0]),
        ]
        chosen = select_representatives(records, coverage=2 / 3)
        assert [r.detection_id for r in chosen] == ["mid", "near"]

    def test_disjunction_property_random(self):
        rng = np.random.default_rng(8)
        for _ in range(500):
            n = int(rng.integers(1, 40))
            records = [
                record(f"d{i}", "y" * int(rng.integers(1, 1600)), rng.normal(size=3))
                for i in range(n)
            ]
            chosen = select_representatives(records)
            tokens = sum(r.token_count for r in chosen)
            assert tokens <= 2000 or len(chosen) == math.ceil(0.8 * n)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            select_representatives([])


class TestSummarizeSlice:
    def test_canned_json_parsed_verbatim(self):
        reply = json.dumps({"scene": "airport aprons", "fp_cause": "trucks look like cars",
                            "fn_cause": "carts occlude cars"})
        out = summarize_slice([record("d", "t", [1, 0])], ScriptedChat([reply]),
                              "car", has_fps=True, has_fns=True, config=CONFIG)
        assert out == SliceExplanation("airport aprons", "trucks look like cars",
                                       "carts occlude cars")

    def test_fn_only_slice_clears_fp_cause(self):
        reply = json.dumps({"scene": "s", "fp_cause": "should vanish", "fn_cause": "kept"})
        out = summarize_slice([record("d", "t", [1, 0])], ScriptedChat([reply]),
                              "car", has_fps=False, has_fns=True, config=CONFIG)
        assert out.fp_cause == "" and out.fn_cause == "kept"

    def test_prompt_lists_texts_in_rank_order(self):
        # centroid (5, 0): rank order is mid (1), near (4), far (5)
        records = [
            record("far", "FAR-TEXT", [10.0, 0.0]),
            record("near", "NEAR-TEXT", [1.0, 0.0]),
            record("mid", "MID-TEXT", [4.0, 0.0]),
        ]
        chosen = select_representatives(records)
        prompt = build_summarizer_prompt(chosen, "car", CONFIG)
        assert prompt.index("MID-TEXT") < prompt.index("NEAR-TEXT") < prompt.index("FAR-TEXT")

    def test_malformed_reply_becomes_scene(self):
        out = summarize_slice([record("d", "t", [1, 0])], ScriptedChat(["just prose"]),
                              "car", has_fps=True, has_fns=False, config=CONFIG)
        assert out.scene == "just prose"
        assert out.fn_cause == ""


class TestKeywords:
    def recs(self):
        return [record("d", "trucks at night near the airport runway", [1.0, 0.0])]

    def test_three_keywords_stored_as_is(self):
        chat = ScriptedChat([json.dumps(["airport", "truck", "airplane"])])
        assert keywords(self.recs(), chat, "car", CONFIG) == ("airport", "truck", "airplane")

    def test_five_items_recovered_to_three(self):
        five = json.dumps(["a", "b", "c", "d", "e"])
        chat = ScriptedChat([five, five])
        assert keywords(self.recs(), chat, "car", CONFIG) == ("a", "b", "c")

    def test_too_few_padded_from_explanation_words(self):
        one = json.dumps(["only"])
        chat = ScriptedChat([one, one])
        out = keywords(self.recs(), chat, "car", CONFIG)
        assert len(out) == 3 and out[0] == "only"
        assert all(word for word in out)

    def test_reprompt_happens_once(self):
        chat = ScriptedChat([json.dumps(["a", "b"]), json.dumps(["x", "y", "z"])])
        assert keywords(self.recs(), chat, "car", CONFIG) == ("x", "y", "z")
        assert chat.calls == 2

    def test_comma_list_accepted(self):
        chat = ScriptedChat(["snow, night, glare"])
        assert keywords(self.recs(), chat, "car", CONFIG) == ("snow", "night", "glare")


class TestEmbedExplanations:
    def test_identical_texts_identical_vectors(self):
        enc = HashingTextEncoder(dim=16)
        vecs = embed_explanations(["same text", "same text"], enc)
        assert np.array_equal(vecs[0], vecs[1])

    def test_norms_are_unit(self):
        enc = HashingTextEncoder(dim=16)
        vecs = embed_explanations(["one", "two words here", "three full words now"], enc)
        assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)

    def test_cache_hit_avoids_encoder_call(self):
        enc = HashingTextEncoder(dim=16)
        cache: dict = {}
        embed_explanations(["hello world"], enc, cache)
        calls = enc.calls
        embed_explanations(["hello world"], enc, cache)
        assert enc.calls == calls


class TestFullRecordFlow:
    def test_explain_detection_and_round_trip(self, tmp_path):
        d = det("FP", 0.0)
        regions = region_set(d, 64, 64)
        chat = ScriptedChat(["What color?", "STOP",
                             "The detector mistook a mailbox for a car."])
        rec = explain_detection(d, regions, IMG, echo_vision(), chat, "car", CONFIG)
        rec.sentence_embedding = embed_explanations(
            [rec.explanation_text], HashingTextEncoder(dim=8))[0]
        assert len(rec.qa_pairs) == 4
        assert len(rec.followups) == 1
        assert rec.explanation_text.endswith("car.")

        write_explanations([rec], tmp_path / "exp.jsonl")
        loaded = read_explanations(tmp_path / "exp.jsonl")
        got = loaded[rec.detection_id]
        assert got.qa_pairs == rec.qa_pairs
        assert got.followups == rec.followups
        assert got.explanation_text == rec.explanation_text
        assert np.array_equal(got.sentence_embedding, rec.sentence_embedding)

    def test_prompt_config_overrides_from_file(self, tmp_path):
        path = tmp_path / "prompts.json"
        path.write_text(json.dumps({
            "questions": {"q3": "Is it raining?"},
            "max_iterations": 4,
        }))
        cfg = PromptConfig.from_file(path)
        assert cfg.questions["q3"] == "Is it raining?"
        assert cfg.questions["q2"] == CONFIG.questions["q2"]
        assert cfg.max_iterations == 4

    def test_invalid_prompt_config(self):
        with pytest.raises(ValueError):
            PromptConfig(max_iterations=0)
        with pytest.raises(ValueError):
            PromptConfig(questions={"q1_fp": ""})
