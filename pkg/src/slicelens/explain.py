"""Natural-language explanations for individual failures and whole slices.

Per detection, a vision model answers a fixed battery of region questions
(detection region, context region, and — for partial detections with
IoU > 0.2 — the intersection region). A chat model then drives a bounded
follow-up dialogue against the context crop, and finally condenses the
whole transcript into one explanation sentence. Slice-level summaries and
keywords aggregate the member explanations, filtered to the records whose
sentence embeddings sit closest to the centroid.

All templates live in PromptConfig and can be replaced from a JSON file;
the shipped defaults are a starting point, not gospel.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .backends import ChatModel, ModelSuite, TextEncoder, VisionModel, vector_from_b64, vector_to_b64
from .detections import BBox, Dataset, Detection, DetectionKind
from .errors import ContractError, TransportError
from .regions import RegionSet, region_set
from .slices import SliceExplanation

FOLLOWUP_REGION = "CR"  # follow-up questions always interrogate the context crop


DEFAULT_QUESTIONS = {
    "q1_fp": "What the main object and its specific parts are visible in this image?",
    "q1_fn": "Describe the [obj] shown in the image and evaluate whether the entire [obj] is clearly visible.",
    "q2": "Describe this image in detail.",
    "q3": "What is the weather in this image?",
    "q4": "How is the lighting condition in this image?",
    "q5": "Is the view of the [obj] in the image obstructed? If so, what is obstructing it?",
    "q6": "There is a section of the [obj] in this image, which part of the [obj]?",
}

DEFAULT_QUESTIONER = (
    "You are investigating why a {class_name} detector produced a {kind} detection.\n"
    "Below is what is known so far from looking at the image:\n"
    "{transcript}\n"
    "Ask one short new question about the image that would help uncover the root cause "
    "of this detection error. If you have enough information, reply with the single word "
    "{stop_token}.\n"
    "Question:"
)

DEFAULT_INTERPRETER = (
    "A {class_name} detector produced a {kind} detection. The following "
    "question-answer pairs describe the image regions involved:\n"
    "{transcript}\n"
    "Summarize, in one or two sentences, the scene and the primary cause of this "
    "{kind} detection."
)

DEFAULT_SUMMARIZER = (
    "A {class_name} detector shows a group of related failures. Individual "
    "explanations of the group members, most representative first:\n"
    "{texts}\n"
    "Respond with a JSON object with keys \"scene\" (the common scenario), "
    "\"fp_cause\" (why false positives happen here) and \"fn_cause\" (why false "
    "negatives happen here)."
)

DEFAULT_KEYWORDS = (
    "A {class_name} detector shows a group of related failures. Individual "
    "explanations of the group members, most representative first:\n"
    "{texts}\n"
    "Respond with a JSON array of exactly 3 short keywords that capture the "
    "scenario and error causes of this group."
)


@dataclass(frozen=True)
class PromptConfig:
    questions: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_QUESTIONS))
    questioner_template: str = DEFAULT_QUESTIONER
    interpreter_template: str = DEFAULT_INTERPRETER
    summarizer_template: str = DEFAULT_SUMMARIZER
    keywords_template: str = DEFAULT_KEYWORDS
    stop_token: str = "STOP"
    max_iterations: int = 10
    token_budget: int = 2000
    coverage: float = 0.8

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("questioner_template", "interpreter_template",
                     "summarizer_template", "keywords_template"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        for key, text in self.questions.items():
            if not text:
                raise ValueError(f"question {key} must be nonempty")

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptConfig":
        doc = json.loads(Path(path).read_text())
        questions = dict(DEFAULT_QUESTIONS)
        questions.update(doc.get("questions", {}))
        kwargs = {k: doc[k] for k in (
            "questioner_template", "interpreter_template", "summarizer_template",
            "keywords_template", "stop_token", "max_iterations", "token_budget", "coverage",
        ) if k in doc}
        return cls(questions=questions, **kwargs)


@dataclass(frozen=True)
class QaPair:
    question: str
    answer: str
    region: str  # DR | CR | IR


@dataclass
class ExplanationRecord:
    detection_id: str
    qa_pairs: list[QaPair]
    followups: list[tuple[str, str]]
    explanation_text: str
    token_count: int
    sentence_embedding: Optional[np.ndarray] = None


def token_count(text: str) -> int:
    """Model-agnostic token estimate: one token per 4 characters, rounded up."""
    return math.ceil(len(text) / 4)


def crop_region(image: Image.Image, box: BBox) -> Image.Image:
    """Native-resolution crop for vision-model consumption."""
    x1 = max(0, math.floor(box.x))
    y1 = max(0, math.floor(box.y))
    x2 = min(image.width, math.ceil(box.x2))
    y2 = min(image.height, math.ceil(box.y2))
    return image.crop((x1, y1, max(x2, x1 + 1), max(y2, y1 + 1)))


def _fill_obj(question: str, class_name: str) -> str:
    return question.replace("[obj]", class_name)


def predefined_qa(d: Detection, regions: RegionSet, vlm: VisionModel,
                  crop: Callable[[BBox], Image.Image],
                  class_name: str, config: PromptConfig) -> list[QaPair]:
    """Fixed question battery: Q1 on DR (kind-specific), Q2-Q4 on CR, and
    Q5 (CR) plus Q6 (IR) only for partial detections with IoU > 0.2."""
    if d.kind not in (DetectionKind.FP, DetectionKind.FN):
        raise ContractError(f"explanations cover FP/FN only, got {d.kind.value}")
    q = config.questions
    plan: list[tuple[str, str, BBox]] = [
        (q["q1_fp"] if d.kind is DetectionKind.FP else q["q1_fn"], "DR", regions.dr),
        (q["q2"], "CR", regions.cr),
        (q["q3"], "CR", regions.cr),
        (q["q4"], "CR", regions.cr),
    ]
    if d.iou > 0.2:
        if regions.ir is None:
            raise ContractError(f"detection {d.id}: iou {d.iou} > 0.2 but no intersection region")
        plan.append((q["q5"], "CR", regions.cr))
        plan.append((q["q6"], "IR", regions.ir))

    out: list[QaPair] = []
    for template, tag, box in plan:
        question = _fill_obj(template, class_name)
        answer = vlm.ask(crop(box), question)
        out.append(QaPair(question=question, answer=answer, region=tag))
    return out


def _transcript(qa_pairs: Sequence[QaPair], followups: Sequence[tuple[str, str]]) -> str:
    lines = [f"[{p.region}] Q: {p.question}\nA: {p.answer}" for p in qa_pairs]
    lines += [f"[{FOLLOWUP_REGION}] Q: {q}\nA: {a}" for q, a in followups]
    return "\n".join(lines)


def questioner_loop(qa_pairs: Sequence[QaPair], cr_crop: Image.Image,
                    llm: ChatModel, vlm: VisionModel,
                    class_name: str, kind: str,
                    config: PromptConfig) -> list[tuple[str, str]]:
    """Alternate model-generated questions with vision answers about the
    context crop until the stop token appears or max_iterations is hit."""
    followups: list[tuple[str, str]] = []
    for _ in range(config.max_iterations):
        prompt = config.questioner_template.format(
            class_name=class_name,
            kind=kind,
            transcript=_transcript(qa_pairs, followups),
            stop_token=config.stop_token,
        )
        reply = llm.complete(prompt).strip()
        if reply.casefold() == config.stop_token.casefold():
            break
        answer = vlm.ask(cr_crop, reply)
        followups.append((reply, answer))
    return followups


def build_interpreter_prompt(kind: str, class_name: str, qa_pairs: Sequence[QaPair],
                             followups: Sequence[tuple[str, str]],
                             config: PromptConfig) -> str:
    return config.interpreter_template.format(
        class_name=class_name,
        kind=kind,
        transcript=_transcript(qa_pairs, followups),
    )


def interpret(kind: str, class_name: str, qa_pairs: Sequence[QaPair],
              followups: Sequence[tuple[str, str]], llm: ChatModel,
              config: PromptConfig) -> tuple[str, int]:
    text = llm.complete(build_interpreter_prompt(kind, class_name, qa_pairs, followups, config))
    return text, token_count(text)


def explain_detection(d: Detection, regions: RegionSet, image: Image.Image,
                      vlm: VisionModel, llm: ChatModel, class_name: str,
                      config: PromptConfig) -> ExplanationRecord:
    """Full per-detection flow: question battery, follow-ups, interpretation."""
    crop = lambda box: crop_region(image, box)
    qa_pairs = predefined_qa(d, regions, vlm, crop, class_name, config)
    followups = questioner_loop(
        qa_pairs, crop(regions.cr), llm, vlm, class_name, d.kind.value, config
    )
    text, tokens = interpret(d.kind.value, class_name, qa_pairs, followups, llm, config)
    return ExplanationRecord(
        detection_id=d.id,
        qa_pairs=qa_pairs,
        followups=followups,
        explanation_text=text,
        token_count=tokens,
    )


# --------------------------------------------------------------------------
# Sentence embeddings and representative selection
# --------------------------------------------------------------------------

def embed_explanations(texts: Sequence[str], encoder: TextEncoder,
                       cache: Optional[dict[str, np.ndarray]] = None) -> np.ndarray:
    """L2-normalized sentence vectors, cached by (encoder, content)."""
    rows = []
    for text in texts:
        key = f"{encoder.encoder_id}|{text}"
        vec = cache.get(key) if cache is not None else None
        if vec is None:
            vec = np.asarray(encoder.encode(text), dtype=np.float32)
            norm = float(np.linalg.norm(vec))
            if norm > 0:
                vec = vec / norm
            if cache is not None:
                cache[key] = vec
        rows.append(vec)
    return np.stack(rows) if rows else np.zeros((0, encoder.dim), dtype=np.float32)


def select_representatives(records: Sequence[ExplanationRecord],
                           token_budget: int = 2000,
                           coverage: float = 0.8) -> list[ExplanationRecord]:
    """Centroid-nearest records, greedily taken until coverage of the slice
    is reached or the next record would blow the token budget. At least one
    record is always returned."""
    if not records:
        raise ContractError("cannot summarize an empty slice")
    for r in records:
        if r.sentence_embedding is None:
            raise ContractError(f"record {r.detection_id} has no sentence embedding")
    vectors = np.stack([r.sentence_embedding for r in records]).astype(np.float64)
    centroid = vectors.mean(axis=0)
    dists = np.linalg.norm(vectors - centroid, axis=1)
    ranked = sorted(range(len(records)), key=lambda i: (dists[i], records[i].detection_id))

    target = math.ceil(coverage * len(records))
    chosen: list[ExplanationRecord] = []
    total_tokens = 0
    for i in ranked:
        if len(chosen) >= target:
            break
        record = records[i]
        if chosen and total_tokens + record.token_count > token_budget:
            break
        chosen.append(record)
        total_tokens += record.token_count
    return chosen


# --------------------------------------------------------------------------
# Slice-level summary and keywords
# --------------------------------------------------------------------------

def _texts_block(subset: Sequence[ExplanationRecord]) -> str:
    return "\n".join(f"- {r.explanation_text}" for r in subset)


def build_summarizer_prompt(subset: Sequence[ExplanationRecord], class_name: str,
                            config: PromptConfig) -> str:
    return config.summarizer_template.format(class_name=class_name, texts=_texts_block(subset))


def _parse_json_block(text: str):
    cleaned = text.strip()
    cleaned = re.sub(r"^```(?:json)?\s*|\s*```$", "", cleaned)
    return json.loads(cleaned)


def summarize_slice(subset: Sequence[ExplanationRecord], llm: ChatModel,
                    class_name: str, has_fps: bool, has_fns: bool,
                    config: PromptConfig) -> SliceExplanation:
    """Structured {scene, fp_cause, fn_cause}; cause fields are cleared when
    the slice has no members of that kind."""
    if not subset:
        raise ContractError("cannot summarize an empty selection")
    reply = llm.complete(build_summarizer_prompt(subset, class_name, config))
    try:
        doc = _parse_json_block(reply)
        scene = str(doc.get("scene", ""))
        fp_cause = str(doc.get("fp_cause", ""))
        fn_cause = str(doc.get("fn_cause", ""))
    except (json.JSONDecodeError, AttributeError):
        scene, fp_cause, fn_cause = reply.strip(), "", ""
    return SliceExplanation(
        scene=scene,
        fp_cause=fp_cause if has_fps else "",
        fn_cause=fn_cause if has_fns else "",
    )


_STOPWORDS = frozenset(
    "the a an and or of in on at to for with by this that is are was were be "
    "its it as from into near no not detector detection image images model "
    "caused causes cause likely".split()
)


def _noun_candidates(subset: Sequence[ExplanationRecord]) -> list[str]:
    """Frequent content words from the explanations, for keyword padding."""
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    position = 0
    for record in subset:
        for raw in record.explanation_text.lower().split():
            word = raw.strip(".,;:!?()[]\"'")
            if len(word) < 4 or word in _STOPWORDS or not word.isalpha():
                continue
            counts[word] = counts.get(word, 0) + 1
            first_seen.setdefault(word, position)
            position += 1
    return sorted(counts, key=lambda w: (-counts[w], first_seen[w]))


def _parse_keyword_list(text: str) -> list[str]:
    try:
        doc = _parse_json_block(text)
        if isinstance(doc, list):
            return [str(x).strip() for x in doc if str(x).strip()]
    except json.JSONDecodeError:
        pass
    parts = re.split(r"[,\n]+", text)
    out = []
    for part in parts:
        cleaned = re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", part).strip().strip("\"'")
        if cleaned:
            out.append(cleaned)
    return out


def keywords(subset: Sequence[ExplanationRecord], llm: ChatModel, class_name: str,
             config: PromptConfig) -> tuple[str, str, str]:
    """Exactly three keywords. A malformed reply triggers one re-prompt;
    persistent misbehavior is repaired by truncating or padding with
    frequent content words from the member explanations."""
    if not subset:
        raise ContractError("cannot extract keywords from an empty selection")
    prompt = config.keywords_template.format(class_name=class_name, texts=_texts_block(subset))
    words = _parse_keyword_list(llm.complete(prompt))
    if len(words) != 3:
        retry_prompt = prompt + "\nReturn exactly 3 keywords as a JSON array of strings."
        words = _parse_keyword_list(llm.complete(retry_prompt))
    if len(words) > 3:
        words = words[:3]
    if len(words) < 3:
        for candidate in _noun_candidates(subset) + ["scene", "object", "context"]:
            if len(words) == 3:
                break
            if candidate not in words:
                words.append(candidate)
    return (words[0], words[1], words[2])


# --------------------------------------------------------------------------
# Persistence (JSON-lines, one record per detection)
# --------------------------------------------------------------------------

def record_to_json(record: ExplanationRecord) -> dict:
    return {
        "detection_id": record.detection_id,
        "qa_pairs": [[p.question, p.answer, p.region] for p in record.qa_pairs],
        "followups": [[q, a] for q, a in record.followups],
        "explanation": record.explanation_text,
        "token_count": record.token_count,
        "sentence_embedding": (
            vector_to_b64(record.sentence_embedding)
            if record.sentence_embedding is not None else None
        ),
    }


def record_from_json(doc: dict) -> ExplanationRecord:
    return ExplanationRecord(
        detection_id=doc["detection_id"],
        qa_pairs=[QaPair(q, a, r) for q, a, r in doc["qa_pairs"]],
        followups=[(q, a) for q, a in doc["followups"]],
        explanation_text=doc["explanation"],
        token_count=doc["token_count"],
        sentence_embedding=(
            vector_from_b64(doc["sentence_embedding"])
            if doc.get("sentence_embedding") else None
        ),
    )


def write_explanations(records: Sequence[ExplanationRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record)) + "\n")


def read_explanations(path: str | Path) -> dict[str, ExplanationRecord]:
    records: dict[str, ExplanationRecord] = {}
    path = Path(path)
    if not path.exists():
        return records
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if doc.get("status") == "failed":
            continue
        record = record_from_json(doc)
        records[record.detection_id] = record
    return records


def explain_failures(dataset: Dataset, suite: ModelSuite, config: PromptConfig,
                     path: str | Path,
                     text_cache: Optional[dict[str, np.ndarray]] = None) -> dict[str, ExplanationRecord]:
    """Explain every FP/FN, resuming from records already on disk.

    Transport failures mark the record failed and move on; a later run
    picks the failed ones up again.
    """
    path = Path(path)
    done = read_explanations(path)
    failures = [d for d in dataset.of_kind(DetectionKind.FP, DetectionKind.FN)]
    pending = [d for d in failures if d.id not in done]

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for d in pending:
            img = Image.open(dataset.image_dir / d.image_id).convert("RGB")
            w, h = dataset.image_size(d.image_id)
            try:
                record = explain_detection(
                    d, region_set(d, w, h), img, suite.vision, suite.chat,
                    dataset.class_name, config,
                )
                record.sentence_embedding = embed_explanations(
                    [record.explanation_text], suite.text_encoder, text_cache
                )[0]
            except TransportError:
                fh.write(json.dumps({"detection_id": d.id, "status": "failed"}) + "\n")
                fh.flush()
                continue
            done[d.id] = record
            fh.write(json.dumps(record_to_json(record)) + "\n")
            fh.flush()
    # Rewrite compacted (drops failure markers and duplicates).
    write_explanations([done[d.id] for d in failures if d.id in done], path)
    return done
