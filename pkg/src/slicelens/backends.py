"""Model service contracts: image/text encoders, chat and vision models, scorers.

All neural models are external endpoints behind small protocols, so the
engine itself stays deterministic and weight-free. Three interchangeable
families implement each protocol:

* Http*    — OpenAI-style HTTP endpoints (live mode), with retries.
* offline  — deterministic local stand-ins (pixel statistics, hashed text)
             good for demos and fixtures.
* Recorded*— record/replay wrappers keyed by a request digest, so live
             transcripts replay byte-for-byte in tests.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, runtime_checkable

import httpx
import numpy as np
from PIL import Image

from .errors import ConfigError, ReplayMiss, TransportError


# --------------------------------------------------------------------------
# Protocols
# --------------------------------------------------------------------------

@runtime_checkable
class ImageEncoder(Protocol):
    encoder_id: str
    dim: int
    input_size: int

    def encode(self, image: Image.Image) -> np.ndarray:
        """Vector of length `dim` for an image already resized to input_size."""
        ...


@runtime_checkable
class TextEncoder(Protocol):
    encoder_id: str
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


@runtime_checkable
class ChatModel(Protocol):
    def complete(self, prompt: str) -> str: ...


@runtime_checkable
class VisionModel(Protocol):
    def ask(self, image: Image.Image, question: str) -> str: ...


@runtime_checkable
class ImageTextScorer(Protocol):
    def score(self, image: Image.Image, text: str) -> float: ...


# --------------------------------------------------------------------------
# Serialization helpers
# --------------------------------------------------------------------------

def image_png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.convert("RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_digest(image: Image.Image) -> str:
    return hashlib.sha256(image_png_bytes(image)).hexdigest()


def vector_to_b64(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def vector_from_b64(raw: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(raw), dtype="<f4").copy()


# --------------------------------------------------------------------------
# HTTP endpoints
# --------------------------------------------------------------------------

@dataclass
class EndpointConfig:
    base_url: str
    model: str
    auth_env: Optional[str] = None
    timeout: float = 30.0
    max_retries: int = 3

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers


def _post_json(cfg: EndpointConfig, path: str, payload: dict) -> dict:
    url = cfg.base_url.rstrip("/") + path
    last: Exception | None = None
    for attempt in range(cfg.max_retries):
        try:
            resp = httpx.post(url, json=payload, headers=cfg.headers(), timeout=cfg.timeout)
            resp.raise_for_status()
            return resp.json()
        except (httpx.TransportError, httpx.HTTPStatusError) as exc:
            last = exc
            time.sleep(min(2.0, 0.2 * 2**attempt))
    raise TransportError(f"endpoint {url} unreachable after {cfg.max_retries} attempts: {last}")


class HttpChatModel:
    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg

    def complete(self, prompt: str) -> str:
        doc = _post_json(
            self.cfg,
            "/v1/chat/completions",
            {"model": self.cfg.model, "messages": [{"role": "user", "content": prompt}]},
        )
        return doc["choices"][0]["message"]["content"]


class HttpVisionModel:
    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg

    def ask(self, image: Image.Image, question: str) -> str:
        b64 = base64.b64encode(image_png_bytes(image)).decode("ascii")
        doc = _post_json(
            self.cfg,
            "/v1/chat/completions",
            {
                "model": self.cfg.model,
                "messages": [
                    {
                        "role": "user",
                        "content": [
                            {"type": "text", "text": question},
                            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}},
                        ],
                    }
                ],
            },
        )
        return doc["choices"][0]["message"]["content"]


class HttpTextEncoder:
    def __init__(self, cfg: EndpointConfig, dim: int):
        self.cfg = cfg
        self.encoder_id = cfg.model
        self.dim = dim

    def encode(self, text: str) -> np.ndarray:
        doc = _post_json(self.cfg, "/v1/embeddings", {"model": self.cfg.model, "input": [text]})
        vec = np.asarray(doc["data"][0]["embedding"], dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ConfigError(
                f"text encoder {self.encoder_id} returned dim {vec.shape}, configured {self.dim}"
            )
        return vec


class HttpImageEncoder:
    def __init__(self, cfg: EndpointConfig, dim: int, input_size: int):
        self.cfg = cfg
        self.encoder_id = cfg.model
        self.dim = dim
        self.input_size = input_size

    def encode(self, image: Image.Image) -> np.ndarray:
        b64 = base64.b64encode(image_png_bytes(image)).decode("ascii")
        doc = _post_json(
            self.cfg, "/v1/image_embeddings", {"model": self.cfg.model, "image": b64}
        )
        vec = np.asarray(doc["embedding"], dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ConfigError(
                f"image encoder {self.encoder_id} returned dim {vec.shape}, configured {self.dim}"
            )
        return vec


class HttpImageTextScorer:
    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg

    def score(self, image: Image.Image, text: str) -> float:
        b64 = base64.b64encode(image_png_bytes(image)).decode("ascii")
        doc = _post_json(
            self.cfg,
            "/v1/image_text_score",
            {"model": self.cfg.model, "image": b64, "text": text},
        )
        return float(doc["score"])


# --------------------------------------------------------------------------
# Deterministic offline backends
# --------------------------------------------------------------------------

class PixelStatImageEncoder:
    """Per-channel and per-quadrant luminance statistics of the patch.

    Not a learned embedding, but distinct visual scenes land far apart,
    which is all the slice-discovery flow needs for demos and fixtures.
    """

    def __init__(self, dim: int = 12, input_size: int = 32, encoder_id: str = "pixelstat-v1"):
        if dim < 1:
            raise ConfigError("encoder dim must be >= 1")
        self.dim = dim
        self.input_size = input_size
        self.encoder_id = encoder_id
        self.calls = 0

    def encode(self, image: Image.Image) -> np.ndarray:
        self.calls += 1
        arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
        lum = arr.mean(axis=2)
        h, w = lum.shape
        feats = [
            arr[..., 0].mean(), arr[..., 1].mean(), arr[..., 2].mean(),
            arr[..., 0].std(), arr[..., 1].std(), arr[..., 2].std(),
            lum[: h // 2, : w // 2].mean(), lum[: h // 2, w // 2:].mean(),
            lum[h // 2:, : w // 2].mean(), lum[h // 2:, w // 2:].mean(),
            lum.min(), lum.max(),
        ]
        base = np.asarray(feats, dtype=np.float32)
        reps = int(np.ceil(self.dim / base.size))
        return np.tile(base, reps)[: self.dim].astype(np.float32)


class HashingTextEncoder:
    """Signed bag-of-words hashing into a fixed dimension, L2-normalized."""

    def __init__(self, dim: int = 64, encoder_id: str = "hashtext-v1"):
        self.dim = dim
        self.encoder_id = encoder_id
        self.calls = 0

    def encode(self, text: str) -> np.ndarray:
        self.calls += 1
        vec = np.zeros(self.dim, dtype=np.float32)
        for token in text.lower().split():
            token = token.strip(".,;:!?()[]\"'")
            if not token:
                continue
            h = zlib.crc32(token.encode())
            sign = 1.0 if (h >> 16) & 1 else -1.0
            vec[h % self.dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return (vec / norm).astype(np.float32)


class ConstantImageEncoder:
    """Returns one fixed vector for any patch; handy in tests."""

    def __init__(self, vector, input_size: int = 8, encoder_id: str = "const-v1"):
        self.vector = np.asarray(vector, dtype=np.float32)
        self.dim = int(self.vector.size)
        self.input_size = input_size
        self.encoder_id = encoder_id
        self.calls = 0

    def encode(self, image: Image.Image) -> np.ndarray:
        self.calls += 1
        return self.vector.copy()


_COLOR_NAMES = (
    ("red", (200, 60, 60)), ("green", (60, 170, 70)), ("blue", (60, 90, 200)),
    ("yellow", (210, 200, 70)), ("orange", (230, 140, 50)), ("purple", (140, 70, 180)),
    ("white", (235, 235, 235)), ("gray", (128, 128, 128)), ("black", (25, 25, 25)),
    ("brown", (120, 80, 50)),
)


class OfflineVision:
    """Endpoint-free vision stand-in: answers describe the crop's dominant
    color and brightness. Crude, but image-dependent and deterministic."""

    def __init__(self):
        self.calls = 0

    @staticmethod
    def _describe(image: Image.Image) -> tuple[str, str]:
        arr = np.asarray(image.convert("RGB"), dtype=np.float32)
        mean = arr.reshape(-1, 3).mean(axis=0)
        name = min(_COLOR_NAMES, key=lambda c: sum((m - v) ** 2 for m, v in zip(mean, c[1])))[0]
        brightness = "bright" if mean.mean() > 170 else "dark" if mean.mean() < 85 else "moderately lit"
        return name, brightness

    def ask(self, image: Image.Image, question: str) -> str:
        self.calls += 1
        color, brightness = self._describe(image)
        return f"The region is mostly {color} and {brightness}."


class OfflineChat:
    """Endpoint-free chat stand-in driven by simple prompt-shape rules:
    stops questioner loops immediately, answers summary prompts from the
    frequent content words of the prompt itself."""

    def __init__(self, stop_token: str = "STOP"):
        self.stop_token = stop_token
        self.calls = 0

    @staticmethod
    def _content_words(prompt: str, limit: int) -> list[str]:
        counts: dict[str, int] = {}
        order: dict[str, int] = {}
        for i, raw in enumerate(prompt.lower().split()):
            word = raw.strip(".,;:!?()[]\"'")
            if len(word) < 4 or not word.isalpha():
                continue
            counts[word] = counts.get(word, 0) + 1
            order.setdefault(word, i)
        ranked = sorted(counts, key=lambda w: (-counts[w], order[w]))
        return ranked[:limit]

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if "reply with the single word" in prompt.lower():
            return self.stop_token
        answers = [
            line[3:].strip() for line in prompt.splitlines() if line.startswith("A: ")
        ]
        if "json array" in prompt.lower():
            words = self._content_words(" ".join(answers) or prompt, 3)
            while len(words) < 3:
                words.append("scene")
            return json.dumps(words[:3])
        if "json object" in prompt.lower():
            words = self._content_words(" ".join(answers) or prompt, 4)
            scene = "scene featuring " + ", ".join(words[:3]) if words else "unlabeled scene"
            return json.dumps({
                "scene": scene,
                "fp_cause": "background elements resemble the target object",
                "fn_cause": "the target object is partially hidden or atypical",
            })
        summary = "; ".join(answers[:2]) if answers else "no visual evidence collected"
        return f"Observed scene: {summary}."


class ScriptedChat:
    """Replays a fixed list of responses in order."""

    def __init__(self, responses: list[str], loop: bool = False):
        self.responses = list(responses)
        self.loop = loop
        self.calls = 0

    def complete(self, prompt: str) -> str:
        idx = self.calls % len(self.responses) if self.loop else min(self.calls, len(self.responses) - 1)
        self.calls += 1
        return self.responses[idx]


class RuleChat:
    """Computes the response from the prompt via a callable."""

    def __init__(self, fn: Callable[[str], str]):
        self.fn = fn
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return self.fn(prompt)


class RuleVision:
    def __init__(self, fn: Callable[[Image.Image, str], str]):
        self.fn = fn
        self.calls = 0

    def ask(self, image: Image.Image, question: str) -> str:
        self.calls += 1
        return self.fn(image, question)


class RuleScorer:
    def __init__(self, fn: Callable[[Image.Image, str], float]):
        self.fn = fn
        self.calls = 0

    def score(self, image: Image.Image, text: str) -> float:
        self.calls += 1
        return float(self.fn(image, text))


# --------------------------------------------------------------------------
# Record / replay
# --------------------------------------------------------------------------

class Tape:
    """Append-only JSONL store of model request/response pairs.

    Requests are keyed by a SHA-256 of their canonical JSON; images enter
    the key as a digest of their PNG bytes, so replay is byte-exact.
    """

    def __init__(self, path: str | Path, mode: str = "record"):
        if mode not in ("record", "replay"):
            raise ConfigError(f"tape mode must be record or replay, got {mode!r}")
        self.path = Path(path)
        self.mode = mode
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                row = json.loads(line)
                self._entries[row["key"]] = row["response"]
        elif mode == "replay":
            raise ConfigError(f"replay tape not found: {self.path}")

    @staticmethod
    def request_key(kind: str, request: dict) -> str:
        canon = json.dumps({"kind": kind, "request": request}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def lookup(self, kind: str, request: dict) -> Optional[dict]:
        return self._entries.get(self.request_key(kind, request))

    def store(self, kind: str, request: dict, response: dict) -> None:
        key = self.request_key(kind, request)
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps({"key": key, "kind": kind, "request": request, "response": response}) + "\n")

    def resolve(self, kind: str, request: dict, live: Optional[Callable[[], dict]]) -> dict:
        cached = self.lookup(kind, request)
        if cached is not None:
            return cached
        if self.mode == "replay" or live is None:
            raise ReplayMiss(f"no recorded response for {kind} request {self.request_key(kind, request)[:12]}")
        response = live()
        self.store(kind, request, response)
        return response


@dataclass
class RecordedChat:
    tape: Tape
    inner: Optional[ChatModel] = None

    def complete(self, prompt: str) -> str:
        req = {"prompt": prompt}
        live = (lambda: {"text": self.inner.complete(prompt)}) if self.inner else None
        return self.tape.resolve("chat", req, live)["text"]


@dataclass
class RecordedVision:
    tape: Tape
    inner: Optional[VisionModel] = None

    def ask(self, image: Image.Image, question: str) -> str:
        req = {"image": image_digest(image), "question": question}
        live = (lambda: {"text": self.inner.ask(image, question)}) if self.inner else None
        return self.tape.resolve("vision", req, live)["text"]


class RecordedTextEncoder:
    def __init__(self, tape: Tape, inner: Optional[TextEncoder] = None,
                 encoder_id: Optional[str] = None, dim: Optional[int] = None):
        self.tape = tape
        self.inner = inner
        self.encoder_id = encoder_id or (inner.encoder_id if inner else "replay-text")
        if dim is None and inner is None:
            raise ConfigError("replay-only text encoder needs an explicit dim")
        self.dim = dim if dim is not None else inner.dim

    def encode(self, text: str) -> np.ndarray:
        req = {"encoder_id": self.encoder_id, "text": text}
        live = (lambda: {"vector": vector_to_b64(self.inner.encode(text))}) if self.inner else None
        return vector_from_b64(self.tape.resolve("text_encode", req, live)["vector"])


class RecordedImageEncoder:
    def __init__(self, tape: Tape, inner: Optional[ImageEncoder] = None,
                 encoder_id: Optional[str] = None, dim: Optional[int] = None,
                 input_size: Optional[int] = None):
        self.tape = tape
        self.inner = inner
        self.encoder_id = encoder_id or (inner.encoder_id if inner else "replay-image")
        if inner is None and (dim is None or input_size is None):
            raise ConfigError("replay-only image encoder needs explicit dim and input_size")
        self.dim = dim if dim is not None else inner.dim
        self.input_size = input_size if input_size is not None else inner.input_size

    def encode(self, image: Image.Image) -> np.ndarray:
        req = {"encoder_id": self.encoder_id, "image": image_digest(image)}
        live = (lambda: {"vector": vector_to_b64(self.inner.encode(image))}) if self.inner else None
        return vector_from_b64(self.tape.resolve("image_encode", req, live)["vector"])


@dataclass
class RecordedScorer:
    tape: Tape
    inner: Optional[ImageTextScorer] = None

    def score(self, image: Image.Image, text: str) -> float:
        req = {"image": image_digest(image), "text": text}
        live = (lambda: {"score": self.inner.score(image, text)}) if self.inner else None
        return float(self.tape.resolve("score", req, live)["score"])


@dataclass
class ModelSuite:
    """The full set of model backends one pipeline run talks to."""

    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    chat: ChatModel
    vision: VisionModel
    scorer: Optional[ImageTextScorer] = None

    def recorded(self, tape: Tape) -> "ModelSuite":
        return ModelSuite(
            image_encoder=RecordedImageEncoder(tape, self.image_encoder),
            text_encoder=RecordedTextEncoder(tape, self.text_encoder),
            chat=RecordedChat(tape, self.chat),
            vision=RecordedVision(tape, self.vision),
            scorer=RecordedScorer(tape, self.scorer) if self.scorer else None,
        )


def replay_suite(tape: Tape, image_dim: int, image_input_size: int, text_dim: int,
                 image_encoder_id: str = "replay-image",
                 text_encoder_id: str = "replay-text") -> ModelSuite:
    """A suite that answers exclusively from a recorded tape."""
    return ModelSuite(
        image_encoder=RecordedImageEncoder(
            tape, None, encoder_id=image_encoder_id, dim=image_dim, input_size=image_input_size
        ),
        text_encoder=RecordedTextEncoder(tape, None, encoder_id=text_encoder_id, dim=text_dim),
        chat=RecordedChat(tape, None),
        vision=RecordedVision(tape, None),
        scorer=RecordedScorer(tape, None),
    )
