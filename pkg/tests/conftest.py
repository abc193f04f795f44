"""Shared fixtures: synthetic images, manifests, and the planted-slice dataset."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw

from slicelens.detections import BBox


# ---------------------------------------------------------------------------
# Image and manifest helpers
# ---------------------------------------------------------------------------

def make_image(path: Path, size: tuple[int, int] = (64, 64),
               color: tuple[int, int, int] = (128, 128, 128),
               boxes: list[tuple[BBox, tuple[int, int, int]]] | None = None) -> None:
    img = Image.new("RGB", size, color)
    if boxes:
        draw = ImageDraw.Draw(img)
        for box, box_color in boxes:
            draw.rectangle((box.x, box.y, box.x2 - 1, box.y2 - 1), fill=box_color)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def box_json(box: BBox | None) -> dict | None:
    if box is None:
        return None
    return {"x": box.x, "y": box.y, "w": box.w, "h": box.h}


def write_manifest(path: Path, name: str, detections: list[dict],
                   image_dir: str = "images", class_name: str = "car",
                   iou_threshold: float = 0.5) -> Path:
    doc = {
        "name": name,
        "class_name": class_name,
        "iou_threshold": iou_threshold,
        "image_dir": image_dir,
        "detections": detections,
    }
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture
def toy_dataset(tmp_path):
    """Six detections over two 100x100 images: 2 TP, 2 FP, 2 FN."""
    images = tmp_path / "images"
    make_image(images / "img0.png", (100, 100), (90, 120, 150),
               boxes=[(BBox(20, 20, 30, 25), (200, 80, 60))])
    make_image(images / "img1.png", (100, 100), (60, 160, 90),
               boxes=[(BBox(40, 45, 20, 20), (240, 220, 90))])
    detections = [
        {"id": "tp0", "image_id": "img0.png", "kind": "TP",
         "predicted_box": box_json(BBox(20, 20, 30, 25)),
         "gt_box": box_json(BBox(22, 21, 28, 24)), "iou": 0.8, "confidence": 0.95},
        {"id": "tp1", "image_id": "img1.png", "kind": "TP",
         "predicted_box": box_json(BBox(40, 45, 20, 20)),
         "gt_box": box_json(BBox(41, 45, 20, 20)), "iou": 0.9, "confidence": 0.9},
        {"id": "fp0", "image_id": "img0.png", "kind": "FP",
         "predicted_box": box_json(BBox(60, 60, 20, 16)),
         "gt_box": None, "iou": 0.0, "confidence": 0.7},
        {"id": "fp1", "image_id": "img1.png", "kind": "FP",
         "predicted_box": box_json(BBox(10, 8, 24, 24)),
         "gt_box": box_json(BBox(18, 8, 24, 24)), "iou": 1.0 / 3.0, "confidence": 0.6},
        {"id": "fn0", "image_id": "img0.png", "kind": "FN",
         "predicted_box": None,
         "gt_box": box_json(BBox(5, 70, 18, 14)), "iou": 0.0},
        # fn1 boxes overlap at iou 240/560 = 3/7: below threshold, above the IR gate
        {"id": "fn1", "image_id": "img1.png", "kind": "FN",
         "predicted_box": box_json(BBox(72, 66, 20, 20)),
         "gt_box": box_json(BBox(64, 66, 20, 20)), "iou": 240.0 / 560.0},
    ]
    manifest = write_manifest(tmp_path / "manifest.json", "toy", detections)
    return manifest


# ---------------------------------------------------------------------------
# Numeric fixtures for reduction/clustering
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def two_blob_64d():
    """Two 64D Gaussian blobs (sigma 0.1) with centers 10 apart, 100 points each."""
    rng = np.random.default_rng(7)
    c2 = np.zeros(64)
    c2[0] = 10.0
    X = np.vstack([
        rng.normal(np.zeros(64), 0.1, (100, 64)),
        rng.normal(c2, 0.1, (100, 64)),
    ])
    labels = np.array([0] * 100 + [1] * 100)
    return X, labels


def blob_noise_points(seed: int = 11):
    """Three tight 2D blobs (50 pts each) plus 10 far-flung uniform noise points."""
    rng = np.random.default_rng(seed)
    centers = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]
    blobs = [rng.normal(c, 0.2, (50, 2)) for c in centers]
    noise = []
    while len(noise) < 10:
        p = rng.uniform(-40.0, 50.0, 2)
        if all(np.linalg.norm(p - np.asarray(c)) > 12.0 for c in centers):
            noise.append(p)
    X = np.vstack(blobs + [np.asarray(noise)])
    truth = np.array([0] * 50 + [1] * 50 + [2] * 50 + [-1] * 10)
    return X, truth


@pytest.fixture(scope="session")
def blob_noise_2d():
    return blob_noise_points(11)


# ---------------------------------------------------------------------------
# Planted-slice dataset: 3 visual failure modes + scattered noise
# ---------------------------------------------------------------------------

MODE_COLORS = {
    "snow": (235, 235, 240),
    "forest": (40, 140, 60),
    "night": (25, 25, 70),
}
NOISE_COLORS = [
    (220, 40, 40), (240, 150, 40), (170, 60, 200), (60, 200, 220),
    (230, 80, 180), (250, 240, 80), (130, 85, 40), (255, 170, 160),
]

MODE_ANSWERS = {
    "snow": {
        "scene": "a snow-covered road with drifting snow banks",
        "weather": "Heavy snow is falling across the scene.",
        "fp": "A snow bank shaped like a vehicle sits near the road.",
        "fn": "The car is buried under thick snow and barely visible.",
    },
    "forest": {
        "scene": "a dense forest trail with overhanging branches",
        "weather": "Overcast daylight under the tree canopy.",
        "fp": "A mossy boulder between trees resembles a vehicle.",
        "fn": "Branches and foliage cover most of the car body.",
    },
    "night": {
        "scene": "an unlit street at night with strong glare",
        "weather": "Clear night sky with no ambient light.",
        "fp": "A pair of street reflections mimics headlights.",
        "fn": "The dark car blends into the unlit background.",
    },
}

GOLDEN_SUMMARIES = {
    "snow": {
        "scene": "cars on snow-covered roads in heavy snowfall",
        "fp_cause": "snow banks and drifts are mistaken for vehicles",
        "fn_cause": "vehicles buried in snow lose their outline",
        "keywords": ["snow", "winter road", "low visibility"],
    },
    "forest": {
        "scene": "cars parked along dense forest trails",
        "fp_cause": "boulders and bushes read as vehicle shapes",
        "fn_cause": "foliage occludes most of the car body",
        "keywords": ["forest", "occlusion", "foliage"],
    },
    "night": {
        "scene": "cars on unlit streets at night",
        "fp_cause": "light reflections mimic headlights",
        "fn_cause": "dark vehicles blend into the unlit scene",
        "keywords": ["night", "glare", "low light"],
    },
}


def _mode_of_image(image) -> str:
    arr = np.asarray(image.convert("RGB"), dtype=np.float32).reshape(-1, 3).mean(axis=0)
    palette = dict(MODE_COLORS)
    palette.update({f"noise{i}": c for i, c in enumerate(NOISE_COLORS)})
    return min(palette, key=lambda k: float(np.sum((arr - np.asarray(palette[k])) ** 2)))


class PlantedVision:
    """Vision mock: answers depend on the crop's planted failure mode."""

    def __init__(self):
        self.calls = 0

    def ask(self, image, question: str) -> str:
        self.calls += 1
        mode = _mode_of_image(image)
        answers = MODE_ANSWERS.get(mode)
        if answers is None:
            return f"An unusual {mode.replace('noise', 'scene #')} with mixed colors."
        if "weather" in question.lower():
            return answers["weather"]
        if "lighting" in question.lower():
            return answers["weather"]
        if "obstructed" in question.lower() or "section" in question.lower():
            return answers["fn"]
        if "Describe the" in question or "main object" in question:
            return answers["fp"] if "main object" in question else answers["fn"]
        return f"The image shows {answers['scene']}."


class PlantedChat:
    """Chat mock keyed on the planted mode words present in the prompt."""

    def __init__(self):
        self.calls = 0

    @staticmethod
    def _mode_in(text: str) -> str | None:
        lowered = text.lower()
        for mode, probe in (("snow", "snow"), ("forest", "forest"), ("night", "unlit")):
            if probe in lowered:
                return mode
        return None

    def complete(self, prompt: str) -> str:
        self.calls += 1
        mode = self._mode_in(prompt)
        if "reply with the single word" in prompt.lower():
            return "STOP"
        if "json array" in prompt.lower():
            words = GOLDEN_SUMMARIES[mode]["keywords"] if mode else ["mixed", "outlier", "rare"]
            return json.dumps(words)
        if "json object" in prompt.lower():
            if mode:
                g = GOLDEN_SUMMARIES[mode]
                return json.dumps({"scene": g["scene"], "fp_cause": g["fp_cause"],
                                   "fn_cause": g["fn_cause"]})
            return json.dumps({"scene": "mixed rare scenes", "fp_cause": "various",
                               "fn_cause": "various"})
        if mode:
            g = MODE_ANSWERS[mode]
            return f"In {g['scene']}, the detector fails: {g['fp']} {g['fn']}"
        return "A rare standalone scene caused an isolated error."


def build_planted_manifest(root: Path, name: str = "planted") -> Path:
    """3 failure modes x 18 members + 8 noise failures + 10 TPs, on 64x64 images."""
    rng = np.random.default_rng(99)
    images = root / "images"
    detections: list[dict] = []

    def add_image(image_id: str, base_color, jitter: int) -> None:
        color = tuple(int(np.clip(c + jitter, 0, 255)) for c in base_color)
        inner = tuple(int(np.clip(c - 25, 0, 255)) for c in base_color)
        make_image(images / image_id, (64, 64), color,
                   boxes=[(BBox(24, 22, 18, 16), inner)])

    for mode_idx, (mode, base_color) in enumerate(MODE_COLORS.items()):
        for i in range(6):
            image_id = f"{mode}_{i}.png"
            add_image(image_id, base_color, int(rng.integers(-6, 7)))
            for j in range(3):
                det_id = f"{mode}-{i}-{j}"
                dx, dy = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
                box = BBox(24 + dx, 22 + dy, 18, 16)
                if (i + j) % 2 == 0:
                    detections.append({
                        "id": det_id, "image_id": image_id, "kind": "FP",
                        "predicted_box": box_json(box), "gt_box": None,
                        "iou": 0.0, "confidence": round(0.55 + 0.04 * j, 2),
                    })
                else:
                    gt = BBox(box.x + 8, box.y, box.w, box.h)
                    inter = 10 * 16  # overlap of the shifted pair
                    union = 2 * 18 * 16 - inter
                    detections.append({
                        "id": det_id, "image_id": image_id, "kind": "FN",
                        "predicted_box": box_json(box), "gt_box": box_json(gt),
                        "iou": round(inter / union, 4),
                    })
        # Two TPs per mode so slice metrics are non-trivial.
        for t in range(2):
            image_id = f"{mode}_tp{t}.png"
            add_image(image_id, base_color, int(rng.integers(-6, 7)))
            box = BBox(24, 22, 18, 16)
            detections.append({
                "id": f"{mode}-tp-{t}", "image_id": image_id, "kind": "TP",
                "predicted_box": box_json(box), "gt_box": box_json(box),
                "iou": 1.0, "confidence": 0.9,
            })

    # Noise failures: one-off scenes, each with a unique hue and quadrant
    # pattern so they sit far from every mode and from each other.
    for i, color in enumerate(NOISE_COLORS):
        image_id = f"noise_{i}.png"
        img_path = images / image_id
        base = Image.new("RGB", (64, 64), color)
        draw = ImageDraw.Draw(base)
        dark = tuple(c // 5 for c in color)
        for q, (qx, qy) in enumerate([(0, 0), (32, 0), (0, 32), (32, 32)]):
            if (i + 1) >> q & 1:
                draw.rectangle((qx, qy, qx + 31, qy + 31), fill=dark)
        img_path.parent.mkdir(parents=True, exist_ok=True)
        base.save(img_path)
        detections.append({
            "id": f"noise-{i}", "image_id": image_id, "kind": "FP",
            "predicted_box": box_json(BBox(24, 22, 18, 16)), "gt_box": None,
            "iou": 0.0, "confidence": 0.5,
        })

    # A few far-away TPs that should not attach to any slice.
    for t in range(4):
        image_id = f"plain_tp{t}.png"
        add_image(image_id, (128, 128, 128), 12 * t)
        box = BBox(24, 22, 18, 16)
        detections.append({
            "id": f"plain-tp-{t}", "image_id": image_id, "kind": "TP",
            "predicted_box": box_json(box), "gt_box": box_json(box),
            "iou": 1.0, "confidence": 0.85,
        })

    return write_manifest(root / "manifest.json", name, detections)


@pytest.fixture(scope="session")
def planted_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("planted")
    return build_planted_manifest(root)


def planted_suite():
    from slicelens.backends import (
        HashingTextEncoder,
        ModelSuite,
        PixelStatImageEncoder,
        RuleScorer,
    )

    return ModelSuite(
        image_encoder=PixelStatImageEncoder(dim=12, input_size=32),
        text_encoder=HashingTextEncoder(dim=64),
        chat=PlantedChat(),
        vision=PlantedVision(),
        scorer=RuleScorer(lambda image, text: float(np.asarray(image).mean()) / 255.0),
    )


@pytest.fixture(scope="session")
def built_workspace(planted_manifest, tmp_path_factory):
    """Planted dataset with the full pipeline run once (session-cached)."""
    from slicelens.config import EngineConfig
    from slicelens.pipeline import run_pipeline
    from slicelens.workspace import Workspace

    root = tmp_path_factory.mktemp("built_ws")
    ws = Workspace(root, EngineConfig())
    space = ws.ingest(planted_manifest)
    space.suite = planted_suite()
    report = run_pipeline(space)
    return ws, space, report


@pytest.fixture
def service_workspace(built_workspace, tmp_path):
    """Fresh mutable copy of the built workspace for mutation tests."""
    import shutil

    from slicelens.config import EngineConfig
    from slicelens.workspace import Workspace

    src_ws, _, _ = built_workspace
    root = tmp_path / "ws"
    shutil.copytree(src_ws.root, root)
    ws = Workspace(root, EngineConfig())
    space = ws.space("planted")
    space.suite = planted_suite()
    return ws, space
