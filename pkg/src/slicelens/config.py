"""Engine configuration: seeds, reduction/clustering parameters, model endpoints.

Config loads from a JSON file with environment-variable hooks: endpoints
carry the *name* of the variable that holds their auth token, never the
token itself. Everything has offline defaults so the pipeline runs with
no file at all.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .backends import (
    EndpointConfig,
    HashingTextEncoder,
    HttpChatModel,
    HttpImageEncoder,
    HttpImageTextScorer,
    HttpTextEncoder,
    HttpVisionModel,
    ModelSuite,
    OfflineChat,
    OfflineVision,
    PixelStatImageEncoder,
    RuleScorer,
    Tape,
)
from .errors import ConfigError
from .explain import PromptConfig
from .reduction import ReduceParams

DEFAULT_CLUSTER_GRID = (5, 10, 15, 20, 25)


@dataclass
class ModelsConfig:
    mode: str = "offline"  # offline | live | record | replay
    tape: str = "tape.jsonl"
    image_encoder: dict = field(default_factory=lambda: {"kind": "offline", "dim": 12, "input_size": 32})
    text_encoder: dict = field(default_factory=lambda: {"kind": "offline", "dim": 64})
    chat: dict = field(default_factory=lambda: {"kind": "offline"})
    vision: dict = field(default_factory=lambda: {"kind": "offline"})
    scorer: dict = field(default_factory=lambda: {"kind": "offline"})


@dataclass
class EngineConfig:
    seed: int = 7
    reduce: ReduceParams = field(default_factory=ReduceParams)
    cluster_grid: tuple[int, ...] = DEFAULT_CLUSTER_GRID
    density_resolution: int = 64
    models: ModelsConfig = field(default_factory=ModelsConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    max_workers: int = 1

    @classmethod
    def from_file(cls, path: str | Path) -> "EngineConfig":
        doc = json.loads(Path(path).read_text())
        return cls.from_dict(doc, base_dir=Path(path).parent)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[Path] = None) -> "EngineConfig":
        cfg = cls()
        if "seed" in doc:
            cfg.seed = int(doc["seed"])
        if "reduce" in doc:
            cfg.reduce = ReduceParams(**doc["reduce"])
        if "cluster_grid" in doc:
            cfg.cluster_grid = tuple(int(v) for v in doc["cluster_grid"])
        if "density_resolution" in doc:
            cfg.density_resolution = int(doc["density_resolution"])
        if "max_workers" in doc:
            cfg.max_workers = int(doc["max_workers"])
        if "models" in doc:
            cfg.models = ModelsConfig(**doc["models"])
        if "prompts" in doc:
            prompts_path = Path(doc["prompts"])
            if base_dir is not None and not prompts_path.is_absolute():
                prompts_path = base_dir / prompts_path
            cfg.prompts = PromptConfig.from_file(prompts_path)
        return cfg


def _endpoint(spec: dict) -> EndpointConfig:
    for key in ("base_url", "model"):
        if key not in spec:
            raise ConfigError(f"http endpoint needs '{key}': {spec}")
    return EndpointConfig(
        base_url=spec["base_url"],
        model=spec["model"],
        auth_env=spec.get("auth_env"),
        timeout=float(spec.get("timeout", 30.0)),
        max_retries=int(spec.get("max_retries", 3)),
    )


def build_suite(config: EngineConfig, dataset_dir: Optional[Path] = None) -> ModelSuite:
    """Instantiate the model backends, honoring record/replay mode."""
    mc = config.models

    spec = mc.image_encoder
    if spec.get("kind", "offline") == "offline":
        image_encoder = PixelStatImageEncoder(
            dim=int(spec.get("dim", 12)), input_size=int(spec.get("input_size", 32))
        )
    else:
        image_encoder = HttpImageEncoder(
            _endpoint(spec), dim=int(spec["dim"]), input_size=int(spec["input_size"])
        )

    spec = mc.text_encoder
    if spec.get("kind", "offline") == "offline":
        text_encoder = HashingTextEncoder(dim=int(spec.get("dim", 64)))
    else:
        text_encoder = HttpTextEncoder(_endpoint(spec), dim=int(spec["dim"]))

    spec = mc.chat
    chat = OfflineChat() if spec.get("kind", "offline") == "offline" else HttpChatModel(_endpoint(spec))

    spec = mc.vision
    vision = OfflineVision() if spec.get("kind", "offline") == "offline" else HttpVisionModel(_endpoint(spec))

    spec = mc.scorer
    if spec.get("kind", "offline") == "offline":
        scorer = RuleScorer(lambda image, text: 0.0)
    else:
        scorer = HttpImageTextScorer(_endpoint(spec))

    suite = ModelSuite(
        image_encoder=image_encoder,
        text_encoder=text_encoder,
        chat=chat,
        vision=vision,
        scorer=scorer,
    )
    if mc.mode in ("record", "replay"):
        tape_path = Path(mc.tape)
        if dataset_dir is not None and not tape_path.is_absolute():
            tape_path = dataset_dir / tape_path
        tape = Tape(tape_path, mode="replay" if mc.mode == "replay" else "record")
        suite = suite.recorded(tape)
    elif mc.mode not in ("offline", "live"):
        raise ConfigError(f"unknown models.mode {mc.mode!r}")
    return suite
