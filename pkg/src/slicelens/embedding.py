"""Context-aware embeddings: averaged detection-patch and context-patch vectors.

For each detection we crop three jittered patches of the detection region
and three of the context region, push each through the image encoder, and
average the two triples. The detection half is concatenated before the
context half, giving a vector of length 2*d.

Patch vectors are cached on disk keyed by (image_id, box, encoder_id) so a
resumed run repeats no encoder calls and reproduces the table bit-for-bit.
"""
from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .backends import ImageEncoder, vector_from_b64, vector_to_b64
from .detections import BBox, Dataset, Detection
from .errors import ConfigError
from .regions import patch_seed, perturbed_patches, region_set

EMBED_DTYPE = "<f4"  # 32-bit little-endian floats, row-major


@dataclass(frozen=True)
class ContextAwareEmbedding:
    detection_id: str
    vector: np.ndarray  # length 2*d: detection half then context half
    encoder_id: str
    d: int

    def __post_init__(self) -> None:
        if self.vector.shape != (2 * self.d,):
            raise ValueError(
                f"embedding for {self.detection_id}: length {self.vector.shape} != 2*{self.d}"
            )
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"embedding for {self.detection_id} has non-finite entries")


class EmbeddingCache:
    """Patch-vector cache keyed by (image_id, box, encoder_id).

    Entries append to a JSONL file as base64 float32, so hits return the
    original bytes exactly and interrupted runs resume where they stopped.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                row = json.loads(line)
                self._entries[row["key"]] = vector_from_b64(row["vector"])

    @staticmethod
    def key(image_id: str, box: BBox, encoder_id: str) -> str:
        coords = ",".join(repr(float(v)) for v in box.as_tuple())
        return f"{image_id}|{coords}|{encoder_id}"

    def get(self, image_id: str, box: BBox, encoder_id: str) -> Optional[np.ndarray]:
        vec = self._entries.get(self.key(image_id, box, encoder_id))
        return vec.copy() if vec is not None else None

    def put(self, image_id: str, box: BBox, encoder_id: str, vec: np.ndarray) -> None:
        key = self.key(image_id, box, encoder_id)
        vec = np.asarray(vec, dtype=np.float32)
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = vec
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    fh.write(json.dumps({"key": key, "vector": vector_to_b64(vec)}) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


class PatchEmbedder:
    """Crops patches, resamples them to the encoder input size, and caches vectors."""

    def __init__(self, dataset: Dataset, encoder: ImageEncoder,
                 cache: Optional[EmbeddingCache] = None):
        self.dataset = dataset
        self.encoder = encoder
        self.cache = cache if cache is not None else EmbeddingCache()
        self.encoder_calls = 0
        self._images: dict[str, Image.Image] = {}
        self._lock = threading.Lock()
        self._dim_checked = False

    def _image(self, image_id: str) -> Image.Image:
        with self._lock:
            img = self._images.get(image_id)
            if img is None:
                img = Image.open(self.dataset.image_dir / image_id).convert("RGB")
                self._images[image_id] = img
            return img

    def crop(self, image_id: str, box: BBox) -> Image.Image:
        """Patch resampled (bilinear) to the encoder's declared input size."""
        size = self.encoder.input_size
        img = self._image(image_id)
        return img.resize((size, size), resample=Image.BILINEAR,
                          box=(box.x, box.y, box.x2, box.y2))

    def encode_patch(self, image_id: str, box: BBox) -> np.ndarray:
        cached = self.cache.get(image_id, box, self.encoder.encoder_id)
        if cached is not None:
            return cached
        vec = np.asarray(self.encoder.encode(self.crop(image_id, box)), dtype=np.float32)
        self.encoder_calls += 1
        if vec.shape != (self.encoder.dim,):
            raise ConfigError(
                f"encoder {self.encoder.encoder_id} returned shape {vec.shape}, "
                f"configured d={self.encoder.dim}"
            )
        self._dim_checked = True
        self.cache.put(image_id, box, self.encoder.encoder_id, vec)
        return vec


def context_aware_embedding(d: Detection, embedder: PatchEmbedder, seed: int,
                            patch_count: int = 3, max_expand: float = 0.10) -> ContextAwareEmbedding:
    """mean(DR patch vectors) ++ mean(CR patch vectors) for one detection."""
    img_w, img_h = embedder.dataset.image_size(d.image_id)
    regions = region_set(d, img_w, img_h)
    halves = []
    for tag, region in (("dr", regions.dr), ("cr", regions.cr)):
        patches = perturbed_patches(
            region, img_w, img_h, seed=patch_seed(seed, d.id, tag),
            count=patch_count, max_expand=max_expand,
        )
        vecs = [embedder.encode_patch(d.image_id, p) for p in patches]
        halves.append(np.mean(np.stack(vecs), axis=0, dtype=np.float64).astype(np.float32))
    return ContextAwareEmbedding(
        detection_id=d.id,
        vector=np.concatenate(halves),
        encoder_id=embedder.encoder.encoder_id,
        d=embedder.encoder.dim,
    )


@dataclass
class EmbeddingTable:
    """Context-aware embeddings for every detection of a dataset."""

    ids: list[str]
    matrix: np.ndarray  # (n, 2*d) float32
    encoder_id: str
    d: int
    seed: int

    def __post_init__(self) -> None:
        self._row = {det_id: i for i, det_id in enumerate(self.ids)}

    def vector(self, detection_id: str) -> np.ndarray:
        return self.matrix[self._row[detection_id]]

    def submatrix(self, detection_ids: Sequence[str]) -> np.ndarray:
        return self.matrix[[self._row[i] for i in detection_ids]]


def embed_dataset(dataset: Dataset, encoder: ImageEncoder, seed: int,
                  cache: Optional[EmbeddingCache] = None,
                  max_workers: int = 1) -> EmbeddingTable:
    """One context-aware embedding per detection (TPs included).

    Deterministic in (dataset, seed, encoder_id): patch seeds derive from
    detection ids, so worker scheduling and resume order cannot change the
    result.
    """
    embedder = PatchEmbedder(dataset, encoder, cache)
    dets = list(dataset.detections)

    def row(d: Detection) -> np.ndarray:
        return context_aware_embedding(d, embedder, seed).vector

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(row, dets))
    else:
        rows = [row(d) for d in dets]
    matrix = np.stack(rows) if rows else np.zeros((0, 2 * encoder.dim), dtype=np.float32)
    return EmbeddingTable(
        ids=[d.id for d in dets],
        matrix=matrix.astype(np.float32),
        encoder_id=encoder.encoder_id,
        d=encoder.dim,
        seed=seed,
    )


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Header JSON line + raw float32 rows; ids in a `.ids.json` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "encoder_id": table.encoder_id,
        "d": table.d,
        "count": len(table.ids),
        "seed": table.seed,
    }
    with path.open("wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(np.ascontiguousarray(table.matrix, dtype=EMBED_DTYPE).tobytes())
    path.with_name(path.name + ".ids.json").write_text(json.dumps(table.ids))


def read_embeddings(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    ids = json.loads(path.with_name(path.name + ".ids.json").read_text())
    count, d = header["count"], header["d"]
    matrix = np.frombuffer(blob, dtype=EMBED_DTYPE)
    if matrix.size != count * 2 * d:
        raise ConfigError(
            f"embedding file {path}: payload holds {matrix.size} floats, "
            f"expected {count} rows of {2 * d}"
        )
    if len(ids) != count:
        raise ConfigError(f"embedding file {path}: {len(ids)} ids for {count} rows")
    return EmbeddingTable(
        ids=ids,
        matrix=matrix.reshape(count, 2 * d).copy(),
        encoder_id=header["encoder_id"],
        d=d,
        seed=header["seed"],
    )
