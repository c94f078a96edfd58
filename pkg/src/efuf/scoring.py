"""Object-level image-relevance scoring over a sliding patch-window grid.

An object phrase is scored against every rectangular window of image patches
with a contrastive dual-encoder backend; the score is 100x the best window's
cosine similarity. The backend is pluggable: any encoder pair that returns
deterministic unit vectors satisfies the contract. A seeded hash-to-vector
stub backend ships so the full pipeline runs without model weights.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import BackendError, ConfigurationError
from .util import read_jsonl, stable_digest, stable_int


@dataclass(frozen=True)
class WindowRect:
    """Patch-grid rectangle, half-open on row1/col1."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self):
        if not (0 <= self.row0 < self.row1 and 0 <= self.col0 < self.col1):
            raise ConfigurationError(f"degenerate window {self}")

    def key(self) -> tuple[int, int, int, int]:
        return (self.row0, self.col0, self.row1, self.col1)


@dataclass(frozen=True)
class WindowConfig:
    """Patch grid and smallest allowed window side, in patches."""

    grid_rows: int = 3
    grid_cols: int = 3
    min_window: int = 1

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1 or self.min_window < 1:
            raise ConfigurationError(f"grid dimensions must be >= 1, got {self}")
        if self.min_window > min(self.grid_rows, self.grid_cols):
            raise ConfigurationError(
                f"min_window {self.min_window} exceeds grid {self.grid_rows}x{self.grid_cols}"
            )

    def hash(self, template: str | None = None) -> str:
        return stable_digest("window", self.grid_rows, self.grid_cols, self.min_window, template)


@dataclass(frozen=True)
class RelevanceScore:
    """100x cosine similarity of the best window; nominally in [-100, 100]."""

    value: float


class EmbeddingBackend(Protocol):
    """Contrastive text/image-region encoder pair.

    Both methods must return L2-unit vectors (norm 1 +- 1e-6) of the same
    dimension, deterministically: identical inputs yield identical vectors.
    For file-backed images, a region is the pixel bounding box of the window's
    patch cells resized to the encoder's native resolution (see crop_region).
    """

    backend_id: str

    def embed_text(self, phrase: str) -> np.ndarray: ...

    def embed_image_region(self, image, region: WindowRect) -> np.ndarray: ...


def generate_windows(config: WindowConfig) -> list[WindowRect]:
    """Every patch rectangle with both sides >= min_window.

    Deterministic order: size-ascending (height then width), then row-major
    position. The full-grid window is always last.
    """
    windows = []
    for h in range(config.min_window, config.grid_rows + 1):
        for w in range(config.min_window, config.grid_cols + 1):
            for r0 in range(config.grid_rows - h + 1):
                for c0 in range(config.grid_cols - w + 1):
                    windows.append(WindowRect(r0, c0, r0 + h, c0 + w))
    return windows


def score_object(
    backend: EmbeddingBackend,
    image,
    phrase: str,
    config: WindowConfig,
    template: str | None = None,
    cache: "ScoreCache | None" = None,
    image_id: str | None = None,
) -> RelevanceScore:
    """Max over all windows of 100x the text/region cosine similarity.

    Scores the bare phrase by default; pass ``template`` (e.g. "a photo of a
    {}") to wrap it. Results are independent of window enumeration order.
    """
    if not phrase:
        raise ValueError("phrase must be nonempty")
    if isinstance(image, Path) and not image.exists():
        raise FileNotFoundError(f"image not readable: {image}")
    image_id = image_id if image_id is not None else str(image)
    if cache is not None:
        hit = cache.get(image_id, phrase, config.hash(template), backend.backend_id)
        if hit is not None:
            return RelevanceScore(hit)

    text = template.format(phrase) if template else phrase
    try:
        text_vec = backend.embed_text(text)
        best = max(
            float(np.dot(text_vec, backend.embed_image_region(image, w)))
            for w in generate_windows(config)
        )
    except (BackendError, OSError):
        raise
    except Exception as exc:
        raise BackendError(f"embedding backend {backend.backend_id!r} failed: {exc}") from exc

    score = 100.0 * best
    if cache is not None:
        cache.put(image_id, phrase, config.hash(template), backend.backend_id, score)
    return RelevanceScore(score)


def score_sentence(scores: Iterable[RelevanceScore | float]) -> float:
    """Arithmetic mean of object scores; a caption with no objects has none."""
    values = [s.value if isinstance(s, RelevanceScore) else float(s) for s in scores]
    if not values:
        raise ValueError("cannot compute a sentence score from zero object scores")
    return sum(values) / len(values)


class ScoreCache:
    """Persistent memo of scores keyed by (image_id, phrase, config_hash, backend_id).

    One JSON record per line, append-only; writes are serialized, reads are
    lock-free against the in-memory index.
    """

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: dict[tuple[str, str, str, str], float] = {}
        if self.path.exists():
            for rec in read_jsonl(self.path):
                self._index[(rec["image_id"], rec["phrase"], rec["config_hash"], rec["backend_id"])] = rec["score"]

    def __len__(self) -> int:
        return len(self._index)

    def get(self, image_id: str, phrase: str, config_hash: str, backend_id: str) -> float | None:
        return self._index.get((image_id, phrase, config_hash, backend_id))

    def put(self, image_id: str, phrase: str, config_hash: str, backend_id: str, score: float) -> None:
        key = (image_id, phrase, config_hash, backend_id)
        with self._lock:
            if key in self._index:
                return
            self._index[key] = score
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(
                    json.dumps(
                        {
                            "image_id": image_id,
                            "phrase": phrase,
                            "config_hash": config_hash,
                            "backend_id": backend_id,
                            "score": score,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )


def unit_vector_from_key(*key_parts, dim: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector derived from a hashable key."""
    rng = np.random.default_rng(stable_int(*key_parts))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class HashEmbeddingBackend:
    """Deterministic stub backend: seeded pseudo-random unit vectors per input.

    Text and region vectors are independent draws, so similarities are small
    random values; useful for exercising the scoring mechanics without weights.
    """

    def __init__(self, dim: int = 256, salt: str = "stub"):
        self.dim = dim
        self.salt = salt
        self.backend_id = f"hash-{dim}-{salt}"

    def embed_text(self, phrase: str) -> np.ndarray:
        return unit_vector_from_key("text", self.salt, phrase, dim=self.dim)

    def embed_image_region(self, image, region: WindowRect) -> np.ndarray:
        return unit_vector_from_key("region", self.salt, str(image), region.key(), dim=self.dim)


def patch_window_pixels(
    width: int, height: int, config: WindowConfig, rect: WindowRect
) -> tuple[int, int, int, int]:
    """Pixel bounding box (left, upper, right, lower) of a window's patch cells."""
    left = rect.col0 * width // config.grid_cols
    right = rect.col1 * width // config.grid_cols
    upper = rect.row0 * height // config.grid_rows
    lower = rect.row1 * height // config.grid_rows
    return (left, upper, right, lower)


def crop_region(image_path: Path | str, config: WindowConfig, rect: WindowRect, out_size: int):
    """Crop a window's pixel bounding box and resize to a square encoder input."""
    from PIL import Image

    with Image.open(image_path) as img:
        box = patch_window_pixels(img.width, img.height, config, rect)
        return img.convert("RGB").crop(box).resize((out_size, out_size))
