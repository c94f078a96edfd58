"""Corpus manifests and the bundled synthetic corpus generator.

A manifest names the captions file, optional gold annotations, ground-truth
object sets, reference captions, and a train/val/test split. The synthetic
generator builds an offline corpus: each "image" is a seeded feature vector,
captions are templated from lexicon categories, and a controlled fraction of
captions carry one planted hallucinated subsentence. A scene-aware embedding
backend scores phrases high against images that contain them and low
otherwise, so the whole pipeline runs without model weights or real images.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extraction import CaptionRecord
from .lexicon import Lexicon
from .scoring import WindowRect, unit_vector_from_key
from .util import read_json, read_jsonl, stable_digest, stable_int, substream, write_json, write_jsonl

DEFAULT_PROMPT = "Describe the image. "

# Single-word COCO categories used by the generator; canonical in the lexicon.
OBJECT_POOL = [
    "cat", "dog", "car", "truck", "horse", "bird", "sheep", "cow", "boat",
    "bus", "train", "bicycle", "chair", "couch", "bed", "bench", "bottle",
    "cup", "bowl", "banana", "apple", "pizza", "clock", "vase", "book",
    "kite", "umbrella", "laptop",
]

_OPENERS = ["A {} and a {} are here.", "A {} stands next to a {}.", "A {} sits by a {}."]
_FOLLOWS = ["There is a {} nearby.", "A {} rests in the corner.", "A {} waits behind them."]


def feature_for_image(image_id: str, d_img: int, salt: str = "imgfeat") -> np.ndarray:
    """Fixed seeded feature vector per image id."""
    rng = np.random.default_rng(stable_int(salt, image_id))
    return rng.standard_normal(d_img)


@dataclass
class CorpusManifest:
    root: Path
    feature_dim: int
    captions_path: Path
    gold_path: Path | None = None
    gt_objects_path: Path | None = None
    references_path: Path | None = None
    split_path: Path | None = None
    images_dir: Path | None = None
    corpus_seed: int | None = None

    @classmethod
    def load(cls, path: Path | str) -> "CorpusManifest":
        path = Path(path)
        data = read_json(path)
        root = path.parent

        def resolve(key: str, required: bool = False) -> Path | None:
            rel = data.get(key)
            if rel is None:
                if required:
                    raise FileNotFoundError(f"manifest {path} lacks required key {key!r}")
                return None
            p = root / rel
            if not p.exists():
                raise FileNotFoundError(f"manifest entry {key}={rel} not found at {p}")
            return p

        return cls(
            root=root,
            feature_dim=int(data["feature_dim"]),
            captions_path=resolve("captions", required=True),
            gold_path=resolve("gold_annotations"),
            gt_objects_path=resolve("gt_objects"),
            references_path=resolve("references"),
            split_path=resolve("split"),
            images_dir=resolve("images_dir"),
            corpus_seed=data.get("corpus_seed"),
        )

    def caption_records(self) -> list[CaptionRecord]:
        return [
            CaptionRecord(
                image_id=rec["image_id"],
                prompt=rec.get("prompt", ""),
                caption=rec["caption"],
                image=self.resolve_image(rec["image_id"]),
            )
            for rec in read_jsonl(self.captions_path)
        ]

    def resolve_image(self, image_id: str):
        """Path under images_dir when present, else the synthetic-feature id."""
        if self.images_dir is not None:
            p = self.images_dir / image_id
            if not p.exists():
                raise FileNotFoundError(f"image id {image_id} does not resolve under {self.images_dir}")
            return p
        return image_id

    def feature(self, image_id: str) -> np.ndarray:
        return feature_for_image(image_id, self.feature_dim)

    def gt_objects(self) -> dict[str, set[str]]:
        if self.gt_objects_path is None:
            raise FileNotFoundError(f"manifest at {self.root} has no gt_objects file")
        return {rec["image_id"]: set(rec["objects"]) for rec in read_jsonl(self.gt_objects_path)}

    def gold_annotations(self) -> dict[str, list[tuple[str, int]]]:
        if self.gold_path is None:
            raise FileNotFoundError(f"manifest at {self.root} has no gold_annotations file")
        return {
            rec["image_id"]: [(o["phrase"], int(o["label"])) for o in rec["objects"]]
            for rec in read_jsonl(self.gold_path)
        }

    def references(self) -> dict[str, list[str]]:
        if self.references_path is None:
            raise FileNotFoundError(f"manifest at {self.root} has no references file")
        return {rec["image_id"]: list(rec["references"]) for rec in read_jsonl(self.references_path)}

    def split(self) -> dict[str, list[str]]:
        if self.split_path is None:
            raise FileNotFoundError(f"manifest at {self.root} has no split file")
        split = read_json(self.split_path)
        seen: set[str] = set()
        for name, ids in split.items():
            overlap = seen & set(ids)
            if overlap:
                raise ValueError(f"split sets overlap on ids {sorted(overlap)[:5]} (in {name})")
            seen |= set(ids)
        return split


class SyntheticSceneBackend:
    """Embedding backend whose region vectors encode each image's object set.

    Text embeds as a hash vector of the phrase's canonical category; a region
    embeds as the normalized sum of the image's present-object vectors plus
    window-seeded noise. Present objects therefore score high (cosine about
    1/sqrt(IPI)) and absent ones near zero, which makes the paper-style
    thresholds meaningful on synthetic data.
    """

    def __init__(
        self,
        scene_objects: dict[str, set[str]],
        lexicon: Lexicon | None = None,
        dim: int = 256,
        noise: float = 0.5,
        salt: str = "scene",
    ):
        self.scene_objects = {k: frozenset(v) for k, v in scene_objects.items()}
        self.lexicon = lexicon if lexicon is not None else Lexicon.bundled()
        self.dim = dim
        self.noise = noise
        self.salt = salt
        fingerprint = stable_digest(sorted((k, tuple(sorted(v))) for k, v in self.scene_objects.items()))
        self.backend_id = f"scene-{dim}-{noise}-{salt}-{fingerprint}"

    def _object_vector(self, category: str) -> np.ndarray:
        return unit_vector_from_key("scene-text", self.salt, category, dim=self.dim)

    def embed_text(self, phrase: str) -> np.ndarray:
        canon = self.lexicon.canonical(phrase) or phrase.lower().strip()
        return self._object_vector(canon)

    def embed_image_region(self, image, region: WindowRect) -> np.ndarray:
        present = self.scene_objects.get(str(image), frozenset())
        v = np.zeros(self.dim)
        for category in sorted(present):
            v = v + self._object_vector(category)
        v = v + self.noise * unit_vector_from_key(
            "scene-noise", self.salt, str(image), region.key(), dim=self.dim
        )
        return v / np.linalg.norm(v)


def generate_corpus(
    out_dir: Path | str,
    n_images: int = 50,
    seed: int = 1234,
    d_img: int = 16,
    hallucination_rate: float = 0.35,
    prompt: str = DEFAULT_PROMPT,
    pool_size: int | None = None,
) -> CorpusManifest:
    """Write a synthetic corpus (captions, gold labels, gt objects, references,
    split, manifest) under out_dir and return its loaded manifest.

    pool_size restricts the object vocabulary to the first N pool categories;
    a smaller pool concentrates object statistics, which suits small models.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = OBJECT_POOL[:pool_size] if pool_size else OBJECT_POOL
    rng = substream(seed, "synthetic-corpus")

    captions, gold, gt_objects, references = [], [], [], []
    for i in range(n_images):
        image_id = f"img{i:04d}"
        n_extra = int(rng.integers(1, 3))  # 1 or 2 grounded sentences after the opener
        n_mentioned = 2 + n_extra
        picks = list(rng.choice(pool, size=n_mentioned + 2, replace=False))
        mentioned, hidden, hallucinated = picks[:n_mentioned], picks[n_mentioned], picks[n_mentioned + 1]

        opener = _OPENERS[int(rng.integers(len(_OPENERS)))].format(mentioned[0], mentioned[1])
        parts = [(opener, [(mentioned[0], 0), (mentioned[1], 0)])]
        for slot in range(n_extra):
            obj = mentioned[2 + slot]
            template = _FOLLOWS[int(rng.integers(len(_FOLLOWS)))]
            parts.append((template.format(obj), [(obj, 0)]))
        # a planted hallucination is always the final sentence, so grounded
        # caption shapes (2 or 3 sentences) remain valid truncations
        if bool(rng.random() < hallucination_rate):
            template = _FOLLOWS[int(rng.integers(len(_FOLLOWS)))]
            parts.append((template.format(hallucinated), [(hallucinated, 1)]))

        caption = " ".join(text for text, _ in parts)
        reference = " ".join(text for text, objs in parts if not any(l for _, l in objs))
        present = {obj for _, objs in parts for obj, label in objs if label == 0} | {hidden}

        captions.append({"image_id": image_id, "prompt": prompt, "caption": caption})
        gold.append(
            {
                "image_id": image_id,
                "objects": [{"phrase": obj, "label": label} for _, objs in parts for obj, label in objs],
            }
        )
        gt_objects.append({"image_id": image_id, "objects": sorted(present)})
        references.append({"image_id": image_id, "references": [reference]})

    ids = [c["image_id"] for c in captions]
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_val = max(1, n_images // 10)
    split = {
        "val": sorted(shuffled[:n_val]),
        "test": sorted(shuffled[n_val : 2 * n_val]),
        "train": sorted(shuffled[2 * n_val :]),
    }

    write_jsonl(out_dir / "captions.jsonl", captions)
    write_jsonl(out_dir / "gold_annotations.jsonl", gold)
    write_jsonl(out_dir / "gt_objects.jsonl", gt_objects)
    write_jsonl(out_dir / "references.jsonl", references)
    write_json(out_dir / "split.json", split)
    write_json(
        out_dir / "manifest.json",
        {
            "feature_dim": d_img,
            "captions": "captions.jsonl",
            "gold_annotations": "gold_annotations.jsonl",
            "gt_objects": "gt_objects.jsonl",
            "references": "references.jsonl",
            "split": "split.json",
            "corpus_seed": seed,
        },
    )
    return CorpusManifest.load(out_dir / "manifest.json")
