"""Caption segmentation and threshold-based assembly of unlearning datasets.

Captions are split into punctuation-delimited subsentences. Each scored
object mention then yields a (context, target) training pair: the context is
the prompt plus all caption text before the mention's subsentence, the target
is the subsentence itself; everything after it is discarded. Mentions scoring
above the positive floor feed the positive set, those below the negative
ceiling feed the negative set, and captions whose mean object score clears
the sentence floor feed the full-sentence set.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CurationError
from .extraction import CaptionRecord, ObjectMention
from .scoring import score_sentence
from .util import read_jsonl, write_jsonl

SUBSENTENCE_DELIMITERS = frozenset(".,;:!?")


class Polarity(str, Enum):
    POSITIVE_SUB = "POSITIVE_SUB"
    NEGATIVE_SUB = "NEGATIVE_SUB"
    SENTENCE = "SENTENCE"


@dataclass(frozen=True)
class Thresholds:
    """Positive-object floor, negative-object ceiling, and sentence floor."""

    t0: float = 32.0
    t1: float = 23.0
    t2: float = 27.5

    def __post_init__(self):
        if not self.t1 < self.t0:
            raise ValueError(f"negative ceiling t1={self.t1} must be below positive floor t0={self.t0}")


@dataclass(frozen=True)
class SubsentenceSplit:
    """Context/target split around one subsentence; pre+cur prefixes prompt+caption."""

    pre: str
    cur: str


@dataclass(frozen=True)
class UnlearningSample:
    image_id: str
    context: str
    target: str
    polarity: Polarity
    provenance_score: float

    def __post_init__(self):
        if not self.target:
            raise ValueError("sample target must be nonempty")

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "context": self.context,
            "target": self.target,
            "polarity": self.polarity.value,
            "provenance_score": self.provenance_score,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "UnlearningSample":
        return cls(
            image_id=rec["image_id"],
            context=rec["context"],
            target=rec["target"],
            polarity=Polarity(rec["polarity"]),
            provenance_score=float(rec["provenance_score"]),
        )


def split_subsentences(caption: str) -> list[tuple[int, int]]:
    """Contiguous [start, end) spans covering the caption, split after each
    delimiter; whitespace stays attached to the following span."""
    if not caption:
        raise ValueError("caption must be nonempty")
    spans = []
    start = 0
    for i, ch in enumerate(caption):
        if ch in SUBSENTENCE_DELIMITERS:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(caption):
        spans.append((start, len(caption)))
    return spans


def locate(record: CaptionRecord, mention: ObjectMention) -> SubsentenceSplit:
    """Context/target split for the subsentence holding the mention.

    Raises CurationError if the mention straddles a subsentence boundary,
    which signals extractor/splitter disagreement.
    """
    for s, e in split_subsentences(record.caption):
        if s <= mention.start and mention.end <= e:
            return SubsentenceSplit(pre=record.prompt + record.caption[:s], cur=record.caption[s:e])
        if mention.start < e and s < mention.end:
            raise CurationError(
                f"mention {mention.phrase!r} at {mention.span()} straddles the subsentence "
                f"boundary at {e} in image {record.image_id}"
            )
    raise CurationError(f"mention span {mention.span()} outside caption for image {record.image_id}")


@dataclass
class CuratedDatasets:
    positive: list[UnlearningSample]
    negative: list[UnlearningSample]
    sentence: list[UnlearningSample]

    def sizes(self) -> dict[str, int]:
        return {"d_pos": len(self.positive), "d_neg": len(self.negative), "d_sent": len(self.sentence)}


def curate(
    records: Sequence[CaptionRecord],
    scored_mentions: dict[str, list[tuple[ObjectMention, float]]],
    thresholds: Thresholds,
    rng: np.random.Generator | None = None,
) -> CuratedDatasets:
    """Assemble the positive/negative/sentence datasets by thresholding scores.

    One subsentence sample per qualifying mention, one sentence sample per
    qualifying caption; exact duplicate (context, target, polarity) triples
    are dropped. Captions with zero mentions contribute nothing. When an rng
    is given, each dataset is shuffled for reproducible training order.
    """
    positive: list[UnlearningSample] = []
    negative: list[UnlearningSample] = []
    sentence: list[UnlearningSample] = []
    seen: set[tuple[str, str, str]] = set()

    def add(bucket: list[UnlearningSample], sample: UnlearningSample):
        key = (sample.context, sample.target, sample.polarity.value)
        if key not in seen:
            seen.add(key)
            bucket.append(sample)

    for record in records:
        pairs = scored_mentions.get(record.image_id, [])
        if not pairs:
            continue
        for mention, score in pairs:
            if score > thresholds.t0:
                split = locate(record, mention)
                add(positive, UnlearningSample(record.image_id, split.pre, split.cur, Polarity.POSITIVE_SUB, score))
            elif score < thresholds.t1:
                split = locate(record, mention)
                add(negative, UnlearningSample(record.image_id, split.pre, split.cur, Polarity.NEGATIVE_SUB, score))
        mean = score_sentence([score for _, score in pairs])
        if mean > thresholds.t2:
            add(sentence, UnlearningSample(record.image_id, record.prompt, record.caption, Polarity.SENTENCE, mean))

    if rng is not None:
        for bucket in (positive, negative, sentence):
            order = rng.permutation(len(bucket))
            bucket[:] = [bucket[i] for i in order]
    return CuratedDatasets(positive=positive, negative=negative, sentence=sentence)


DATASET_FILES = {"d_pos": "positive", "d_neg": "negative", "d_sent": "sentence"}


def write_datasets(datasets: CuratedDatasets, out_dir: Path | str, meta: dict | None = None) -> dict[str, int]:
    """Write d_pos/d_neg/d_sent as line-delimited records; returns sizes."""
    out_dir = Path(out_dir)
    sizes = {}
    for stem, attr in DATASET_FILES.items():
        samples: Iterable[UnlearningSample] = getattr(datasets, attr)
        sizes[stem] = write_jsonl(out_dir / f"{stem}.jsonl", (s.to_record() for s in samples), meta=meta)
    return sizes


def read_dataset(path: Path | str) -> list[UnlearningSample]:
    return [UnlearningSample.from_record(rec) for rec in read_jsonl(path)]


def read_datasets(curate_dir: Path | str) -> CuratedDatasets:
    curate_dir = Path(curate_dir)
    return CuratedDatasets(
        positive=read_dataset(curate_dir / "d_pos.jsonl"),
        negative=read_dataset(curate_dir / "d_neg.jsonl"),
        sentence=read_dataset(curate_dir / "d_sent.jsonl"),
    )
