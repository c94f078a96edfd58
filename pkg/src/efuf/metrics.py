"""Hallucination and generation-quality metrics, plus the score statistics.

CHAIR counts lexicon-category mentions against per-image ground-truth object
sets; BLEU is the standard corpus formulation with uniform n-gram weights and
brevity penalty; fluency is mean per-token negative log-likelihood under a
pluggable language-model scorer (reported perplexity-style numbers below 1.0
correspond to this definition, not exponentiated perplexity). Welch's t-test
and threshold-purity fractions back the score-separation analysis.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import stdtr

from .errors import DegenerateVarianceError
from .extraction import lexicon_extract
from .lexicon import Lexicon


@dataclass(frozen=True)
class AnnotatedResponse:
    """A response with its mentioned objects and binary hallucination labels."""

    image_id: str
    text: str
    mentions: tuple[tuple[str, int], ...]  # (phrase, label); label 1 = hallucinated

    def __post_init__(self):
        for phrase, label in self.mentions:
            if label not in (0, 1):
                raise ValueError(f"label for {phrase!r} must be 0 or 1, got {label}")


def annotate_with_lexicon(
    image_id: str, text: str, gt_objects: set[str], lexicon: Lexicon
) -> AnnotatedResponse:
    """Label each lexicon mention against the image's ground-truth object set."""
    mentions = []
    for phrase in lexicon_extract(text, lexicon):
        canon = lexicon.canonical(phrase)
        mentions.append((phrase, 0 if canon in gt_objects else 1))
    return AnnotatedResponse(image_id=image_id, text=text, mentions=tuple(mentions))


def chair(responses: Sequence[AnnotatedResponse]) -> tuple[float, float]:
    """(chair_s, chair_i): hallucinated-response rate and hallucinated-object rate."""
    total_objects = sum(len(r.mentions) for r in responses)
    if not responses or total_objects == 0:
        raise ValueError("chair needs at least one response with at least one object")
    hallucinated_objects = sum(label for r in responses for _, label in r.mentions)
    hallucinated_responses = sum(1 for r in responses if any(label for _, label in r.mentions))
    return hallucinated_responses / len(responses), hallucinated_objects / total_objects


def _ngram_counts(tokens: list[str], k: int) -> Counter:
    return Counter(tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1))


def _closest_ref_len(cand_len: int, ref_lens: list[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def bleu_n(candidate: str, references: Sequence[str], n: int) -> float:
    """Standard BLEU with uniform weights up to n and brevity penalty."""
    return corpus_bleu([(candidate, list(references))], n)


def corpus_bleu(pairs: Sequence[tuple[str, Sequence[str]]], n: int) -> float:
    """Corpus-level BLEU over (candidate, references) pairs.

    Uniform weights over the n-gram orders that have any candidate n-grams
    (effective order), so an exact copy scores 1.0 even when shorter than n.
    """
    if n not in (1, 2, 4):
        raise ValueError(f"n must be one of 1, 2, 4; got {n}")
    if not pairs:
        raise ValueError("no candidate/reference pairs")
    clipped = [0] * n
    totals = [0] * n
    cand_len = 0
    ref_len = 0
    for candidate, references in pairs:
        if not references:
            raise ValueError("references must be nonempty")
        cand = candidate.split()
        refs = [r.split() for r in references]
        if not cand:
            continue
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), [len(r) for r in refs])
        for k in range(1, n + 1):
            counts = _ngram_counts(cand, k)
            max_ref = Counter()
            for ref in refs:
                for gram, c in _ngram_counts(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], c)
            clipped[k - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0:
        return 0.0
    orders = [k for k in range(n) if totals[k] > 0]
    if not orders or any(clipped[k] == 0 for k in orders):
        return 0.0
    log_precision = sum(math.log(clipped[k] / totals[k]) for k in orders) / len(orders)
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


class LanguageModelScorer(Protocol):
    """Per-token natural-log probability scorer for fluency."""

    scorer_id: str

    def token_log_probs(self, text: str) -> Sequence[float]: ...


def fluency(scorer: LanguageModelScorer, text: str) -> float:
    """Mean negative log-likelihood per token; lower is more fluent."""
    if not text:
        raise ValueError("text must be nonempty")
    log_probs = list(scorer.token_log_probs(text))
    if not log_probs:
        raise ValueError("scorer returned no token log-probabilities")
    return -sum(log_probs) / len(log_probs)


class ToyModelScorer:
    """Fluency scorer backed by a toy captioner run text-only (zero image feature)."""

    def __init__(self, model, tokenizer):
        from .model import BOS  # local import keeps metrics importable without torch paths

        self._bos = BOS
        self.model = model
        self.tokenizer = tokenizer
        self.scorer_id = "toy-model"

    def token_log_probs(self, text: str) -> list[float]:
        import torch

        ids = [self._bos] + self.tokenizer.encode(text)
        feature = torch.zeros(self.model.config.d_img, dtype=self.model.config.torch_dtype())
        with torch.no_grad():
            lp = self.model.log_probs(feature, ids)
        return [float(lp[i, ids[i]]) for i in range(1, len(ids))]


class InformativenessJudge(Protocol):
    """Optional external judge scoring how well a caption covers the image.

    No client is bundled; when absent the report marks the column missing.
    """

    judge_id: str

    def judge(self, annotated_objects: Sequence[str], reference: str, candidate: str) -> float: ...


def welch_ttest(sample0: Sequence[float], sample1: Sequence[float]) -> tuple[float, float]:
    """Two-sample Welch t statistic and two-sided p-value."""
    a = np.asarray(sample0, dtype=float)
    b = np.asarray(sample1, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two observations")
    v0, v1 = a.var(ddof=1), b.var(ddof=1)
    se2 = v0 / a.size + v1 / b.size
    if se2 == 0.0:
        raise DegenerateVarianceError("both samples are constant; t statistic undefined")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2**2 / ((v0 / a.size) ** 2 / (a.size - 1) + (v1 / b.size) ** 2 / (b.size - 1))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return float(t), p


def threshold_purity(
    scored_labels: Sequence[tuple[float, int]], threshold: float
) -> tuple[float | None, float | None]:
    """(hallucinated fraction above T, non-hallucinated fraction below T).

    A side with no scores yields None for its fraction.
    """
    above = [label for score, label in scored_labels if score > threshold]
    below = [label for score, label in scored_labels if score < threshold]
    frac_hal_above = sum(above) / len(above) if above else None
    frac_clean_below = below.count(0) / len(below) if below else None
    return frac_hal_above, frac_clean_below


def density_export(scores: Sequence[float], bins: int) -> list[tuple[float, float, int, float]]:
    """Equal-width histogram rows (bin_lo, bin_hi, count, density) over [min, max]."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    arr = np.asarray(scores, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot bin an empty score list")
    counts, edges = np.histogram(arr, bins=bins)
    widths = np.diff(edges)
    return [
        (float(edges[i]), float(edges[i + 1]), int(counts[i]), float(counts[i] / (arr.size * widths[i])))
        for i in range(bins)
    ]


def write_histogram_csv(
    path: Path | str,
    rows: Sequence[tuple[float, float, int, float]],
    provenance: dict | None = None,
) -> None:
    """DSV histogram; provenance (config hash etc.) goes on a leading # line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if provenance:
            f.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count", "density"])
        writer.writerows(rows)


@dataclass
class EvalReport:
    chair_s: float
    chair_i: float
    bleu1: float
    bleu2: float
    bleu4: float
    fluency: float | None  # None = scorer unavailable, explicitly marked
    informativeness: float | None  # None = no judge configured
    n_responses: int
    n_objects: int
    metadata: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = dict(self.__dict__)
        rec["fluency"] = self.fluency if self.fluency is not None else "unavailable"
        rec["informativeness"] = (
            self.informativeness if self.informativeness is not None else "unavailable"
        )
        return rec
