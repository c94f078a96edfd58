"""Object-mention extraction from captions, with character-span alignment.

Two interchangeable backends: a deterministic lexicon scanner (default, no
network) and a remote LLM client. Either way, phrases are aligned to exact
character spans so downstream loss masking stays precise; phrases the backend
invents that do not occur in the caption are dropped, never fuzzily matched.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

import httpx

from .errors import ExtractionError
from .lexicon import Lexicon

log = logging.getLogger(__name__)

ImageRef = str

# Prompt sent to a remote extraction model. This wording is this toolkit's
# own; adjust via the prompt_template argument if your endpoint needs another.
DEFAULT_EXTRACTION_PROMPT = (
    "List every physical object mentioned in the caption below. "
    "Reply with one object phrase per line and nothing else.\n\n"
    "Caption: {caption}"
)


@dataclass(frozen=True)
class CaptionRecord:
    """One image + prompt + generated caption; the unit of curation."""

    image_id: str
    prompt: str
    caption: str
    image: ImageRef | None = None

    def __post_init__(self):
        if not self.caption:
            raise ValueError("caption must be nonempty")


@dataclass(frozen=True)
class ObjectMention:
    """An object phrase with its [start, end) character span in the caption."""

    phrase: str
    start: int
    end: int
    gold_label: int | None = None  # 1 = hallucinated, 0 = grounded, None = unknown

    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


class ExtractorBackend(Protocol):
    def extract(self, caption: str) -> list[str]: ...


def _word_spans(text: str) -> list[tuple[int, int]]:
    """[start, end) spans of maximal alphanumeric (plus apostrophe) runs."""
    spans = []
    start = None
    for i, ch in enumerate(text):
        if ch.isalnum() or ch == "'":
            if start is None:
                start = i
        elif start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(text)))
    return spans


def lexicon_extract(caption: str, lexicon: Lexicon) -> list[str]:
    """All maximal lexicon surface-form matches on word boundaries, left to right.

    Multi-word surface forms win over shorter ones starting at the same word.
    Returns the matched caption substrings verbatim.
    """
    spans = _word_spans(caption)
    out: list[str] = []
    i = 0
    while i < len(spans):
        matched = 0
        for width in range(min(lexicon.max_words, len(spans) - i), 0, -1):
            start = spans[i][0]
            end = spans[i + width - 1][1]
            surface = " ".join(caption[a:b] for a, b in spans[i : i + width]).lower()
            if lexicon.canonical(surface) is not None:
                out.append(caption[start:end])
                matched = width
                break
        i += matched if matched else 1
    return out


def _find_unclaimed(caption: str, phrase: str, claimed: list[tuple[int, int]]) -> tuple[int, int] | None:
    """Leftmost word-boundary occurrence of phrase not overlapping a claimed span."""
    lower = caption.lower()
    needle = phrase.lower()
    if not needle:
        return None
    pos = 0
    while True:
        start = lower.find(needle, pos)
        if start < 0:
            return None
        end = start + len(needle)
        before = caption[start - 1] if start > 0 else " "
        after = caption[end] if end < len(caption) else " "
        on_boundary = not (before.isalnum() or after.isalnum())
        overlaps = any(s < end and start < e for s, e in claimed)
        if on_boundary and not overlaps:
            return (start, end)
        pos = start + 1


def extract_objects(
    backend: ExtractorBackend,
    record: CaptionRecord,
    dropped: list[str] | None = None,
) -> list[ObjectMention]:
    """Extract object mentions and align each to its leftmost unclaimed occurrence.

    Backend phrases that cannot be aligned (the backend violated its contract)
    are dropped with a warning; pass ``dropped`` to collect them. The result is
    ordered by span start and spans never overlap.
    """
    try:
        phrases = backend.extract(record.caption)
    except ExtractionError:
        raise
    except Exception as exc:
        raise ExtractionError(f"extractor backend failed on image {record.image_id}: {exc}") from exc

    claimed: list[tuple[int, int]] = []
    mentions: list[ObjectMention] = []
    for phrase in phrases:
        span = _find_unclaimed(record.caption, phrase, claimed)
        if span is None:
            log.warning("phrase %r not found in caption for image %s; dropped", phrase, record.image_id)
            if dropped is not None:
                dropped.append(phrase)
            continue
        claimed.append(span)
        mentions.append(ObjectMention(phrase=phrase, start=span[0], end=span[1]))
    mentions.sort(key=lambda m: m.start)
    return mentions


class LexiconExtractorBackend:
    """Deterministic fallback extractor backed by a category lexicon."""

    def __init__(self, lexicon: Lexicon | None = None):
        self.lexicon = lexicon if lexicon is not None else Lexicon.bundled()

    def extract(self, caption: str) -> list[str]:
        return lexicon_extract(caption, self.lexicon)


@dataclass
class RemoteExtractorConfig:
    endpoint: str
    model: str
    token: str | None = None  # pass credentials via environment, not config files
    prompt_template: str = DEFAULT_EXTRACTION_PROMPT
    max_inflight: int = 4
    retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 30.0


class RemoteExtractorBackend:
    """LLM-endpoint extractor; bounds in-flight requests and retries idempotently.

    Wire format: POST ``{"model", "prompt"}`` -> ``{"phrases": [...]}``.
    """

    def __init__(self, config: RemoteExtractorConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._sem = threading.Semaphore(config.max_inflight)
        headers = {}
        if config.token:
            headers["Authorization"] = f"Bearer {config.token}"
        self._client = httpx.Client(timeout=config.timeout_s, headers=headers, transport=transport)

    def extract(self, caption: str) -> list[str]:
        body = {
            "model": self.config.model,
            "prompt": self.config.prompt_template.format(caption=caption),
        }
        last_error: Exception | None = None
        with self._sem:
            for attempt in range(self.config.retries + 1):
                if attempt:
                    time.sleep(self.config.backoff_s * attempt)
                try:
                    resp = self._client.post(self.config.endpoint, json=body)
                    if resp.status_code >= 500:
                        last_error = ExtractionError(f"server error {resp.status_code}")
                        continue
                    resp.raise_for_status()
                    phrases = resp.json().get("phrases")
                    if not isinstance(phrases, list) or not all(isinstance(p, str) for p in phrases):
                        raise ExtractionError("malformed extractor response: expected a 'phrases' list")
                    return phrases
                except httpx.TransportError as exc:
                    last_error = exc
                    continue
                except httpx.HTTPStatusError as exc:
                    raise ExtractionError(f"extractor request rejected: {exc}") from exc
        raise ExtractionError(f"extractor endpoint unreachable after retries: {last_error}")

    def close(self):
        self._client.close()
