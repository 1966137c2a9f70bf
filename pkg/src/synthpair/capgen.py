"""Synthetic caption creation: class-based LLM prompting, an offline template
grammar, and the byte-level caption tokenizer."""
from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Make up a human-annotated description of an image that contains the following object: "
    "[object]. The caption should be around 30-40 words long. Describe the different components "
    "of the scene in an objective and unbiased way. Do not add subjective judgments about the "
    "image, it should be as factual as possible. Do not use fluffy, poetic language. Respond only "
    "with the caption itself, beginning with ``This is an image of''."
)
CAPTION_PREFIX = "This is an image of"

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259
MAX_LEN = 64
SOURCES = ("human", "llm", "template")


class VocabularyError(KeyError):
    pass


class CaptionValidationError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class LLMEndpointError(RuntimeError):
    """Transport failure, timeout, or an unparseable body. Always retryable."""

    retryable = True

    def __init__(self, message: str, raw: str | bytes | None = None):
        super().__init__(message)
        self.raw = raw


# -- tokenizer ---------------------------------------------------------------

def tokenize_bytes(data: bytes, max_len: int = MAX_LEN) -> list[int]:
    if max_len < 2:
        raise ValueError("max_len must leave room for BOS and EOS")
    return [BOS, *data[: max_len - 2], EOS]


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    out = bytearray()
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i < 256:
            out.append(i)
    return bytes(out)


def tokenize(text: str, max_len: int = MAX_LEN) -> list[int]:
    """UTF-8 bytes framed by BOS/EOS; truncated to ``max_len`` with EOS kept last."""
    return tokenize_bytes(text.encode("utf-8"), max_len)


def detokenize(ids: Iterable[int]) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


def pad_ids(ids: Sequence[int], length: int = MAX_LEN) -> np.ndarray:
    arr = np.full(length, PAD, dtype=np.int64)
    arr[: min(len(ids), length)] = list(ids)[:length]
    return arr


# -- records -----------------------------------------------------------------

@dataclass
class CaptionRecord:
    text: str
    class_label: str
    source: str
    token_ids: list[int] = field(default_factory=list)
    seed: int | None = None
    slots: dict | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown caption source {self.source!r}")
        if not self.token_ids:
            self.token_ids = tokenize(self.text)
        if len(self.token_ids) > MAX_LEN:
            raise ValueError(f"caption has {len(self.token_ids)} tokens (max {MAX_LEN})")

    def to_json(self) -> dict:
        return {"text": self.text, "class": self.class_label, "source": self.source, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "CaptionRecord":
        return cls(text=obj["text"], class_label=obj.get("class", ""), source=obj.get("source", "human"),
                   seed=obj.get("seed"))


def write_jsonl(path: str | Path, records: Iterable[CaptionRecord]) -> int:
    n = 0
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[CaptionRecord]:
    with open(path) as f:
        return [CaptionRecord.from_json(json.loads(line)) for line in f if line.strip()]


# -- class vocabulary --------------------------------------------------------

@dataclass
class ClassVocabulary:
    names: list[str]
    weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.names:
            raise ValueError("class vocabulary is empty")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if len(self.weights) != len(self.names) or abs(self.weights.sum() - 1.0) > 1e-9:
                raise ValueError("weights must match names and sum to 1")

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return len(self.names)

    def sample(self, rng: np.random.Generator) -> str:
        return self.names[int(rng.choice(len(self.names), p=self.weights))]

    @classmethod
    def from_file(cls, path: str | Path) -> "ClassVocabulary":
        with open(path) as f:
            return cls([line.strip() for line in f if line.strip()])

    @classmethod
    def default(cls) -> "ClassVocabulary":
        text = resources.files("synthpair").joinpath("data/classes.txt").read_text()
        return cls([line.strip() for line in text.splitlines() if line.strip()])

    @classmethod
    def zipf(cls, names: list[str], exponent: float = 1.5) -> "ClassVocabulary":
        w = 1.0 / np.arange(1, len(names) + 1) ** exponent
        return cls(list(names), w / w.sum())


# -- prompting ---------------------------------------------------------------

def build_prompt(class_name: str) -> str:
    if not class_name or not class_name.strip():
        raise ValueError("class name must be non-empty")
    return PROMPT_TEMPLATE.replace("[object]", class_name)


@dataclass(frozen=True)
class TemplateSlots:
    spatial: tuple[str, ...] = ("at top left", "at top right", "at lower left", "at lower right",
                                "in the middle", "near the edge", "in the background", "up front")
    colors: tuple[str, ...] = ("in red", "in green", "in blue", "in yellow", "in cyan", "in pink",
                               "in white", "in orange", "in gray", "in brown")
    counts: tuple[str, ...] = ("alone", "with one other", "in a small group", "in a pair", "among many")


DEFAULT_SLOTS = TemplateSlots()


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def generate_caption_template(class_name: str, rng: np.random.Generator,
                              vocabulary: ClassVocabulary | None = None,
                              slots: TemplateSlots = DEFAULT_SLOTS) -> CaptionRecord:
    """Offline caption: prefix, article, class, spatial, color and count clauses.

    An empty count phrase drops the trailing clause.
    """
    if vocabulary is not None and class_name not in vocabulary:
        raise VocabularyError(class_name)
    spatial = slots.spatial[int(rng.integers(len(slots.spatial)))]
    color = slots.colors[int(rng.integers(len(slots.colors)))]
    count = slots.counts[int(rng.integers(len(slots.counts)))]
    text = f"{CAPTION_PREFIX} {_article(class_name)} {class_name} {spatial} {color}"
    text += f", {count}." if count else "."
    return CaptionRecord(text=text, class_label=class_name, source="template",
                         slots={"spatial": spatial, "color": color, "count": count})


# -- LLM client --------------------------------------------------------------

class LLMClient:
    """Generic JSON chat-completion client.

    Sends ``{"model", "messages": [{"role": "user", "content": prompt}]}`` and
    accepts either an OpenAI-style ``choices[0].message.content`` or a flat
    ``text``/``content`` field. Bodies are capped at ``max_bytes``.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str = "default", timeout: float = 30.0, max_bytes: int = 1024):
        self.endpoint = endpoint or os.environ.get("LLM_ENDPOINT")
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        if not self.endpoint:
            raise ValueError("no LLM endpoint configured (set LLM_ENDPOINT)")
        self.model = model
        self.timeout = timeout
        self.max_bytes = max_bytes

    def complete(self, prompt: str, timeout: float | None = None) -> str:
        body = json.dumps({"model": self.model,
                           "messages": [{"role": "user", "content": prompt}]}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout or self.timeout) as resp:
                raw = resp.read(self.max_bytes + 1)
        except (urllib.error.URLError, TimeoutError, OSError) as e:
            raise LLMEndpointError(f"request to {self.endpoint} failed: {e}") from e
        if len(raw) > self.max_bytes:
            raise LLMEndpointError(f"response exceeds {self.max_bytes} bytes", raw[: self.max_bytes])
        return parse_completion(raw)


def parse_completion(raw: bytes | str) -> str:
    try:
        obj = json.loads(raw)
        if "choices" in obj:
            choice = obj["choices"][0]
            text = choice["message"]["content"] if "message" in choice else choice["text"]
        else:
            text = obj.get("text", obj.get("content"))
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise LLMEndpointError(f"malformed completion body: {e}", raw) from e
    if not isinstance(text, str):
        raise LLMEndpointError("completion body carries no text", raw)
    return text.strip()


def generate_caption_llm(client, class_name: str, timeout: float | None = None,
                         retries: int = 3) -> CaptionRecord:
    """Prompt ``client`` for one caption. Transport errors retry up to ``retries`` attempts."""
    prompt = build_prompt(class_name)
    last: LLMEndpointError | None = None
    for attempt in range(retries):
        try:
            text = client.complete(prompt, timeout=timeout)
            break
        except LLMEndpointError as e:
            log.warning("LLM attempt %d/%d for %r failed: %s", attempt + 1, retries, class_name, e)
            last = e
    else:
        raise last
    if not text.startswith(CAPTION_PREFIX):
        raise CaptionValidationError(f"caption does not start with {CAPTION_PREFIX!r}", text)
    return CaptionRecord(text=text, class_label=class_name, source="llm")


def generate_captions(vocabulary: ClassVocabulary, n: int, seed: int, source: str = "template",
                      client=None, workers: int = 4, slots: TemplateSlots = DEFAULT_SLOTS
                      ) -> list[CaptionRecord]:
    """Generate ``n`` captions; worker ``w`` draws from ``seed + w``.

    Records are split into contiguous per-worker blocks, so the result is a
    pure function of (vocabulary, n, seed, workers).
    """
    blocks = np.array_split(np.arange(n), max(1, workers))

    def run(worker: int) -> list[CaptionRecord]:
        rng = np.random.default_rng(seed + worker)
        out = []
        for _ in blocks[worker]:
            cls = vocabulary.sample(rng)
            if source == "template":
                rec = generate_caption_template(cls, rng, vocabulary, slots)
            elif source == "llm":
                rec = generate_caption_llm(client, cls)
            else:
                raise ValueError(f"unknown source {source!r}")
            rec.seed = seed + worker
            out.append(rec)
        return out

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(run, range(len(blocks))))
    return [r for part in parts for r in part]
