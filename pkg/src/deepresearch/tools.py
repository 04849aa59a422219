"""Executor tool environment.

Two tools back the research loop: exact cosine text search over an embedded
passage corpus, and image search served from a content-hash-keyed result
cache. This module also owns the tag grammar the executing model emits
(<think> plus exactly one of <tool_call>/<answer>) and observation rendering
under a token budget.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .embedding import EmbeddingProvider, check_unit_norm
from .errors import EmptyIndexError
from .gateway import ImageRef
from .records import read_jsonl, split_preserving, write_jsonl

KNOWN_TOOLS = ("text_search", "image_search")
DEFAULT_TOP_K = 3
DEFAULT_RESPONSE_BUDGET = 4096
EMPTY_OBSERVATION_TEXT = "no results found"

_ACTION_RE = re.compile(
    r"\A\s*<think>(?P<think>.*?)</think>\s*"
    r"(?:<tool_call>(?P<tool>.*?)</tool_call>|<answer>(?P<answer>.*?)</answer>)\s*\Z",
    re.DOTALL,
)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict
    raw: str
    think: str = ""

    @property
    def query(self) -> str:
        return self.arguments.get("query", "")


@dataclass(frozen=True)
class FinalAnswer:
    text: str
    think: str = ""


@dataclass(frozen=True)
class Malformed:
    reason: str
    raw: str


Action = Union[ToolCall, FinalAnswer, Malformed]


def parse_action(model_output: str, known_tools: tuple[str, ...] = KNOWN_TOOLS) -> Action:
    """Classify raw model output into ToolCall, FinalAnswer, or Malformed.

    Total over arbitrary strings: never raises, Malformed is a value carrying
    a diagnostic.
    """
    if not isinstance(model_output, str):
        return Malformed(reason="output is not text", raw=repr(model_output))
    match = _ACTION_RE.match(model_output)
    if match is None:
        return Malformed(
            reason="output does not match <think>...</think> followed by exactly one "
            "<tool_call>...</tool_call> or <answer>...</answer>",
            raw=model_output,
        )
    think = match.group("think").strip()
    answer = match.group("answer")
    if answer is not None:
        return FinalAnswer(text=answer.strip(), think=think)
    body = match.group("tool")
    try:
        payload = json.loads(body)
    except json.JSONDecodeError as exc:
        return Malformed(reason=f"tool_call body is not valid JSON: {exc.msg}", raw=model_output)
    if not isinstance(payload, dict) or "name" not in payload or "arguments" not in payload:
        return Malformed(
            reason='tool_call body must be an object with "name" and "arguments" keys',
            raw=model_output,
        )
    name = payload["name"]
    arguments = payload["arguments"]
    if name not in known_tools:
        return Malformed(reason=f"unknown tool: {name!r}", raw=model_output)
    if not isinstance(arguments, dict):
        return Malformed(reason="arguments must be an object", raw=model_output)
    if name == "text_search":
        query = arguments.get("query")
        if not isinstance(query, str) or not query.strip():
            return Malformed(reason="text_search requires a non-empty query", raw=model_output)
    if name == "image_search":
        image = arguments.get("image")
        if not isinstance(image, str) or not image.strip():
            return Malformed(
                reason="image_search requires a non-empty image reference", raw=model_output
            )
    return ToolCall(name=name, arguments=arguments, raw=model_output, think=think)


@dataclass(frozen=True)
class SearchResult:
    title: str
    snippet: str
    url: Optional[str] = None
    score: Optional[float] = None

    def to_json(self) -> dict:
        rec: dict = {"title": self.title, "snippet": self.snippet}
        if self.url is not None:
            rec["url"] = self.url
        if self.score is not None:
            rec["score"] = self.score
        return rec

    @staticmethod
    def from_json(rec: dict) -> "SearchResult":
        return SearchResult(
            title=rec["title"],
            snippet=rec["snippet"],
            url=rec.get("url"),
            score=rec.get("score"),
        )


@dataclass
class Observation:
    tool: str
    results: list[SearchResult] = field(default_factory=list)
    truncated: bool = False
    cache_miss: bool = False
    error: Optional[str] = None

    @property
    def is_error(self) -> bool:
        return self.error is not None


class CorpusIndex:
    """Exact cosine nearest-neighbor index over unit-norm passage embeddings.

    Immutable after construction; safe for concurrent searches.
    """

    def __init__(self, ids: list[str], texts: list[str], matrix: np.ndarray):
        if len(ids) != len(texts) or matrix.shape[0] != len(ids):
            raise ValueError("ids, texts, and matrix rows must align")
        for row in matrix:
            check_unit_norm(row)
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self.ids = [ids[i] for i in order]
        self.texts = [texts[i] for i in order]
        self.matrix = np.asarray(matrix, dtype=np.float64)[order]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_texts(cls, docs: dict[str, str], embedder: EmbeddingProvider) -> "CorpusIndex":
        ids = list(docs.keys())
        texts = [docs[i] for i in ids]
        if ids:
            matrix = np.stack([embedder.encode(t) for t in texts])
        else:
            matrix = np.zeros((0, embedder.dim))
        return cls(ids=ids, texts=texts, matrix=matrix)

    @classmethod
    def load(cls, path: str | Path, embedder: EmbeddingProvider) -> "CorpusIndex":
        docs = {rec["id"]: rec["text"] for rec in read_jsonl(path)}
        return cls.from_texts(docs, embedder)

    @staticmethod
    def save_corpus(path: str | Path, docs: dict[str, str]) -> None:
        write_jsonl(path, ({"id": k, "text": v} for k, v in docs.items()))


def text_search(
    query: str, index: CorpusIndex, k: int, embedder: EmbeddingProvider
) -> Observation:
    """Top-k passages by cosine similarity, ties broken by ascending doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndexError("text search over an empty corpus index")
    query_vec = embedder.encode(query)
    sims = index.matrix @ query_vec
    ranked = sorted(range(len(index)), key=lambda i: (-float(sims[i]), index.ids[i]))
    top = ranked[: min(k, len(index))]
    results = [
        SearchResult(
            title=index.ids[i], snippet=index.texts[i], score=float(sims[i])
        )
        for i in top
    ]
    return Observation(tool="text_search", results=results)


class ImageCache:
    """Content-hash-keyed image search results, loaded once and then immutable.

    In offline mode a miss yields an empty observation with a miss marker; in
    live mode an optional fetch callable is consulted and transport failures
    surface as tool-error observations rather than aborting the episode.
    """

    def __init__(
        self,
        entries: Optional[dict[str, list[SearchResult]]] = None,
        live_fetch: Optional[Callable[[ImageRef], list[SearchResult]]] = None,
    ):
        self._entries = dict(entries or {})
        self.live_fetch = live_fetch
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, content_hash: str) -> Optional[list[SearchResult]]:
        return self._entries.get(content_hash)

    def put(self, content_hash: str, results: list[SearchResult]) -> None:
        with self._lock:
            self._entries[content_hash] = list(results)

    def save(self, path: str | Path) -> None:
        rows = [
            {"hash": h, "results": [r.to_json() for r in results]}
            for h, results in sorted(self._entries.items())
        ]
        write_jsonl(path, rows)

    @classmethod
    def load(cls, path: str | Path) -> "ImageCache":
        entries = {
            rec["hash"]: [SearchResult.from_json(r) for r in rec["results"]]
            for rec in read_jsonl(path)
        }
        return cls(entries=entries)


def image_search(image: ImageRef, cache: ImageCache, k: int) -> Observation:
    """Ranked cached results for the image's content hash."""
    if k < 1:
        raise ValueError("k must be >= 1")
    key = image.content_hash()
    cached = cache.get(key)
    if cached is not None:
        return Observation(tool="image_search", results=list(cached[:k]))
    if cache.live_fetch is None:
        return Observation(tool="image_search", results=[], cache_miss=True)
    try:
        fetched = cache.live_fetch(image)
    except Exception as exc:
        return Observation(tool="image_search", results=[], error=f"image search failed: {exc}")
    cache.put(key, fetched)
    return Observation(tool="image_search", results=list(fetched[:k]))


def render_observation(obs: Observation, budget: int) -> str:
    """Deterministic text rendering clipped to a whitespace-token budget.

    Sets obs.truncated when clipping occurred. Token counting uses the
    whitespace-split proxy; the artifact has no tokenizer.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if obs.error is not None:
        text = f"tool error: {obs.error}"
    elif not obs.results:
        text = EMPTY_OBSERVATION_TEXT
        if obs.cache_miss:
            text = EMPTY_OBSERVATION_TEXT + " (not in offline cache)"
    else:
        lines = []
        for i, result in enumerate(obs.results, start=1):
            suffix = f" ({result.url})" if result.url else ""
            lines.append(f"[{i}] {result.title}: {result.snippet}{suffix}")
        text = "\n".join(lines)
    chunks = split_preserving(text)
    if len(chunks) > budget:
        obs.truncated = True
        return "".join(chunks[:budget]).rstrip()
    return text


class HttpSearchClient:
    """Live text-search endpoint client (online mode, typically top-5)."""

    def __init__(self, endpoint: str, api_key: str = "", timeout: float = 30.0, session=None):
        import requests

        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self._session = session or requests.Session()

    def __call__(self, query: str, k: int) -> list[SearchResult]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = self._session.post(
            self.endpoint, json={"q": query, "k": k}, headers=headers, timeout=self.timeout
        )
        resp.raise_for_status()
        data = resp.json()
        return [
            SearchResult(
                title=r.get("title", ""), snippet=r.get("snippet", ""), url=r.get("url")
            )
            for r in data.get("results", [])[:k]
        ]


@dataclass
class ToolEnv:
    """Bundle of tool state handed to the executor loop.

    When a live search callable is configured it takes precedence over the
    local corpus index; its transport failures surface as tool-error
    observations and never abort the episode.
    """

    index: Optional[CorpusIndex]
    image_cache: ImageCache
    embedder: EmbeddingProvider
    top_k: int = DEFAULT_TOP_K
    response_budget: int = DEFAULT_RESPONSE_BUDGET
    live_search: Optional[Callable[[str, int], list[SearchResult]]] = None

    def run(self, call: ToolCall, task_image: Optional[ImageRef]) -> Observation:
        if call.name == "text_search":
            if self.live_search is not None:
                try:
                    results = self.live_search(call.query, self.top_k)
                except Exception as exc:
                    return Observation(
                        tool="text_search", results=[], error=f"live search failed: {exc}"
                    )
                return Observation(tool="text_search", results=results[: self.top_k])
            if self.index is None or len(self.index) == 0:
                return Observation(tool="text_search", results=[], error="no text corpus loaded")
            return text_search(call.query, self.index, self.top_k, self.embedder)
        if call.name == "image_search":
            if task_image is None:
                return Observation(
                    tool="image_search", results=[], error="no image available for this task"
                )
            return image_search(task_image, self.image_cache, self.top_k)
        return Observation(tool=call.name, results=[], error=f"unknown tool {call.name!r}")
