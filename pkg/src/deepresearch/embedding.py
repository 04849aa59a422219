"""Text embedding providers.

Retrieval math only assumes unit-norm vectors from a deterministic encoder,
so the default provider is a feature-hashing character n-gram embedder: pure,
dependency-free, and stable across platforms. Live runs can plug an HTTP
embedding endpoint behind the same protocol.
"""

from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np

from .errors import EmbeddingError, MalformedResponseError, TransientTransportError

UNIT_NORM_TOL = 1e-6


class EmbeddingProvider(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


def check_unit_norm(vector: np.ndarray, tol: float = UNIT_NORM_TOL) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if abs(norm - 1.0) > tol:
        raise EmbeddingError(f"vector norm {norm} is not within {tol} of 1")
    return vector


class HashingEmbedder:
    """Deterministic character n-gram feature hashing with L2 normalization.

    encode() is a pure function of the input text; identical texts always map
    to identical unit vectors.
    """

    def __init__(self, dim: int = 64, ngram: int = 3):
        if dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.dim = dim
        self.ngram = ngram

    def _features(self, text: str):
        norm = " ".join(text.lower().split())
        padded = f" {norm} "
        n = self.ngram
        if len(padded) < n:
            yield padded
            return
        for i in range(len(padded) - n + 1):
            yield padded[i : i + n]

    def encode(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for gram in self._features(text):
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "big")
            idx = h % self.dim
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vec[idx] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm

    def describe(self) -> dict:
        return {"kind": "hashing", "dim": self.dim, "ngram": self.ngram}


def build_embedding_payload(texts: list[str], model: str) -> dict:
    """Encode an embedding request in the de-facto /embeddings HTTP body."""
    return {"model": model, "input": texts}


def parse_embedding_payload(data: dict, dim: int) -> list[np.ndarray]:
    try:
        rows = sorted(data["data"], key=lambda r: r["index"])
        vectors = [np.asarray(r["embedding"], dtype=np.float64) for r in rows]
    except (KeyError, TypeError) as exc:
        raise MalformedResponseError(f"unparsable embedding payload: {exc}") from exc
    out = []
    for vec in vectors:
        if vec.shape != (dim,):
            raise MalformedResponseError(
                f"embedding dimension {vec.shape} does not match configured {dim}"
            )
        norm = float(np.linalg.norm(vec))
        out.append(vec / norm if norm > 0 else vec)
    return out


class HttpEmbedder:
    """Live embedding endpoint client; normalizes returned vectors to unit norm."""

    def __init__(self, base_url: str, dim: int, api_key: str = "", model: str = "default", timeout: float = 60.0, session=None):
        import requests

        self.base_url = base_url.rstrip("/")
        self.dim = dim
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self._session = session or requests.Session()

    def encode(self, text: str) -> np.ndarray:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session.post(
                self.base_url + "/embeddings",
                json=build_embedding_payload([text], self.model),
                headers=headers,
                timeout=self.timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientTransportError(str(exc)) from exc
        if resp.status_code >= 400:
            raise MalformedResponseError(f"HTTP {resp.status_code}")
        return parse_embedding_payload(resp.json(), self.dim)[0]

    def describe(self) -> dict:
        return {"kind": "http", "dim": self.dim, "model": self.model}
