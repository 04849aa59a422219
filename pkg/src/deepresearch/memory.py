"""Episodic memory: workflow units, hybrid retrieval scoring, consolidation.

Each stored unit is a compressed research workflow with question/caption
embeddings, a correct/incorrect label, and usage/success counters. Retrieval
scores every unit in a bucket on three axes:

    semantic similarity  Sim  = a_q * cos(q, q_i) + a_c * cos(c, c_i)
                         (question-only when either caption is absent),
                         min-max normalized within the bucket,
    value                Val  = s_i / (u_i + 1),
    frequency            Freq = 1 / (u_i + 1),

    score = w_sim * Sim_hat + w_val * Val + w_freq * Freq.

Retrieval returns both correct units (positive paradigms) and incorrect ones
(negative constraints). Consolidation replaces a near-duplicate unit in place
or inserts a new one; a separate meta-plan store keeps contrastive plan pairs
for routing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import EmbeddingProvider, check_unit_norm
from .errors import UnknownUnitError
from .records import read_jsonl, write_jsonl

LABEL_CORRECT = "correct"
LABEL_INCORRECT = "incorrect"

STORE_SCHEMA = "memory-store/1"
UNIT_SCHEMA = "memory-unit/1"
META_STORE_SCHEMA = "meta-plan-store/1"
META_PAIR_SCHEMA = "meta-plan-pair/1"

DEFAULT_REPLACE_THRESHOLD = 0.90


@dataclass
class RetrievalConfig:
    """Weights and counts for hybrid retrieval.

    The default similarity/value/frequency weights intentionally sum to 1.3;
    scores are relative within a bucket, so no renormalization is applied.
    """

    alpha_q: float = 0.8
    alpha_c: float = 0.2
    lambda_sim: float = 0.7
    lambda_val: float = 0.3
    lambda_freq: float = 0.3
    k_pos: int = 2
    k_neg: int = 1
    eps_norm: float = 1e-8

    def __post_init__(self):
        for name in ("alpha_q", "alpha_c", "lambda_sim", "lambda_val", "lambda_freq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class MemoryUnit:
    unit_id: int
    bucket: str
    question: str
    q_embedding: np.ndarray
    workflow: str
    label: str
    caption: Optional[str] = None
    c_embedding: Optional[np.ndarray] = None
    usage: int = 0
    success: int = 0
    created_seq: int = 0

    def __post_init__(self):
        if self.label not in (LABEL_CORRECT, LABEL_INCORRECT):
            raise ValueError(f"invalid label: {self.label!r}")
        if self.usage < 0 or self.success < 0:
            raise ValueError("counters must be >= 0")
        self.q_embedding = check_unit_norm(self.q_embedding)
        if self.c_embedding is not None:
            self.c_embedding = check_unit_norm(self.c_embedding)

    def to_json(self) -> dict:
        return {
            "schema": UNIT_SCHEMA,
            "id": self.unit_id,
            "bucket": self.bucket,
            "question": self.question,
            "q_embedding": [float(x) for x in self.q_embedding],
            "caption": self.caption,
            "c_embedding": None
            if self.c_embedding is None
            else [float(x) for x in self.c_embedding],
            "workflow": self.workflow,
            "label": self.label,
            "usage": self.usage,
            "success": self.success,
            "created_seq": self.created_seq,
        }

    @staticmethod
    def from_json(rec: dict) -> "MemoryUnit":
        return MemoryUnit(
            unit_id=rec["id"],
            bucket=rec["bucket"],
            question=rec["question"],
            q_embedding=np.asarray(rec["q_embedding"], dtype=np.float64),
            caption=rec.get("caption"),
            c_embedding=None
            if rec.get("c_embedding") is None
            else np.asarray(rec["c_embedding"], dtype=np.float64),
            workflow=rec["workflow"],
            label=rec["label"],
            usage=rec["usage"],
            success=rec["success"],
            created_seq=rec.get("created_seq", 0),
        )


@dataclass(frozen=True)
class ScoreBreakdown:
    sim_raw: float
    sim_norm: float
    value: float
    frequency: float


@dataclass(frozen=True)
class ScoredUnit:
    unit_id: int
    score: float
    breakdown: ScoreBreakdown


@dataclass
class MemoryContext:
    """Result of one retrieval: positive paradigms and negative constraints."""

    bucket: str = ""
    positives: list[MemoryUnit] = field(default_factory=list)
    negatives: list[MemoryUnit] = field(default_factory=list)

    @property
    def unit_ids(self) -> list[int]:
        return [u.unit_id for u in self.positives] + [u.unit_id for u in self.negatives]

    @property
    def empty(self) -> bool:
        return not self.positives and not self.negatives

    def to_json(self) -> dict:
        return {
            "bucket": self.bucket,
            "positives": [u.to_json() for u in self.positives],
            "negatives": [u.to_json() for u in self.negatives],
        }

    @staticmethod
    def from_json(rec: dict) -> "MemoryContext":
        return MemoryContext(
            bucket=rec["bucket"],
            positives=[MemoryUnit.from_json(u) for u in rec["positives"]],
            negatives=[MemoryUnit.from_json(u) for u in rec["negatives"]],
        )


@dataclass(frozen=True)
class WorkflowSummary:
    """Compression output destined for consolidation."""

    question: str
    workflow: str
    label: str
    caption: Optional[str] = None
    c_embedding: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ConsolidationOutcome:
    action: str  # "replaced" | "inserted"
    unit_id: int


@dataclass
class ClearPolicy:
    """Units matching all three conditions are removed by selective_clear."""

    label: str = LABEL_INCORRECT
    max_value: float = 0.25
    min_usage: int = 4

    def matches(self, unit: MemoryUnit) -> bool:
        value = unit.success / (unit.usage + 1)
        return unit.label == self.label and value < self.max_value and unit.usage >= self.min_usage


def value_reward(success: int, usage: int) -> float:
    return success / (usage + 1)


def frequency_reward(usage: int) -> float:
    return 1.0 / (usage + 1)


class MemoryStore:
    """Bucketed unit store. Single writer at a time; reads are lock-free."""

    def __init__(self, embedder: EmbeddingProvider):
        self.embedder = embedder
        self.units: dict[int, MemoryUnit] = {}
        self._next_id = 0
        self._next_seq = 0
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.units)

    def buckets(self) -> list[str]:
        return sorted({u.bucket for u in self.units.values()})

    def bucket_units(self, bucket: str) -> list[MemoryUnit]:
        return sorted(
            (u for u in self.units.values() if u.bucket == bucket), key=lambda u: u.unit_id
        )

    def add_unit(
        self,
        bucket: str,
        question: str,
        workflow: str,
        label: str,
        caption: Optional[str] = None,
        q_embedding: Optional[np.ndarray] = None,
        c_embedding: Optional[np.ndarray] = None,
    ) -> int:
        """Insert a fresh unit with counters at zero. Returns its id."""
        with self._write_lock:
            unit_id = self._next_id
            self._next_id += 1
            seq = self._next_seq
            self._next_seq += 1
            if q_embedding is None:
                q_embedding = self.embedder.encode(question)
            if c_embedding is None and caption is not None:
                c_embedding = self.embedder.encode(caption)
            unit = MemoryUnit(
                unit_id=unit_id,
                bucket=bucket,
                question=question,
                q_embedding=q_embedding,
                caption=caption,
                c_embedding=c_embedding,
                workflow=workflow,
                label=label,
                created_seq=seq,
            )
            self.units[unit_id] = unit
            return unit_id

    def score_all(
        self,
        query_q: str,
        query_c: Optional[str],
        bucket: str,
        cfg: RetrievalConfig,
    ) -> list[ScoredUnit]:
        """Score every unit in the bucket; sorted by descending score, then id."""
        units = self.bucket_units(bucket)
        if not units:
            return []
        q_vec = self.embedder.encode(query_q)
        c_vec = self.embedder.encode(query_c) if query_c is not None else None
        raw_sims = []
        for unit in units:
            sim_q = float(np.dot(q_vec, unit.q_embedding))
            if c_vec is not None and unit.c_embedding is not None:
                sim_c = float(np.dot(c_vec, unit.c_embedding))
                sim = cfg.alpha_q * sim_q + cfg.alpha_c * sim_c
            else:
                sim = sim_q
            raw_sims.append(sim)
        lo = min(raw_sims)
        hi = max(raw_sims)
        denom = hi - lo + cfg.eps_norm
        scored = []
        for unit, sim in zip(units, raw_sims):
            sim_norm = (sim - lo) / denom
            val = value_reward(unit.success, unit.usage)
            freq = frequency_reward(unit.usage)
            score = cfg.lambda_sim * sim_norm + cfg.lambda_val * val + cfg.lambda_freq * freq
            scored.append(
                ScoredUnit(
                    unit_id=unit.unit_id,
                    score=score,
                    breakdown=ScoreBreakdown(
                        sim_raw=sim, sim_norm=sim_norm, value=val, frequency=freq
                    ),
                )
            )
        scored.sort(key=lambda s: (-s.score, s.unit_id))
        return scored

    def retrieve(
        self,
        query_q: str,
        query_c: Optional[str],
        bucket: str,
        cfg: RetrievalConfig,
    ) -> MemoryContext:
        """Top correct and incorrect units by score; bumps usage of each hit."""
        scored = self.score_all(query_q, query_c, bucket, cfg)
        positives: list[MemoryUnit] = []
        negatives: list[MemoryUnit] = []
        for entry in scored:
            unit = self.units[entry.unit_id]
            if unit.label == LABEL_CORRECT and len(positives) < cfg.k_pos:
                positives.append(unit)
            elif unit.label == LABEL_INCORRECT and len(negatives) < cfg.k_neg:
                negatives.append(unit)
            if len(positives) >= cfg.k_pos and len(negatives) >= cfg.k_neg:
                break
        with self._write_lock:
            for unit in positives + negatives:
                unit.usage += 1
        return MemoryContext(bucket=bucket, positives=list(positives), negatives=list(negatives))

    def consolidate(
        self,
        summary: WorkflowSummary,
        embedding: np.ndarray,
        bucket: str,
        threshold: float = DEFAULT_REPLACE_THRESHOLD,
    ) -> ConsolidationOutcome:
        """Replace the most similar unit at/above threshold, else insert.

        Replacement overwrites content (question, caption, workflow, label,
        embeddings) but keeps the slot's id and counters: the slot still
        represents the same knowledge, and its value evidence stays.
        """
        embedding = check_unit_norm(embedding)
        with self._write_lock:
            units = [u for u in self.units.values() if u.bucket == bucket]
            best: Optional[MemoryUnit] = None
            best_sim = -np.inf
            for unit in sorted(units, key=lambda u: u.unit_id):
                sim = float(np.dot(embedding, unit.q_embedding))
                if sim > best_sim:
                    best_sim = sim
                    best = unit
            if best is not None and best_sim >= threshold:
                best.question = summary.question
                best.q_embedding = embedding
                best.caption = summary.caption
                best.c_embedding = (
                    check_unit_norm(summary.c_embedding)
                    if summary.c_embedding is not None
                    else (self.embedder.encode(summary.caption) if summary.caption else None)
                )
                best.workflow = summary.workflow
                best.label = summary.label
                return ConsolidationOutcome(action="replaced", unit_id=best.unit_id)
        new_id = self.add_unit(
            bucket=bucket,
            question=summary.question,
            workflow=summary.workflow,
            label=summary.label,
            caption=summary.caption,
            q_embedding=embedding,
            c_embedding=summary.c_embedding,
        )
        return ConsolidationOutcome(action="inserted", unit_id=new_id)

    def record_outcome(self, unit_ids: list[int], success: bool) -> None:
        """Credit the listed units after an episode; usage was bumped at retrieval."""
        missing = [i for i in unit_ids if i not in self.units]
        if missing:
            raise UnknownUnitError(f"unknown unit ids: {missing}")
        if not success:
            return
        with self._write_lock:
            for unit_id in unit_ids:
                self.units[unit_id].success += 1

    def selective_clear(self, policy: Optional[ClearPolicy] = None) -> int:
        """Drop units matching the policy; meta-plan pairs live elsewhere and survive."""
        policy = policy or ClearPolicy()
        with self._write_lock:
            doomed = [uid for uid, unit in self.units.items() if policy.matches(unit)]
            for uid in doomed:
                del self.units[uid]
            return len(doomed)

    def save(self, path: str | Path) -> None:
        header = {
            "schema": STORE_SCHEMA,
            "embedder": getattr(self.embedder, "describe", lambda: {"dim": self.embedder.dim})(),
            "next_id": self._next_id,
            "next_seq": self._next_seq,
        }
        rows = [header] + [
            self.units[uid].to_json() for uid in sorted(self.units.keys())
        ]
        write_jsonl(path, rows)

    @classmethod
    def load(cls, path: str | Path, embedder: EmbeddingProvider) -> "MemoryStore":
        rows = list(read_jsonl(path))
        if not rows or rows[0].get("schema") != STORE_SCHEMA:
            raise ValueError(f"not a memory store file: {path}")
        header = rows[0]
        saved_dim = header.get("embedder", {}).get("dim")
        if saved_dim is not None and saved_dim != embedder.dim:
            raise ValueError(
                f"store was built with dim {saved_dim}, embedder has dim {embedder.dim}"
            )
        store = cls(embedder)
        store._next_id = header["next_id"]
        store._next_seq = header.get("next_seq", header["next_id"])
        for rec in rows[1:]:
            unit = MemoryUnit.from_json(rec)
            store.units[unit.unit_id] = unit
        return store


@dataclass
class MetaPlanPair:
    """Contrastive pair: the shortest correct plan and one random incorrect plan."""

    question: str
    success_plan: str
    failed_plan: str
    q_embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.success_plan or not self.failed_plan:
            raise ValueError("both plans of a contrastive pair must be non-empty")

    def to_json(self) -> dict:
        return {
            "schema": META_PAIR_SCHEMA,
            "question": self.question,
            "success_plan": self.success_plan,
            "failed_plan": self.failed_plan,
            "q_embedding": None
            if self.q_embedding is None
            else [float(x) for x in self.q_embedding],
        }

    @staticmethod
    def from_json(rec: dict) -> "MetaPlanPair":
        return MetaPlanPair(
            question=rec["question"],
            success_plan=rec["success_plan"],
            failed_plan=rec["failed_plan"],
            q_embedding=None
            if rec.get("q_embedding") is None
            else np.asarray(rec["q_embedding"], dtype=np.float64),
        )


class MetaPlanStore:
    """Append-only store of contrastive plan pairs, searched by question similarity."""

    def __init__(self, embedder: EmbeddingProvider):
        self.embedder = embedder
        self.pairs: list[MetaPlanPair] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.pairs)

    def add(self, pair: MetaPlanPair) -> None:
        if pair.q_embedding is None:
            pair = replace(pair, q_embedding=self.embedder.encode(pair.question))
        with self._lock:
            self.pairs.append(pair)

    def save(self, path: str | Path) -> None:
        header = {
            "schema": META_STORE_SCHEMA,
            "embedder": getattr(self.embedder, "describe", lambda: {"dim": self.embedder.dim})(),
        }
        write_jsonl(path, [header] + [p.to_json() for p in self.pairs])

    @classmethod
    def load(cls, path: str | Path, embedder: EmbeddingProvider) -> "MetaPlanStore":
        rows = list(read_jsonl(path))
        if not rows or rows[0].get("schema") != META_STORE_SCHEMA:
            raise ValueError(f"not a meta plan store file: {path}")
        store = cls(embedder)
        for rec in rows[1:]:
            store.pairs.append(MetaPlanPair.from_json(rec))
        return store


def select_meta_examples(
    question: str, meta: MetaPlanStore, k: int
) -> list[MetaPlanPair]:
    """Top-k stored pairs by cosine similarity of originating questions."""
    if k < 1 or not meta.pairs:
        return []
    q_vec = meta.embedder.encode(question)
    scored = []
    for i, pair in enumerate(meta.pairs):
        vec = pair.q_embedding
        if vec is None:
            vec = meta.embedder.encode(pair.question)
        scored.append((float(np.dot(q_vec, vec)), i))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [meta.pairs[i] for _, i in scored[:k]]
