"""Domain types shared by the runtime, RL arithmetic, and judging layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .gateway import ImageRef

SOURCE_POLICY = "policy"
SOURCE_TOOL = "tool"
SOURCE_PLANNER = "planner"
SOURCE_EXECUTOR = "executor"
SOURCES = (SOURCE_POLICY, SOURCE_TOOL, SOURCE_PLANNER, SOURCE_EXECUTOR)

KIND_THOUGHT = "thought"
KIND_TOOL_CALL = "tool_call"
KIND_OBSERVATION = "observation"
KIND_PLAN_INJECTION = "plan_injection"
KIND_ANSWER = "answer"
KINDS = (KIND_THOUGHT, KIND_TOOL_CALL, KIND_OBSERVATION, KIND_PLAN_INJECTION, KIND_ANSWER)

MODALITY_TEXT = "text"
MODALITY_MULTIMODAL = "multimodal"

SENTINEL_ANSWER = "unable to determine"


@dataclass
class Task:
    """One research question, optionally with an image and a gold answer."""

    task_id: str
    question: str
    image: Optional[ImageRef] = None
    gold: Optional[str] = None
    category: Optional[str] = None

    def __post_init__(self):
        if not self.question:
            raise ValueError("question must be non-empty")

    @property
    def modality(self) -> str:
        return MODALITY_MULTIMODAL if self.image is not None else MODALITY_TEXT


@dataclass
class Plan:
    """Planner output: chain of thought plus ordered plan steps.

    The revision slot holds the single replan supplement; at most one
    revision is ever attached.
    """

    cot: str
    steps: list[str]
    revision: Optional["Plan"] = None
    reflection_triggered: bool = False
    parse_fallback: bool = False
    raw: str = ""
    token_records: list[TokenRecord] = field(default_factory=list, repr=False, compare=False)

    def render(self) -> str:
        return "\n".join(f"{i}. {step}" for i, step in enumerate(self.steps, start=1))

    def active_steps(self) -> list[str]:
        return self.revision.steps if self.revision is not None else self.steps

    def to_json(self) -> dict:
        return {
            "cot": self.cot,
            "steps": self.steps,
            "revision": self.revision.to_json() if self.revision is not None else None,
            "reflection_triggered": self.reflection_triggered,
            "parse_fallback": self.parse_fallback,
        }


@dataclass(frozen=True)
class TokenRecord:
    """One trajectory token with source attribution and log-prob channels.

    The loss mask is derivable from attribution alone: only policy-sourced
    tokens train.
    """

    text: str
    source: str
    logp_cur: Optional[float] = None
    logp_old: Optional[float] = None
    logp_ref: Optional[float] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"invalid token source: {self.source!r}")

    @property
    def mask(self) -> int:
        return 1 if self.source == SOURCE_POLICY else 0

    def relabel(self, source: str) -> "TokenRecord":
        return TokenRecord(
            text=self.text,
            source=source,
            logp_cur=self.logp_cur,
            logp_old=self.logp_old,
            logp_ref=self.logp_ref,
        )

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "source": self.source,
            "mask": self.mask,
            "logp_cur": self.logp_cur,
            "logp_old": self.logp_old,
            "logp_ref": self.logp_ref,
        }


@dataclass
class TrajectoryStep:
    kind: str
    source: str
    text: str
    seq: int
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"invalid step kind: {self.kind!r}")
        if self.source not in SOURCES:
            raise ValueError(f"invalid step source: {self.source!r}")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "source": self.source,
            "text": self.text,
            "seq": self.seq,
            "payload": self.payload,
        }


@dataclass
class Trajectory:
    """Ordered episode steps with per-token source attribution.

    answer_intermediate is the answer at the first termination,
    answer_final the answer after the optional replanning resume; the two
    are equal when no reflection occurred.
    """

    task_id: str
    steps: list[TrajectoryStep] = field(default_factory=list)
    answer_intermediate: Optional[str] = None
    answer_final: Optional[str] = None
    assistant_turns: int = 0
    user_turns: int = 0
    aborted: bool = False
    token_records: list[TokenRecord] = field(default_factory=list)
    # Live conversation state for the replanning resume; never serialized.
    resume_messages: list = field(default_factory=list, repr=False, compare=False)

    def has_malformed_step(self) -> bool:
        return any(s.payload.get("malformed") for s in self.steps)

    def has_model_answer(self) -> bool:
        return any(
            s.kind == KIND_ANSWER and not s.payload.get("synthesized") for s in self.steps
        )

    def successful_tool_call(self) -> bool:
        """True when at least one parsed tool call produced a non-error observation."""
        for i, step in enumerate(self.steps):
            if step.kind != KIND_TOOL_CALL or step.payload.get("malformed"):
                continue
            for later in self.steps[i + 1 :]:
                if later.kind == KIND_OBSERVATION:
                    if not later.payload.get("is_error"):
                        return True
                    break
        return False

    def length(self, metric: str = "steps") -> int:
        if metric == "tokens":
            return len(self.token_records)
        return len(self.steps)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "steps": [s.to_json() for s in self.steps],
            "answer_intermediate": self.answer_intermediate,
            "answer_final": self.answer_final,
            "assistant_turns": self.assistant_turns,
            "user_turns": self.user_turns,
            "aborted": self.aborted,
            "token_records": [t.to_json() for t in self.token_records],
        }


def render_history(trajectory: Trajectory) -> str:
    """Deterministic text serialization of a trajectory for prompts."""
    if not trajectory.steps:
        return "(empty episode)"
    lines = []
    for i, step in enumerate(trajectory.steps, start=1):
        lines.append(f"[{i}] {step.kind} ({step.source}): {step.text}")
    return "\n".join(lines)
