"""The planning-execution-reflection loop.

One episode runs: memory retrieval, captioning, planner prompt assembly,
the executor's tool-calling loop under turn limits, an at-most-once
replanning pass gated by a judgment (or by the planner's own analysis),
final judging, and full trajectory recording. All ordering uses logical
sequence numbers, never wall clocks, so identical inputs reproduce
byte-identical episode records.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .errors import DeepResearchError, TransportExhaustedError
from .gateway import Backends, ChatMessage, ChatResponse, Gateway
from .judging import (
    CorrectnessVerdict,
    UnsupervisedResult,
    VERDICT_INCORRECT,
    judge_correctness,
    unsupervised_verdict,
)
from .memory import MemoryContext, MemoryStore, RetrievalConfig, WorkflowSummary
from .prompts import (
    PromptLibrary,
    guideline_block,
    long_context_block,
    optional_caption_block,
    render_memory_block,
)
from .records import split_preserving
from .tools import FinalAnswer, Malformed, ToolCall, ToolEnv, parse_action, render_observation
from .trajectory import (
    KIND_ANSWER,
    KIND_OBSERVATION,
    KIND_PLAN_INJECTION,
    KIND_THOUGHT,
    KIND_TOOL_CALL,
    Plan,
    SENTINEL_ANSWER,
    SOURCE_PLANNER,
    SOURCE_POLICY,
    SOURCE_TOOL,
    Task,
    TokenRecord,
    Trajectory,
    TrajectoryStep,
    render_history,
)

MODE_NO_EXTRA = "no_extra"
MODE_LONG_CONTEXT = "long_context_memory"
MODE_GUIDELINE = "guideline"
PROMPT_MODES = (MODE_NO_EXTRA, MODE_LONG_CONTEXT, MODE_GUIDELINE)

SUPERVISED = "supervised"
UNSUPERVISED = "unsupervised"

REFLECT_JUDGER = "judger"
REFLECT_PLANNER = "planner"
REFLECT_OFF = "off"

DEFAULT_CATEGORIES = ("factual", "multi-hop", "numerical", "temporal", "general")
FALLBACK_CATEGORY = "general"

PLAN_FORMAT_REMINDER = (
    "Reminder: write your reasoning inside <think>...</think> and the plan inside "
    "<plan>...</plan>, one numbered step per line."
)
EXECUTOR_FORMAT_NOTICE = (
    "format error: emit <think>...</think> followed by exactly one "
    "<tool_call>...</tool_call> or <answer>...</answer>."
)
FALLBACK_PLAN_STEP = "answer directly"

_PLAN_RE = re.compile(
    r"\A\s*<think>(?P<think>.*?)</think>\s*<plan>(?P<plan>.*?)</plan>\s*\Z", re.DOTALL
)
_STEP_PREFIX_RE = re.compile(r"^\s*(?:\d+[.)]\s*|[-*]\s*)")
_DECISION_RE = re.compile(r"<decision>\s*(terminate|replan)\s*</decision>", re.IGNORECASE)


class SeqClock:
    """Monotonic logical clock ordering events within a run."""

    def __init__(self, start: int = 0):
        self._n = start

    def next(self) -> int:
        n = self._n
        self._n += 1
        return n


@dataclass
class Limits:
    assistant_turns: int = 10
    user_turns: int = 10


@dataclass
class EpisodeOptions:
    prompt_mode: str = MODE_GUIDELINE
    supervision: str = SUPERVISED
    reflection: str = REFLECT_JUDGER
    limits: Limits = field(default_factory=Limits)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    categories: tuple = DEFAULT_CATEGORIES
    plan_temperature: Optional[float] = None

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"invalid prompt mode: {self.prompt_mode!r}")
        if self.supervision not in (SUPERVISED, UNSUPERVISED):
            raise ValueError(f"invalid supervision: {self.supervision!r}")
        if self.reflection not in (REFLECT_JUDGER, REFLECT_PLANNER, REFLECT_OFF):
            raise ValueError(f"invalid reflection mode: {self.reflection!r}")


def tokens_from_response(response: ChatResponse) -> list[TokenRecord]:
    """Policy token records: backend-supplied when present, whitespace proxy otherwise."""
    if response.tokens:
        return [
            TokenRecord(text=t.text, source=SOURCE_POLICY, logp_old=t.logprob)
            for t in response.tokens
        ]
    return [TokenRecord(text=c, source=SOURCE_POLICY) for c in split_preserving(response.text)]


def proxy_tokens(text: str, source: str) -> list[TokenRecord]:
    return [TokenRecord(text=c, source=source) for c in split_preserving(text)]


def classify_category(
    question: str, gateway: Gateway, prompts: PromptLibrary, categories: tuple = DEFAULT_CATEGORIES
) -> str:
    prompt = prompts.render("category", question=question, labels=", ".join(categories))
    try:
        response = gateway.chat([ChatMessage(role="user", content=prompt)], purpose="category")
    except DeepResearchError:
        return FALLBACK_CATEGORY
    label = response.text.strip().lower()
    return label if label in categories else FALLBACK_CATEGORY


def bucket_key(modality: str, category: str) -> str:
    return f"{modality}/{category}"


def parse_plan_output(text: str) -> Optional[Plan]:
    match = _PLAN_RE.match(text)
    if match is None:
        return None
    steps = []
    for line in match.group("plan").splitlines():
        line = _STEP_PREFIX_RE.sub("", line).strip()
        if line:
            steps.append(line)
    if not steps:
        return None
    return Plan(cot=match.group("think").strip(), steps=steps, raw=text)


def make_plan(
    task: Task,
    memory: MemoryContext,
    gateway: Gateway,
    prompts: PromptLibrary,
    caption: Optional[str] = None,
    temperature: Optional[float] = None,
) -> Plan:
    """Render the planner prompt with memory paradigms and parse the plan.

    Malformed planner output gets one retry with a format reminder, then a
    single-step fallback plan.
    """
    positives = render_memory_block([(u.question, u.workflow) for u in memory.positives])
    negatives = render_memory_block([(u.question, u.workflow) for u in memory.negatives])
    prompt = prompts.render(
        "planner",
        question=task.question,
        caption_block=optional_caption_block(caption),
        positives=positives,
        negatives=negatives,
    )
    messages = [ChatMessage(role="user", content=prompt)]
    response = gateway.chat(messages, purpose="planner", temperature=temperature)
    plan = parse_plan_output(response.text)
    if plan is None:
        retry = messages + [
            ChatMessage(role="assistant", content=response.text),
            ChatMessage(role="user", content=PLAN_FORMAT_REMINDER),
        ]
        response = gateway.chat(retry, purpose="planner", temperature=temperature)
        plan = parse_plan_output(response.text)
    if plan is None:
        plan = Plan(cot="", steps=[FALLBACK_PLAN_STEP], parse_fallback=True, raw=response.text)
    plan.token_records = tokens_from_response(response)
    return plan


def _initial_messages(
    task: Task,
    plan: Optional[Plan],
    tools: ToolEnv,
    prompts: PromptLibrary,
    mode: str,
    memory_text: Optional[str],
) -> list[ChatMessage]:
    system = prompts.render("executor_system", top_k=str(tools.top_k))
    if mode == MODE_GUIDELINE and plan is not None:
        extra = guideline_block(plan.render())
    elif mode == MODE_LONG_CONTEXT and memory_text:
        extra = long_context_block(memory_text)
    else:
        extra = ""
    image_block = "An image is attached." if task.image is not None else ""
    user = prompts.render(
        "executor_user", extra_block=extra, question=task.question, image_block=image_block
    )
    return [
        ChatMessage(role="system", content=system),
        ChatMessage(role="user", content=user, image=task.image),
    ]


def inject_plan(trajectory: Trajectory, revised: Plan, seq: SeqClock) -> None:
    """Append the revised plan to the conversation as a planner-sourced step."""
    text = (
        "Here is a revised guide for your reference:\n"
        + revised.render()
        + "\nContinue your answer:\n"
    )
    trajectory.resume_messages.append(ChatMessage(role="user", content=text))
    trajectory.user_turns += 1
    trajectory.steps.append(
        TrajectoryStep(
            kind=KIND_PLAN_INJECTION,
            source=SOURCE_PLANNER,
            text=revised.render(),
            seq=seq.next(),
        )
    )
    trajectory.token_records.extend(proxy_tokens(text, SOURCE_PLANNER))


def run_executor(
    task: Task,
    plan: Optional[Plan],
    tools: ToolEnv,
    backend: Gateway,
    limits: Limits,
    prompts: PromptLibrary,
    seq: Optional[SeqClock] = None,
    mode: str = MODE_GUIDELINE,
    memory_text: Optional[str] = None,
    resume_from: Optional[Trajectory] = None,
) -> Trajectory:
    """Drive the executor's tool-calling loop until an answer or a limit.

    Malformed model output consumes an assistant turn and injects a
    corrective notice; exhausting either turn limit ends the episode with a
    sentinel answer. Transport exhaustion marks the trajectory aborted.
    """
    seq = seq or SeqClock()
    if resume_from is not None:
        trajectory = resume_from
        messages = trajectory.resume_messages
    else:
        trajectory = Trajectory(task_id=task.task_id)
        messages = _initial_messages(task, plan, tools, prompts, mode, memory_text)
        trajectory.resume_messages = messages

    answer: Optional[str] = None
    while True:
        if trajectory.assistant_turns >= limits.assistant_turns:
            answer = _synthesize_sentinel(trajectory, seq)
            break
        try:
            response = backend.chat(messages, purpose="executor")
        except TransportExhaustedError:
            trajectory.aborted = True
            break
        trajectory.assistant_turns += 1
        messages.append(ChatMessage(role="assistant", content=response.text))
        action = parse_action(response.text)
        trajectory.token_records.extend(tokens_from_response(response))

        if isinstance(action, FinalAnswer):
            trajectory.steps.append(
                TrajectoryStep(
                    kind=KIND_THOUGHT, source=SOURCE_POLICY, text=action.think, seq=seq.next()
                )
            )
            trajectory.steps.append(
                TrajectoryStep(
                    kind=KIND_ANSWER, source=SOURCE_POLICY, text=action.text, seq=seq.next()
                )
            )
            answer = action.text
            break

        if isinstance(action, ToolCall):
            trajectory.steps.append(
                TrajectoryStep(
                    kind=KIND_THOUGHT, source=SOURCE_POLICY, text=action.think, seq=seq.next()
                )
            )
            trajectory.steps.append(
                TrajectoryStep(
                    kind=KIND_TOOL_CALL,
                    source=SOURCE_POLICY,
                    text=action.raw,
                    seq=seq.next(),
                    payload={"tool": action.name, "arguments": action.arguments},
                )
            )
            observation = tools.run(action, task.image)
            rendered = render_observation(observation, tools.response_budget)
            if trajectory.user_turns >= limits.user_turns:
                answer = _synthesize_sentinel(trajectory, seq)
                break
            trajectory.user_turns += 1
            trajectory.steps.append(
                TrajectoryStep(
                    kind=KIND_OBSERVATION,
                    source=SOURCE_TOOL,
                    text=rendered,
                    seq=seq.next(),
                    payload={
                        "tool": observation.tool,
                        "is_error": observation.is_error,
                        "truncated": observation.truncated,
                        "cache_miss": observation.cache_miss,
                    },
                )
            )
            trajectory.token_records.extend(proxy_tokens(rendered, SOURCE_TOOL))
            messages.append(ChatMessage(role="user", content=f"Observation:\n{rendered}"))
            continue

        assert isinstance(action, Malformed)
        trajectory.steps.append(
            TrajectoryStep(
                kind=KIND_THOUGHT,
                source=SOURCE_POLICY,
                text=response.text,
                seq=seq.next(),
                payload={"malformed": True, "diagnostic": action.reason},
            )
        )
        if trajectory.user_turns >= limits.user_turns:
            answer = _synthesize_sentinel(trajectory, seq)
            break
        trajectory.user_turns += 1
        notice = EXECUTOR_FORMAT_NOTICE
        trajectory.steps.append(
            TrajectoryStep(
                kind=KIND_OBSERVATION,
                source=SOURCE_TOOL,
                text=notice,
                seq=seq.next(),
                payload={"is_error": True, "format_notice": True},
            )
        )
        trajectory.token_records.extend(proxy_tokens(notice, SOURCE_TOOL))
        messages.append(ChatMessage(role="user", content=f"Observation:\n{notice}"))

    if answer is not None:
        if trajectory.answer_intermediate is None:
            trajectory.answer_intermediate = answer
        trajectory.answer_final = answer
    return trajectory


def _synthesize_sentinel(trajectory: Trajectory, seq: SeqClock) -> str:
    trajectory.steps.append(
        TrajectoryStep(
            kind=KIND_ANSWER,
            source=SOURCE_POLICY,
            text=SENTINEL_ANSWER,
            seq=seq.next(),
            payload={"synthesized": True},
        )
    )
    return SENTINEL_ANSWER


def reflect_replan(
    task: Task,
    plan: Plan,
    trajectory: Trajectory,
    gateway: Gateway,
    prompts: PromptLibrary,
) -> Optional[Plan]:
    """Obtain the single revised plan; returns None when already triggered."""
    if trajectory.answer_final is None:
        raise ValueError("reflect_replan requires a trajectory with a final answer")
    if plan.reflection_triggered:
        return None
    prompt = prompts.render(
        "reflection",
        question=task.question,
        plan=plan.render(),
        history=render_history(trajectory),
    )
    messages = [ChatMessage(role="user", content=prompt)]
    response = gateway.chat(messages, purpose="reflect")
    revised = parse_plan_output(response.text)
    if revised is None:
        retry = messages + [
            ChatMessage(role="assistant", content=response.text),
            ChatMessage(role="user", content=PLAN_FORMAT_REMINDER),
        ]
        response = gateway.chat(retry, purpose="reflect")
        revised = parse_plan_output(response.text)
    if revised is None:
        revised = Plan(
            cot="", steps=[FALLBACK_PLAN_STEP], parse_fallback=True, raw=response.text
        )
    revised.token_records = tokens_from_response(response)
    plan.reflection_triggered = True
    plan.revision = revised
    return plan


def planner_decides_replan(
    task: Task,
    plan: Plan,
    trajectory: Trajectory,
    gateway: Gateway,
    prompts: PromptLibrary,
) -> tuple[bool, list[TokenRecord]]:
    """Ask the planning model whether to terminate or replan.

    Unparsable output defaults to terminate, so a confused model never
    spends the single replanning pass.
    """
    prompt = prompts.render(
        "reflect_decide",
        question=task.question,
        plan=plan.render(),
        history=render_history(trajectory),
        answer=trajectory.answer_final or "",
    )
    response = gateway.chat([ChatMessage(role="user", content=prompt)], purpose="reflect_decide")
    match = _DECISION_RE.search(response.text)
    decided = match is not None and match.group(1).lower() == "replan"
    return decided, tokens_from_response(response)


@dataclass
class ReflectionOutcome:
    intermediate_verdict: Optional[CorrectnessVerdict] = None
    intermediate_review: Optional[UnsupervisedResult] = None
    decision_tokens: list[TokenRecord] = field(default_factory=list)
    replanned: bool = False


def execute_with_reflection(
    task: Task,
    plan: Optional[Plan],
    tools: ToolEnv,
    backends: Backends,
    prompts: PromptLibrary,
    options: EpisodeOptions,
    seq: Optional[SeqClock] = None,
    mode: Optional[str] = None,
    memory_text: Optional[str] = None,
) -> tuple[Trajectory, ReflectionOutcome]:
    """Run the executor once, then apply the at-most-once replanning rule."""
    seq = seq or SeqClock()
    mode = mode or options.prompt_mode
    trajectory = run_executor(
        task,
        plan,
        tools,
        backends.executor,
        options.limits,
        prompts,
        seq=seq,
        mode=mode,
        memory_text=memory_text,
    )
    outcome = ReflectionOutcome()
    if trajectory.aborted or plan is None or options.reflection == REFLECT_OFF:
        return trajectory, outcome

    wants_replan = False
    if options.reflection == REFLECT_JUDGER:
        if options.supervision == SUPERVISED:
            outcome.intermediate_verdict = judge_correctness(
                task.question,
                trajectory.answer_final or "",
                task.gold,
                backends.manager,
                prompts,
            )
        else:
            outcome.intermediate_review = unsupervised_verdict(
                trajectory, task.question, backends.manager, prompts
            )
            outcome.intermediate_verdict = outcome.intermediate_review.verdict
        wants_replan = not outcome.intermediate_verdict.correct
    elif options.reflection == REFLECT_PLANNER:
        wants_replan, outcome.decision_tokens = planner_decides_replan(
            task, plan, trajectory, backends.planner, prompts
        )

    # Resuming needs budget for the injected plan and at least one more
    # model turn; an exhausted episode keeps its answer.
    has_budget = (
        trajectory.assistant_turns < options.limits.assistant_turns
        and trajectory.user_turns < options.limits.user_turns
    )
    if wants_replan and has_budget and not plan.reflection_triggered:
        reflect_replan(task, plan, trajectory, backends.planner, prompts)
        if plan.revision is not None:
            inject_plan(trajectory, plan.revision, seq)
            trajectory = run_executor(
                task,
                plan,
                tools,
                backends.executor,
                options.limits,
                prompts,
                seq=seq,
                mode=mode,
                memory_text=memory_text,
                resume_from=trajectory,
            )
            outcome.replanned = True
    return trajectory, outcome


@dataclass
class EpisodeRecord:
    """Everything one episode produced, serializable byte-deterministically."""

    task_id: str
    question: str
    prompt_mode: str
    supervision: str
    bucket: str
    caption: Optional[str]
    plan: Optional[Plan]
    trajectory: Trajectory
    memory: MemoryContext
    verdict_intermediate: Optional[CorrectnessVerdict]
    verdict_final: Optional[CorrectnessVerdict]
    review_final: Optional[UnsupervisedResult] = None
    review_intermediate: Optional[UnsupervisedResult] = None
    errors: list[str] = field(default_factory=list)

    @property
    def answer(self) -> Optional[str]:
        return self.trajectory.answer_final

    @property
    def reflection_triggered(self) -> bool:
        return self.plan.reflection_triggered if self.plan is not None else False

    def to_json(self) -> dict:
        return {
            "schema": "episode-record/1",
            "task_id": self.task_id,
            "question": self.question,
            "prompt_mode": self.prompt_mode,
            "supervision": self.supervision,
            "bucket": self.bucket,
            "caption": self.caption,
            "plan": self.plan.to_json() if self.plan is not None else None,
            "trajectory": self.trajectory.to_json(),
            "memory": self.memory.to_json(),
            "verdict_intermediate": self.verdict_intermediate.to_json()
            if self.verdict_intermediate
            else None,
            "verdict_final": self.verdict_final.to_json() if self.verdict_final else None,
            "review_final": self.review_final.to_json() if self.review_final else None,
            "review_intermediate": self.review_intermediate.to_json()
            if self.review_intermediate
            else None,
            "errors": self.errors,
            "answer": self.answer,
            "reflection_triggered": self.reflection_triggered,
        }


def resolve_bucket(
    task: Task,
    backends: Backends,
    prompts: PromptLibrary,
    categories: tuple = DEFAULT_CATEGORIES,
) -> str:
    category = task.category or classify_category(
        task.question, backends.manager, prompts, categories
    )
    return bucket_key(task.modality, category)


def run_episode(
    task: Task,
    store: MemoryStore,
    tools: ToolEnv,
    backends: Backends,
    prompts: PromptLibrary,
    options: Optional[EpisodeOptions] = None,
    seq: Optional[SeqClock] = None,
) -> EpisodeRecord:
    """Full episode: retrieve, caption, plan, execute, judge, record.

    Component failures are recorded on the episode record instead of being
    raised past it.
    """
    options = options or EpisodeOptions()
    seq = seq or SeqClock()
    errors: list[str] = []

    caption: Optional[str] = None
    if task.image is not None:
        try:
            caption = backends.manager.caption_image(task.image, prompts.render("caption"))
        except DeepResearchError as exc:
            errors.append(f"caption: {exc}")

    bucket = ""
    context = MemoryContext()
    if options.prompt_mode != MODE_NO_EXTRA:
        try:
            bucket = resolve_bucket(task, backends, prompts, options.categories)
            context = store.retrieve(task.question, caption, bucket, options.retrieval)
        except DeepResearchError as exc:
            errors.append(f"retrieval: {exc}")

    plan: Optional[Plan] = None
    if options.prompt_mode == MODE_GUIDELINE:
        try:
            plan = make_plan(
                task,
                context,
                backends.planner,
                prompts,
                caption=caption,
                temperature=options.plan_temperature,
            )
        except DeepResearchError as exc:
            errors.append(f"planner: {exc}")

    memory_text = None
    if options.prompt_mode == MODE_LONG_CONTEXT and not context.empty:
        blocks = [(u.question, u.workflow) for u in context.positives + context.negatives]
        memory_text = render_memory_block(blocks)

    trajectory, reflection = execute_with_reflection(
        task, plan, tools, backends, prompts, options, seq=seq, memory_text=memory_text
    )

    verdict_final: Optional[CorrectnessVerdict] = None
    review_final: Optional[UnsupervisedResult] = None
    if trajectory.answer_final is None:
        verdict_final = CorrectnessVerdict(
            verdict=VERDICT_INCORRECT, rationale="episode aborted without an answer"
        )
    elif options.supervision == SUPERVISED:
        try:
            verdict_final = judge_correctness(
                task.question, trajectory.answer_final, task.gold, backends.manager, prompts
            )
        except (DeepResearchError, ValueError) as exc:
            errors.append(f"judge: {exc}")
            verdict_final = CorrectnessVerdict(
                verdict=VERDICT_INCORRECT, rationale=f"judging failed: {exc}", parse_failure=True
            )
    else:
        try:
            review_final = unsupervised_verdict(
                trajectory, task.question, backends.manager, prompts
            )
            verdict_final = review_final.verdict
        except DeepResearchError as exc:
            errors.append(f"review: {exc}")
            verdict_final = CorrectnessVerdict(
                verdict=VERDICT_INCORRECT, rationale=f"review failed: {exc}", parse_failure=True
            )

    verdict_intermediate = reflection.intermediate_verdict
    if verdict_intermediate is None:
        # Without a replanning pass the two answers are the same, and so is
        # the judgment.
        verdict_intermediate = verdict_final

    return EpisodeRecord(
        task_id=task.task_id,
        question=task.question,
        prompt_mode=options.prompt_mode,
        supervision=options.supervision,
        bucket=bucket,
        caption=caption,
        plan=plan,
        trajectory=trajectory,
        memory=context,
        verdict_intermediate=verdict_intermediate,
        verdict_final=verdict_final,
        review_final=review_final,
        review_intermediate=reflection.intermediate_review,
        errors=errors,
    )


def compress_trajectory(
    task: Task,
    trajectory: Trajectory,
    outcome_label: str,
    gateway: Gateway,
    prompts: PromptLibrary,
    caption: Optional[str] = None,
) -> str:
    """Ask the manager model to compress an episode into a workflow summary."""
    prompt = prompts.render(
        "compress",
        question=task.question,
        caption_block=optional_caption_block(caption),
        outcome=outcome_label,
        history=render_history(trajectory),
    )
    response = gateway.chat([ChatMessage(role="user", content=prompt)], purpose="compress")
    return response.text.strip() or "(no summary)"


def apply_episode_to_memory(
    task: Task,
    record: EpisodeRecord,
    store: MemoryStore,
    backends: Backends,
    prompts: PromptLibrary,
    replace_threshold: float,
) -> Optional[str]:
    """Consolidate one finished episode into memory and credit retrieved units.

    Returns the consolidation action taken, or None when the episode has no
    usable trajectory.
    """
    if record.trajectory.answer_final is None or record.verdict_final is None:
        return None
    label = record.verdict_final.verdict
    workflow = compress_trajectory(
        task, record.trajectory, label, backends.manager, prompts, caption=record.caption
    )
    summary = WorkflowSummary(
        question=task.question, workflow=workflow, label=label, caption=record.caption
    )
    embedding = store.embedder.encode(task.question)
    bucket = record.bucket or bucket_key(task.modality, task.category or FALLBACK_CATEGORY)
    outcome = store.consolidate(summary, embedding, bucket, threshold=replace_threshold)
    if record.memory.unit_ids:
        store.record_outcome(record.memory.unit_ids, record.verdict_final.correct)
    return outcome.action
