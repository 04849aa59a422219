"""Offline two-stage alternating rollout drivers.

Stage 1 collects executor rollouts against a frozen planning model: per
rollout, a plan, the tool-calling episode with judger-gated single replan,
an executor-style composite reward, and group-relative advantages; planner-
and tool-sourced tokens are masked out of the export. Stage 2 freezes the
executing model and collects planner rollouts conditioned on frozen memory
context snapshots, scored with the reflection-aware planner reward; executor
and tool tokens are masked out. Both stages end at scored exports — weight
updates happen outside this artifact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .gateway import Backends
from .judging import CorrectnessVerdict, VERDICT_INCORRECT, judge_correctness
from .memory import MemoryContext, MemoryStore, RetrievalConfig
from .prompts import PromptLibrary
from .records import read_jsonl, write_jsonl
from .rl import (
    GrpoConfig,
    RolloutGroup,
    RolloutItem,
    executor_reward,
    export_training_signals,
    format_reward,
    plan_format_reward,
    planner_reward,
    tool_reward,
)
from .runtime import (
    EpisodeOptions,
    Limits,
    MODE_GUIDELINE,
    REFLECT_JUDGER,
    REFLECT_PLANNER,
    SUPERVISED,
    SeqClock,
    apply_episode_to_memory,
    execute_with_reflection,
    make_plan,
    run_episode,
)
from .trajectory import Task
from .ttl import TtlRollout, planner_view_tokens

CONTEXT_SCHEMA = "stage2-context/1"

STAGE_EXECUTOR = "executor"
STAGE_PLANNER = "planner"


@dataclass
class StageConfig:
    stage: str
    frozen_backend: str
    trainable_backend: str
    group_size: int = 8
    batch_size: int = 128  # export metadata only
    plan_temperature: float = 0.7
    replace_threshold: float = 0.90
    # Stage-1 planning is question-only by default; captions are opt-in.
    include_caption: bool = False
    limits: Limits = field(default_factory=Limits)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)

    def __post_init__(self):
        if self.stage not in (STAGE_EXECUTOR, STAGE_PLANNER):
            raise ValueError(f"invalid stage: {self.stage!r}")
        if self.frozen_backend == self.trainable_backend:
            raise ValueError("frozen and trainable backends must be distinct identifiers")

    def metadata(self) -> dict:
        return {
            "stage": self.stage,
            "frozen_backend": self.frozen_backend,
            "trainable_backend": self.trainable_backend,
            "batch_size": self.batch_size,
        }


def stage1_rollout(
    task: Task,
    store: MemoryStore,
    tools,
    backends: Backends,
    prompts: PromptLibrary,
    cfg: StageConfig,
    grpo_cfg: GrpoConfig,
    export_path: str | Path,
) -> tuple[RolloutGroup, dict]:
    """Collect G executor trajectories, reward them, and export the signals.

    Training is supervised: the mid-episode judgment that gates the single
    replan and the final correctness reward both use the gold answer.
    """
    if task.gold is None:
        raise ValueError("stage-1 rollouts require a gold answer")
    options = EpisodeOptions(
        prompt_mode=MODE_GUIDELINE,
        supervision=SUPERVISED,
        reflection=REFLECT_JUDGER,
        limits=cfg.limits,
        retrieval=cfg.retrieval,
    )
    caption = None
    if cfg.include_caption and task.image is not None:
        caption = backends.manager.caption_image(task.image, prompts.render("caption"))
    seq = SeqClock()
    items: list[RolloutItem] = []
    token_lists = []
    for _ in range(cfg.group_size):
        plan = make_plan(
            task,
            MemoryContext(),
            backends.planner,
            prompts,
            caption=caption,
            temperature=cfg.plan_temperature,
        )
        trajectory, _ = execute_with_reflection(
            task, plan, tools, backends, prompts, options, seq=seq
        )
        if trajectory.answer_final is None:
            verdict = CorrectnessVerdict(
                verdict=VERDICT_INCORRECT, rationale="rollout aborted without an answer"
            )
        else:
            verdict = judge_correctness(
                task.question, trajectory.answer_final, task.gold, backends.manager, prompts
            )
        reward = executor_reward(
            judged_correct=verdict.correct,
            tool_ok=tool_reward(trajectory) == 1,
            format_ok=format_reward(trajectory) == 1,
        )
        items.append(RolloutItem(plan=plan, trajectory=trajectory, reward=reward))
        token_lists.append(list(trajectory.token_records))
    group = RolloutGroup.compute(items, eps_adv=grpo_cfg.adv_eps, sigma_mode=grpo_cfg.sigma_mode)
    manifest = export_training_signals(
        group,
        token_lists,
        export_path,
        grpo_cfg,
        task_id=task.task_id,
        role=STAGE_EXECUTOR,
        metadata=cfg.metadata(),
    )
    return group, manifest


def collect_stage2_contexts(
    tasks: list[Task],
    store: MemoryStore,
    tools,
    backends: Backends,
    prompts: PromptLibrary,
    cfg: StageConfig,
    archive_path: str | Path,
    options: Optional[EpisodeOptions] = None,
) -> list[dict]:
    """Run episodes to populate the store and snapshot each task's context.

    The snapshot is the retrieval the episode itself used, taken before its
    consolidation, so the first task of an empty store archives an empty
    context and later tasks see accumulated workflows. The archive file is
    written once and treated as immutable.
    """
    options = options or EpisodeOptions(
        prompt_mode=MODE_GUIDELINE,
        supervision=SUPERVISED,
        reflection=REFLECT_JUDGER,
        limits=cfg.limits,
        retrieval=cfg.retrieval,
    )
    rows = []
    for task in tasks:
        record = run_episode(task, store, tools, backends, prompts, options)
        rows.append(
            {
                "schema": CONTEXT_SCHEMA,
                "task_id": task.task_id,
                "bucket": record.bucket,
                "caption": record.caption,
                "context": record.memory.to_json(),
            }
        )
        apply_episode_to_memory(
            task, record, store, backends, prompts, replace_threshold=cfg.replace_threshold
        )
    write_jsonl(archive_path, rows)
    return rows


def load_stage2_contexts(archive_path: str | Path) -> dict[str, dict]:
    contexts = {}
    for rec in read_jsonl(archive_path):
        if rec.get("schema") != CONTEXT_SCHEMA:
            raise ValueError(f"not a stage-2 context archive: {archive_path}")
        contexts[rec["task_id"]] = rec
    return contexts


def stage2_rollout(
    task: Task,
    archived_context: dict,
    tools,
    backends: Backends,
    prompts: PromptLibrary,
    cfg: StageConfig,
    grpo_cfg: GrpoConfig,
    export_path: str | Path,
) -> tuple[RolloutGroup, dict]:
    """Collect G planner rollouts against one frozen memory context.

    Every rollout in the group is conditioned on the same archived context so
    that group-relative advantages compare like with like. The planner
    decides its own single replan; intermediate and final answers are judged
    against gold for the reflection-aware reward.
    """
    if task.gold is None:
        raise ValueError("stage-2 rollouts require a gold answer")
    context = MemoryContext.from_json(archived_context["context"])
    caption = archived_context.get("caption")
    options = EpisodeOptions(
        prompt_mode=MODE_GUIDELINE,
        supervision=SUPERVISED,
        reflection=REFLECT_PLANNER,
        limits=cfg.limits,
        retrieval=cfg.retrieval,
    )
    seq = SeqClock()
    items: list[RolloutItem] = []
    token_lists = []
    for i in range(cfg.group_size):
        plan = make_plan(
            task,
            context,
            backends.planner,
            prompts,
            caption=caption,
            temperature=cfg.plan_temperature,
        )
        trajectory, reflection = execute_with_reflection(
            task, plan, tools, backends, prompts, options, seq=seq
        )
        if trajectory.answer_final is None:
            final = CorrectnessVerdict(
                verdict=VERDICT_INCORRECT, rationale="rollout aborted without an answer"
            )
            intermediate = final
        else:
            final = judge_correctness(
                task.question, trajectory.answer_final, task.gold, backends.manager, prompts
            )
            if trajectory.answer_intermediate == trajectory.answer_final:
                intermediate = final
            else:
                intermediate = judge_correctness(
                    task.question,
                    trajectory.answer_intermediate or "",
                    task.gold,
                    backends.manager,
                    prompts,
                )
        reward = planner_reward(
            final_correct=final.correct,
            intermediate_correct=intermediate.correct,
            reflection_triggered=plan.reflection_triggered,
            first_interaction_correct=intermediate.correct,
            format_ok=plan_format_reward(plan) == 1,
        )
        items.append(RolloutItem(plan=plan, trajectory=trajectory, reward=reward))
        rollout_view = TtlRollout(
            index=i, plan=plan, trajectory=trajectory, decision_tokens=reflection.decision_tokens
        )
        token_lists.append(planner_view_tokens(rollout_view))
    group = RolloutGroup.compute(items, eps_adv=grpo_cfg.adv_eps, sigma_mode=grpo_cfg.sigma_mode)
    manifest = export_training_signals(
        group,
        token_lists,
        export_path,
        grpo_cfg,
        task_id=task.task_id,
        role=STAGE_PLANNER,
        metadata=cfg.metadata(),
    )
    return group, manifest
