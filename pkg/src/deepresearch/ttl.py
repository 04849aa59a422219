"""Online test-time learning loop.

Per task: the planner proposes G candidate plans against one retrieved
memory context, the executor rolls each out (with the planner itself
deciding any single replan), a router picks the final answer using
contrastive meta-plan examples and no gold information, and only then are
verdicts produced. Verdicts feed planner-style rewards, group-relative
advantages, paradigm extraction (shortest success, one seeded-random
failure), memory consolidation, and the training-signal export.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import TransportExhaustedError
from .gateway import Backends, ChatMessage
from .judging import (
    CorrectnessVerdict,
    VERDICT_CORRECT,
    VERDICT_INCORRECT,
    judge_correctness,
    unsupervised_verdict,
)
from .memory import (
    MemoryContext,
    MemoryStore,
    MetaPlanPair,
    MetaPlanStore,
    RetrievalConfig,
    WorkflowSummary,
    select_meta_examples,
)
from .prompts import PromptLibrary, render_meta_examples
from .rl import (
    GrpoConfig,
    RolloutGroup,
    RolloutItem,
    grpo_objective,
    export_training_signals,
    plan_format_reward,
    planner_reward,
)
from .runtime import (
    EpisodeOptions,
    Limits,
    MODE_GUIDELINE,
    REFLECT_PLANNER,
    SeqClock,
    SUPERVISED,
    UNSUPERVISED,
    compress_trajectory,
    execute_with_reflection,
    make_plan,
    resolve_bucket,
)
from .trajectory import (
    Plan,
    SOURCE_EXECUTOR,
    SOURCE_POLICY,
    Task,
    TokenRecord,
    Trajectory,
)

_INT_RE = re.compile(r"-?\d+")

LABEL_FROM_VERDICT = {True: "correct", False: "incorrect"}


@dataclass
class TtlBatchConfig:
    group_size: int = 4
    epochs: int = 1
    mode: str = SUPERVISED
    router_examples: int = 2
    plan_temperature: float = 0.7
    length_metric: str = "steps"
    replace_threshold: float = 0.90
    clear_after_batch: bool = False
    limits: Limits = field(default_factory=Limits)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    # Echoed into every signal export (e.g. downstream learning rate).
    export_metadata: dict = field(default_factory=dict)
    # Optional external trainer invoked after each export; its last stdout
    # line hot-swaps the planner backend's model identifier.
    trainer_command: Optional[str] = None

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in (SUPERVISED, UNSUPERVISED):
            raise ValueError(f"invalid mode: {self.mode!r}")


@dataclass
class TtlRollout:
    """One plan-trajectory pair inside a group."""

    index: int
    plan: Optional[Plan]
    trajectory: Trajectory
    decision_tokens: list[TokenRecord] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def usable(self) -> bool:
        return self.trajectory.answer_final is not None


@dataclass
class TtlGroup:
    task: Task
    rollouts: list[TtlRollout]
    context: MemoryContext
    caption: Optional[str]
    bucket: str


def rollout_group(
    task: Task,
    store: MemoryStore,
    tools,
    backends: Backends,
    prompts: PromptLibrary,
    cfg: TtlBatchConfig,
    seq: Optional[SeqClock] = None,
) -> TtlGroup:
    """Generate G candidate plans against one retrieved context and roll each out.

    Individual rollout failures are recorded on the rollout; the group
    proceeds as long as one rollout survives.
    """
    seq = seq or SeqClock()
    caption = None
    if task.image is not None:
        caption = backends.manager.caption_image(task.image, prompts.render("caption"))
    bucket = resolve_bucket(task, backends, prompts)
    context = store.retrieve(task.question, caption, bucket, cfg.retrieval)

    options = EpisodeOptions(
        prompt_mode=MODE_GUIDELINE,
        supervision=cfg.mode,
        reflection=REFLECT_PLANNER,
        limits=cfg.limits,
        retrieval=cfg.retrieval,
    )
    rollouts: list[TtlRollout] = []
    for i in range(cfg.group_size):
        try:
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
            rollouts.append(
                TtlRollout(
                    index=i,
                    plan=plan,
                    trajectory=trajectory,
                    decision_tokens=reflection.decision_tokens,
                )
            )
        except TransportExhaustedError as exc:
            aborted = Trajectory(task_id=task.task_id, aborted=True)
            rollouts.append(TtlRollout(index=i, plan=None, trajectory=aborted, error=str(exc)))
    return TtlGroup(task=task, rollouts=rollouts, context=context, caption=caption, bucket=bucket)


def route_final(
    group: TtlGroup,
    meta: MetaPlanStore,
    backends: Backends,
    prompts: PromptLibrary,
    router_examples: int,
) -> tuple[Optional[int], bool]:
    """Pick the final rollout via the router; returns (index, fallback flag).

    The router sees candidate plans and meta-plan examples only, never gold
    answers. Malformed or out-of-range output falls back to the first usable
    candidate.
    """
    usable = [r for r in group.rollouts if r.usable]
    if not usable:
        return None, True
    examples = select_meta_examples(group.task.question, meta, router_examples)
    rendered_examples = render_meta_examples(
        [(p.question, p.success_plan, p.failed_plan) for p in examples]
    )
    lines = []
    for r in usable:
        plan_text = r.plan.render() if r.plan is not None else "(no plan)"
        lines.append(f"Candidate {r.index}:\n{plan_text}")
    prompt = prompts.render(
        "router",
        question=group.task.question,
        meta_examples=rendered_examples,
        candidates="\n".join(lines),
        max_index=str(max(r.index for r in usable)),
    )
    response = backends.manager.chat(
        [ChatMessage(role="user", content=prompt)], purpose="router"
    )
    match = _INT_RE.search(response.text)
    usable_indices = {r.index for r in usable}
    if match is not None:
        choice = int(match.group(0))
        if choice in usable_indices:
            return choice, False
    return usable[0].index, True


@dataclass
class ParadigmExtraction:
    success_index: Optional[int] = None
    failed_index: Optional[int] = None
    pair: Optional[MetaPlanPair] = None


def extract_paradigms(
    group: TtlGroup,
    verdicts: list[CorrectnessVerdict],
    seed: int,
    length_metric: str = "steps",
) -> ParadigmExtraction:
    """Select the shortest success and one seeded-random failure.

    A contrastive plan pair is present exactly when both sets are non-empty.
    """
    if len(verdicts) != len(group.rollouts):
        raise ValueError("one verdict per rollout is required")
    successes = [r for r, v in zip(group.rollouts, verdicts) if v.correct and r.usable]
    failures = [r for r, v in zip(group.rollouts, verdicts) if not (v.correct and r.usable)]
    extraction = ParadigmExtraction()
    if successes:
        best = min(
            successes, key=lambda r: (r.trajectory.length(length_metric), r.index)
        )
        extraction.success_index = best.index
    if failures:
        rng = random.Random(seed)
        chosen = rng.choice(failures)
        extraction.failed_index = chosen.index
    if successes and failures:
        success = next(r for r in group.rollouts if r.index == extraction.success_index)
        failed = next(r for r in group.rollouts if r.index == extraction.failed_index)
        extraction.pair = MetaPlanPair(
            question=group.task.question,
            success_plan=success.plan.render() if success.plan else "(plan unavailable)",
            failed_plan=failed.plan.render() if failed.plan else "(plan unavailable)",
        )
    return extraction


def consolidate_ttl(
    extraction: ParadigmExtraction,
    group: TtlGroup,
    store: MemoryStore,
    meta: MetaPlanStore,
    backends: Backends,
    prompts: PromptLibrary,
    cfg: TtlBatchConfig,
    routed_success: bool,
) -> dict:
    """Compress and store the selected trajectories; update meta pairs and counters."""
    actions: dict = {"consolidations": [], "pair_stored": False}
    picks = []
    if extraction.success_index is not None:
        picks.append((extraction.success_index, "correct"))
    if extraction.failed_index is not None:
        picks.append((extraction.failed_index, "incorrect"))
    for index, label in picks:
        rollout = next(r for r in group.rollouts if r.index == index)
        if not rollout.trajectory.steps and rollout.trajectory.aborted:
            continue
        workflow = compress_trajectory(
            group.task,
            rollout.trajectory,
            label,
            backends.manager,
            prompts,
            caption=group.caption,
        )
        summary = WorkflowSummary(
            question=group.task.question,
            workflow=workflow,
            label=label,
            caption=group.caption,
        )
        embedding = store.embedder.encode(group.task.question)
        outcome = store.consolidate(
            summary, embedding, group.bucket, threshold=cfg.replace_threshold
        )
        actions["consolidations"].append({"label": label, "action": outcome.action})
    if extraction.pair is not None:
        meta.add(extraction.pair)
        actions["pair_stored"] = True
    if group.context.unit_ids:
        store.record_outcome(group.context.unit_ids, routed_success)
    return actions


def planner_view_tokens(rollout: TtlRollout) -> list[TokenRecord]:
    """Token stream from the planner's perspective.

    Planner generations (plan, replan decision, revision) are policy tokens;
    everything the executing model produced is relabeled executor so the
    loss mask excludes it.
    """
    tokens: list[TokenRecord] = []
    if rollout.plan is not None:
        tokens.extend(rollout.plan.token_records)
    for t in rollout.trajectory.token_records:
        tokens.append(t.relabel(SOURCE_EXECUTOR) if t.source == SOURCE_POLICY else t)
    tokens.extend(rollout.decision_tokens)
    if rollout.plan is not None and rollout.plan.revision is not None:
        tokens.extend(rollout.plan.revision.token_records)
    return tokens


def _eval_tokens_reuse_serving(tokens: list[TokenRecord]) -> Optional[list[TokenRecord]]:
    """Copy tokens with all three channels filled from the serving log-probs.

    Returns None when any policy token lacks a serving log-prob, in which
    case the objective is simply not evaluated for the group.
    """
    out = []
    for t in tokens:
        if t.mask == 0:
            out.append(t)
        elif t.logp_old is None:
            return None
        else:
            out.append(
                TokenRecord(
                    text=t.text,
                    source=t.source,
                    logp_cur=t.logp_old,
                    logp_old=t.logp_old,
                    logp_ref=t.logp_old,
                )
            )
    return out


@dataclass
class TtlStepReport:
    task_id: str
    epoch: int
    chosen_index: Optional[int]
    answer: Optional[str]
    answer_seq: int
    first_verdict_seq: Optional[int]
    router_fallback: bool
    verdicts: list[str]
    rewards: list[dict]
    advantages: list[float]
    mu: float
    sigma: float
    extraction: dict
    consolidation: dict
    export_manifest: Optional[dict]
    objective: Optional[float]
    errors: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": "ttl-step/1",
            "task_id": self.task_id,
            "epoch": self.epoch,
            "chosen_index": self.chosen_index,
            "answer": self.answer,
            "answer_seq": self.answer_seq,
            "first_verdict_seq": self.first_verdict_seq,
            "router_fallback": self.router_fallback,
            "verdicts": self.verdicts,
            "rewards": self.rewards,
            "advantages": self.advantages,
            "mu": self.mu,
            "sigma": self.sigma,
            "extraction": self.extraction,
            "consolidation": self.consolidation,
            "export_manifest": self.export_manifest,
            "objective": self.objective,
            "errors": self.errors,
        }


def _judge_rollout(
    rollout: TtlRollout,
    task: Task,
    mode: str,
    backends: Backends,
    prompts: PromptLibrary,
) -> tuple[CorrectnessVerdict, CorrectnessVerdict]:
    """Final and intermediate verdicts for one rollout, after answer emission."""
    traj = rollout.trajectory
    if traj.answer_final is None:
        missing = CorrectnessVerdict(
            verdict=VERDICT_INCORRECT, rationale="rollout aborted without an answer"
        )
        return missing, missing
    if mode == SUPERVISED:
        final = judge_correctness(
            task.question, traj.answer_final, task.gold, backends.manager, prompts
        )
        if traj.answer_intermediate == traj.answer_final:
            intermediate = final
        else:
            intermediate = judge_correctness(
                task.question, traj.answer_intermediate or "", task.gold, backends.manager, prompts
            )
        return final, intermediate
    result = unsupervised_verdict(traj, task.question, backends.manager, prompts)
    final = result.verdict
    if traj.answer_intermediate == traj.answer_final:
        intermediate = final
    else:
        # The planner itself deemed the first interaction unsatisfactory when
        # it chose to replan; without gold, that decision is the quality
        # signal for the intermediate answer.
        intermediate = CorrectnessVerdict(
            verdict=VERDICT_INCORRECT, rationale="superseded by planner-initiated replan"
        )
    return final, intermediate


def ttl_step(
    task: Task,
    store: MemoryStore,
    meta: MetaPlanStore,
    tools,
    backends: Backends,
    prompts: PromptLibrary,
    cfg: TtlBatchConfig,
    grpo_cfg: GrpoConfig,
    export_path: str | Path,
    seed: int,
    epoch: int = 1,
    clock: Optional[SeqClock] = None,
) -> TtlStepReport:
    """One online learning step; the answer is emitted before any verdict exists."""
    clock = clock or SeqClock()
    group = rollout_group(task, store, tools, backends, prompts, cfg, seq=clock)
    chosen_index, fallback = route_final(group, meta, backends, prompts, cfg.router_examples)
    chosen = next((r for r in group.rollouts if r.index == chosen_index), None)
    answer = chosen.trajectory.answer_final if chosen is not None else None
    answer_seq = clock.next()

    first_verdict_seq: Optional[int] = None
    finals: list[CorrectnessVerdict] = []
    intermediates: list[CorrectnessVerdict] = []
    for rollout in group.rollouts:
        if first_verdict_seq is None:
            first_verdict_seq = clock.next()
        final, intermediate = _judge_rollout(rollout, task, cfg.mode, backends, prompts)
        finals.append(final)
        intermediates.append(intermediate)

    items = []
    for rollout, final, intermediate in zip(group.rollouts, finals, intermediates):
        plan = rollout.plan
        reward = planner_reward(
            final_correct=final.correct,
            intermediate_correct=intermediate.correct,
            reflection_triggered=plan.reflection_triggered if plan else False,
            first_interaction_correct=intermediate.correct,
            format_ok=bool(plan) and plan_format_reward(plan) == 1,
        )
        items.append(
            RolloutItem(plan=plan, trajectory=rollout.trajectory, reward=reward)
        )
    rl_group = RolloutGroup.compute(items, eps_adv=grpo_cfg.adv_eps, sigma_mode=grpo_cfg.sigma_mode)

    routed_verdict = False
    if chosen is not None:
        routed_verdict = finals[group.rollouts.index(chosen)].correct

    extraction = extract_paradigms(group, finals, seed=seed, length_metric=cfg.length_metric)
    consolidation = consolidate_ttl(
        extraction, group, store, meta, backends, prompts, cfg, routed_success=routed_verdict
    )

    token_lists = [planner_view_tokens(r) for r in group.rollouts]
    metadata = dict(cfg.export_metadata)
    metadata.update({"epoch": epoch, "mode": cfg.mode})
    manifest = export_training_signals(
        rl_group,
        token_lists,
        export_path,
        grpo_cfg,
        task_id=task.task_id,
        role="planner",
        metadata=metadata,
    )
    trainer_error: Optional[str] = None
    if cfg.trainer_command:
        swapped, trainer_error = run_trainer_hook(
            cfg.trainer_command, export_path, backends.planner
        )

    objective = None
    eval_lists = [_eval_tokens_reuse_serving(toks) for toks in token_lists]
    if all(e is not None and any(t.mask for t in e) for e in eval_lists):
        try:
            objective = grpo_objective(rl_group, eval_lists, grpo_cfg).objective
        except Exception:
            objective = None

    errors = [r.error for r in group.rollouts if r.error]
    if cfg.trainer_command and trainer_error:
        errors.append(f"trainer: {trainer_error}")
    return TtlStepReport(
        task_id=task.task_id,
        epoch=epoch,
        chosen_index=chosen_index,
        answer=answer,
        answer_seq=answer_seq,
        first_verdict_seq=first_verdict_seq,
        router_fallback=fallback,
        verdicts=[v.verdict for v in finals],
        rewards=[it.reward.to_json() for it in items],
        advantages=rl_group.advantages,
        mu=rl_group.mu,
        sigma=rl_group.sigma,
        extraction={
            "success_index": extraction.success_index,
            "failed_index": extraction.failed_index,
            "pair_stored": extraction.pair is not None,
        },
        consolidation=consolidation,
        export_manifest=manifest,
        objective=objective,
        errors=errors,
    )


def run_trainer_hook(command: str, export_path: Path, planner) -> tuple[Optional[str], Optional[str]]:
    """Invoke an external trainer on an export; swap the planner model id.

    The export path is appended to the command. On exit 0, the last
    non-empty stdout line becomes the planner gateway's model identifier.
    Returns (new identifier or None, error message or None); failures are
    reported, never raised, so the learning loop keeps running.
    """
    import shlex
    import subprocess

    try:
        result = subprocess.run(
            shlex.split(command) + [str(export_path)],
            capture_output=True,
            text=True,
            timeout=600,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        return None, str(exc)
    if result.returncode != 0:
        return None, f"trainer exited {result.returncode}: {result.stderr.strip()[:200]}"
    lines = [line.strip() for line in result.stdout.splitlines() if line.strip()]
    if not lines:
        return None, "trainer produced no model identifier"
    planner.model = lines[-1]
    return lines[-1], None


def derive_seed(base: int, epoch: int, task_index: int) -> int:
    digest = hashlib.blake2b(
        f"{base}:{epoch}:{task_index}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


@dataclass
class TtlEpochReport:
    epoch: int
    accuracy: Optional[float]
    acceptance_rate: float
    memory_size: int
    meta_size: int
    inserts: int
    replacements: int
    router_fallbacks: int
    steps: int

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "accuracy": self.accuracy,
            "acceptance_rate": self.acceptance_rate,
            "memory_size": self.memory_size,
            "meta_size": self.meta_size,
            "inserts": self.inserts,
            "replacements": self.replacements,
            "router_fallbacks": self.router_fallbacks,
            "steps": self.steps,
        }


@dataclass
class TtlRunReport:
    epochs: list[TtlEpochReport] = field(default_factory=list)
    steps: list[TtlStepReport] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": "ttl-run/1",
            "epochs": [e.to_json() for e in self.epochs],
            "steps": [s.to_json() for s in self.steps],
        }


def run_ttl(
    tasks: list[Task],
    store: MemoryStore,
    meta: MetaPlanStore,
    tools,
    backends: Backends,
    prompts: PromptLibrary,
    cfg: TtlBatchConfig,
    grpo_cfg: GrpoConfig,
    export_dir: str | Path,
    seed: int = 0,
    start_epoch: int = 1,
    end_epoch: Optional[int] = None,
) -> TtlRunReport:
    """Iterate learning steps over the task list for the configured epochs.

    The store accumulates across epochs, so later passes plan with workflows
    earlier passes stored. Tasks run sequentially: the store mutates between
    steps and order is part of the online semantics.
    """
    export_dir = Path(export_dir)
    export_dir.mkdir(parents=True, exist_ok=True)
    report = TtlRunReport()
    last_epoch = cfg.epochs if end_epoch is None else end_epoch
    for epoch in range(start_epoch, last_epoch + 1):
        correct = 0
        gold_seen = 0
        accepted = 0
        inserts = 0
        replacements = 0
        fallbacks = 0
        for idx, task in enumerate(tasks):
            export_path = export_dir / f"signals_epoch{epoch}_task{idx}.jsonl"
            step = ttl_step(
                task,
                store,
                meta,
                tools,
                backends,
                prompts,
                cfg,
                grpo_cfg,
                export_path,
                seed=derive_seed(seed, epoch, idx),
                epoch=epoch,
            )
            report.steps.append(step)
            chosen_ok = (
                step.chosen_index is not None
                and step.verdicts[step.chosen_index] == VERDICT_CORRECT
            )
            if chosen_ok:
                accepted += 1
            if task.gold is not None:
                gold_seen += 1
                if chosen_ok:
                    correct += 1
            for action in step.consolidation.get("consolidations", []):
                if action["action"] == "inserted":
                    inserts += 1
                else:
                    replacements += 1
            if step.router_fallback:
                fallbacks += 1
            if cfg.clear_after_batch:
                store.selective_clear()
        n = len(tasks)
        report.epochs.append(
            TtlEpochReport(
                epoch=epoch,
                accuracy=(correct / gold_seen) if (gold_seen and cfg.mode == SUPERVISED) else None,
                acceptance_rate=(accepted / n) if n else 0.0,
                memory_size=len(store),
                meta_size=len(meta),
                inserts=inserts,
                replacements=replacements,
                router_fallbacks=fallbacks,
                steps=n,
            )
        )
    return report
