"""Reinforcement-learning arithmetic: rewards, advantages, objective, export.

Rewards are rule-based composites whose weights are all multiples of 0.05,
so they are computed in integer twentieths and converted to floats once;
equality checks against the hand tables are exact. The group-relative
objective is evaluated numerically over recorded log-probabilities; no
gradients, no weight updates. Scored groups leave the artifact through a
line-delimited signal export plus a hashed manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ExportError, MissingLogProbError, ZeroPolicyTokensError
from .records import canonical_dumps, sha256_file, write_jsonl
from .trajectory import Plan, TokenRecord, Trajectory

EXPORT_SCHEMA = "training-signals/1"
MANIFEST_SCHEMA = "training-signals-manifest/1"

ROLE_EXECUTOR = "executor"
ROLE_PLANNER = "planner"

DEFAULT_CLIP_EPS = 0.2
DEFAULT_ADV_EPS = 1e-4


@dataclass(frozen=True)
class RewardBreakdown:
    """Composite reward with exact integer-twentieths total."""

    role: str
    r1: int
    r2: int
    r3: int
    r1_intermediate: Optional[int] = None
    twentieths: int = 0

    @property
    def total(self) -> float:
        return self.twentieths / 20

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "r1": self.r1,
            "r2": self.r2,
            "r3": self.r3,
            "r1_intermediate": self.r1_intermediate,
            "twentieths": self.twentieths,
            "total": self.total,
        }


def executor_reward(judged_correct: bool, tool_ok: bool, format_ok: bool) -> RewardBreakdown:
    """0.7 * correctness + 0.2 * tool + 0.1 * format."""
    r1, r2, r3 = int(judged_correct), int(tool_ok), int(format_ok)
    return RewardBreakdown(
        role=ROLE_EXECUTOR, r1=r1, r2=r2, r3=r3, twentieths=14 * r1 + 4 * r2 + 2 * r3
    )


def planner_reward(
    final_correct: bool,
    intermediate_correct: bool,
    reflection_triggered: bool,
    first_interaction_correct: bool,
    format_ok: bool,
) -> RewardBreakdown:
    """0.7 * final + 0.2 * intermediate + 0.05 * reflection + 0.05 * format.

    The reflection component pays out when reflection was left untriggered
    after a correct first interaction, or triggered after an incorrect one.
    """
    r1 = int(final_correct)
    r1i = int(intermediate_correct)
    r2 = int(
        (first_interaction_correct and not reflection_triggered)
        or (not first_interaction_correct and reflection_triggered)
    )
    r3 = int(format_ok)
    return RewardBreakdown(
        role=ROLE_PLANNER,
        r1=r1,
        r2=r2,
        r3=r3,
        r1_intermediate=r1i,
        twentieths=14 * r1 + 4 * r1i + 1 * r2 + 1 * r3,
    )


def tool_reward(trajectory: Trajectory) -> int:
    """1 iff the trajectory contains a parsed tool call with a clean observation."""
    return int(trajectory.successful_tool_call())


def format_reward(trajectory: Trajectory) -> int:
    """1 iff every policy step matched the tag grammar and a final answer exists."""
    if trajectory.has_malformed_step():
        return 0
    if not trajectory.has_model_answer():
        return 0
    return int(trajectory.answer_final is not None)


def plan_format_reward(plan: Plan) -> int:
    """1 iff the plan (and its revision, if any) parsed without fallback."""
    if plan.parse_fallback:
        return 0
    if plan.revision is not None and plan.revision.parse_fallback:
        return 0
    return 1


def group_advantages(
    rewards: list[float], eps_adv: float = DEFAULT_ADV_EPS
) -> tuple[float, float, list[float]]:
    """Group-relative advantages: (r - mean) / (population std + eps)."""
    if not rewards:
        raise ValueError("reward list must be non-empty")
    n = len(rewards)
    if all(r == rewards[0] for r in rewards):
        # Exact zero for uniform groups; the float mean of n equal values
        # can otherwise land one ulp off and leak spurious advantages.
        return rewards[0], 0.0, [0.0] * n
    mu = math.fsum(rewards) / n
    var = math.fsum((r - mu) ** 2 for r in rewards) / n
    sigma = math.sqrt(var)
    advantages = [(r - mu) / (sigma + eps_adv) for r in rewards]
    return mu, sigma, advantages


@dataclass
class GrpoConfig:
    clip_eps: float = DEFAULT_CLIP_EPS
    kl_beta: float = 0.0
    group_size: int = 8
    adv_eps: float = DEFAULT_ADV_EPS
    sigma_mode: str = "population"  # or "sample"

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.sigma_mode not in ("population", "sample"):
            raise ValueError("sigma_mode must be population or sample")

    def to_json(self) -> dict:
        return {
            "clip_eps": self.clip_eps,
            "kl_beta": self.kl_beta,
            "group_size": self.group_size,
            "adv_eps": self.adv_eps,
            "sigma_mode": self.sigma_mode,
        }


@dataclass
class RolloutItem:
    plan: Optional[Plan]
    trajectory: Trajectory
    reward: RewardBreakdown


@dataclass
class RolloutGroup:
    """G plan-trajectory pairs with rewards, group statistics, and advantages."""

    items: list[RolloutItem]
    mu: float = 0.0
    sigma: float = 0.0
    advantages: list[float] = field(default_factory=list)
    eps_adv: float = DEFAULT_ADV_EPS

    @classmethod
    def compute(
        cls, items: list[RolloutItem], eps_adv: float = DEFAULT_ADV_EPS, sigma_mode: str = "population"
    ) -> "RolloutGroup":
        if not items:
            raise ValueError("a rollout group needs at least one item")
        rewards = [it.reward.total for it in items]
        mu, sigma, advantages = group_advantages(rewards, eps_adv)
        if sigma_mode == "sample" and len(rewards) > 1:
            var = sum((r - mu) ** 2 for r in rewards) / (len(rewards) - 1)
            sigma = math.sqrt(var)
            advantages = [(r - mu) / (sigma + eps_adv) for r in rewards]
        return cls(items=items, mu=mu, sigma=sigma, advantages=advantages, eps_adv=eps_adv)

    @property
    def rewards(self) -> list[float]:
        return [it.reward.total for it in self.items]


@dataclass
class ObjectiveReport:
    """Numeric evaluation of the clipped group-relative surrogate."""

    per_token_terms: list[list[float]]
    per_trajectory_means: list[float]
    group_value: float
    kl_value: float
    objective: float


def _require_logps(token: TokenRecord, index: tuple[int, int]) -> tuple[float, float, float]:
    if token.logp_cur is None or token.logp_old is None or token.logp_ref is None:
        raise MissingLogProbError(
            f"policy token {index} is missing a log-probability channel"
        )
    return token.logp_cur, token.logp_old, token.logp_ref


def grpo_objective(
    group: RolloutGroup,
    tokens: list[list[TokenRecord]],
    cfg: GrpoConfig,
) -> ObjectiveReport:
    """Evaluate the clipped surrogate with token-loss masking and KL penalty.

    Per policy token: ratio = exp(logp_cur - logp_old);
    term = min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A). Non-policy
    tokens are masked out entirely; the per-trajectory normalizer is the
    policy-token count. The KL penalty uses the non-negative estimator
    exp(d) - d - 1 with d = logp_ref - logp_cur, masked-mean aggregated the
    same way.
    """
    if len(tokens) != len(group.items):
        raise ValueError("token lists must align with group items")
    per_token_terms: list[list[float]] = []
    per_traj_means: list[float] = []
    per_traj_kls: list[float] = []
    for i, (advantage, traj_tokens) in enumerate(zip(group.advantages, tokens)):
        terms: list[float] = []
        kls: list[float] = []
        for t, token in enumerate(traj_tokens):
            if token.mask == 0:
                continue
            logp_cur, logp_old, logp_ref = _require_logps(token, (i, t))
            ratio = math.exp(logp_cur - logp_old)
            clipped = min(max(ratio, 1 - cfg.clip_eps), 1 + cfg.clip_eps)
            terms.append(min(ratio * advantage, clipped * advantage))
            d = logp_ref - logp_cur
            kls.append(math.exp(d) - d - 1)
        if not terms:
            raise ZeroPolicyTokensError(f"trajectory {i} has no policy tokens")
        per_token_terms.append(terms)
        per_traj_means.append(sum(terms) / len(terms))
        per_traj_kls.append(sum(kls) / len(kls))
    group_value = sum(per_traj_means) / len(per_traj_means)
    kl_value = sum(per_traj_kls) / len(per_traj_kls)
    return ObjectiveReport(
        per_token_terms=per_token_terms,
        per_trajectory_means=per_traj_means,
        group_value=group_value,
        kl_value=kl_value,
        objective=group_value - cfg.kl_beta * kl_value,
    )


def export_training_signals(
    group: RolloutGroup,
    tokens: list[list[TokenRecord]],
    destination: str | Path,
    cfg: GrpoConfig,
    task_id: str,
    role: str,
    metadata: Optional[dict] = None,
) -> dict:
    """Write per-rollout signal lines plus a manifest; returns the manifest.

    Every rollout in the group appears exactly once, including failed ones.
    Re-exporting identical inputs is byte-identical, so the manifest hash is
    stable.
    """
    if not group.items:
        raise ExportError("cannot export an empty rollout group")
    if len(tokens) != len(group.items):
        raise ExportError("token lists must align with group items")
    destination = Path(destination)
    rows = []
    for i, (item, advantage, traj_tokens) in enumerate(
        zip(group.items, group.advantages, tokens)
    ):
        rows.append(
            {
                "schema": EXPORT_SCHEMA,
                "task_id": task_id,
                "role": role,
                "rollout_index": i,
                "reward": item.reward.to_json(),
                "advantage": advantage,
                "group_mu": group.mu,
                "group_sigma": group.sigma,
                "aborted": item.trajectory.aborted,
                "tokens": [t.to_json() for t in traj_tokens],
                "config": cfg.to_json(),
                "metadata": metadata or {},
            }
        )
    count = write_jsonl(destination, rows)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "records": count,
        "sha256": sha256_file(destination),
        "export_file": destination.name,
        "config": cfg.to_json(),
        "metadata": metadata or {},
    }
    manifest_path = destination.with_name(destination.name + ".manifest.json")
    manifest_path.write_text(canonical_dumps(manifest) + "\n", encoding="utf-8")
    return manifest
