"""Deep research agent runtime.

A planner-executor-manager loop with episodic workflow memory, hybrid
retrieval, reflection-aware rewards, group-relative advantage signals, an
online test-time learning loop, and an unsupervised peer-review judge —
runnable end to end against deterministic scripted model backends.
"""

from .embedding import HashingEmbedder
from .gateway import (
    Backends,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    HttpBackend,
    ImageRef,
    RuleBackend,
    ScriptedBackend,
    TokenInfo,
)
from .memory import (
    ClearPolicy,
    MemoryContext,
    MemoryStore,
    MemoryUnit,
    MetaPlanPair,
    MetaPlanStore,
    RetrievalConfig,
    WorkflowSummary,
    select_meta_examples,
)
from .prompts import PromptLibrary
from .rl import (
    GrpoConfig,
    RolloutGroup,
    RolloutItem,
    executor_reward,
    export_training_signals,
    format_reward,
    group_advantages,
    grpo_objective,
    planner_reward,
    tool_reward,
)
from .runtime import (
    EpisodeOptions,
    EpisodeRecord,
    Limits,
    SeqClock,
    make_plan,
    reflect_replan,
    run_episode,
    run_executor,
)
from .tools import CorpusIndex, ImageCache, Observation, ToolEnv, parse_action
from .trajectory import Plan, Task, TokenRecord, Trajectory
from .ttl import TtlBatchConfig, extract_paradigms, rollout_group, route_final, run_ttl, ttl_step

__version__ = "0.1.0"
