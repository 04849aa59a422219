"""Shared fixtures: scripted model worlds, tool environments, task factories."""

import json

import pytest

from deepresearch.embedding import HashingEmbedder
from deepresearch.gateway import Backends, Gateway, RuleBackend
from deepresearch.memory import MemoryStore, MetaPlanStore
from deepresearch.prompts import PromptLibrary
from deepresearch.tools import CorpusIndex, ImageCache, SearchResult, ToolEnv
from deepresearch.trajectory import Task

# Distinctive markers of each prompt template, used as rule keys.
PLANNER_MARK = "You are the planning agent of a deep research assistant"
EXECUTOR_MARK = "You are a research execution agent"
REFLECT_MARK = "Reflect on what went wrong"
DECIDE_MARK = "reviewing a finished execution attempt"
JUDGE_MARK = "You are a strict grader"
CAPTION_MARK = "Describe the key entities"
COMPRESS_MARK = "You are the memory manager"
ROUTER_MARK = "You are the routing agent"
CATEGORY_MARK = "Classify the question into exactly one category"
LOGIC_MARK = "reasoning and logical consistency reviewer"
CRED_MARK = "information sourcing and credibility reviewer"
VALID_MARK = "result validity reviewer"
AC_MARK = "You are the area chair"


def think_tool(query: str) -> str:
    body = json.dumps({"name": "text_search", "arguments": {"query": query}})
    return f"<think>searching</think><tool_call>{body}</tool_call>"


def think_answer(answer: str, think: str = "done") -> str:
    return f"<think>{think}</think><answer>{answer}</answer>"


def plan_text(*steps: str, think: str = "planning") -> str:
    numbered = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, start=1))
    return f"<think>{think}</think><plan>{numbered}</plan>"


def clean_report(score: float = 0.9) -> str:
    return json.dumps({"score": score, "findings": []})


def fatal_report(evidence: str = "fabricated claim", score: float = 0.2) -> str:
    return json.dumps(
        {
            "score": score,
            "findings": [{"severity": "fatal", "evidence": evidence, "note": "hallucination"}],
        }
    )


def accept_decision() -> str:
    return json.dumps({"accept": True, "rationale": "clean reports"})


def reject_decision() -> str:
    return json.dumps({"accept": False, "rationale": "major issues"})


@pytest.fixture
def embedder():
    return HashingEmbedder(dim=16)


@pytest.fixture
def prompts():
    return PromptLibrary.default()


@pytest.fixture
def corpus_env(embedder):
    docs = {
        "d1": "the iron tower in paris is 324 meters tall",
        "d2": "the great wall of china is thousands of kilometers long",
        "d3": "honey never spoils because of its low moisture",
    }
    index = CorpusIndex.from_texts(docs, embedder)
    cache = ImageCache(
        entries={
            "deadbeef": [SearchResult(title="img1", snippet="a tall tower", url="http://x/1")]
        }
    )
    return ToolEnv(index=index, image_cache=cache, embedder=embedder, top_k=3)


class ScriptedWorld:
    """One rule backend shared by all three roles, plus empty stores."""

    def __init__(self, embedder, prompts, tools):
        self.backend = RuleBackend()
        self.gateway = Gateway(self.backend)
        self.backends = Backends.single(self.gateway)
        self.embedder = embedder
        self.prompts = prompts
        self.tools = tools
        self.store = MemoryStore(embedder)
        self.meta = MetaPlanStore(embedder)

    def rule(self, contains, responses):
        self.backend.add_rule(contains, responses)

    def default_manager_rules(self):
        self.rule(CATEGORY_MARK, "general")
        self.rule(CAPTION_MARK, "a tall iron tower at night")
        self.rule(COMPRESS_MARK, "1. searched the corpus\n2. answered from the top passage")
        self.rule(DECIDE_MARK, "<decision>terminate</decision>")


@pytest.fixture
def world(embedder, prompts, corpus_env):
    return ScriptedWorld(embedder, prompts, corpus_env)


def make_task(task_id="t1", question="how tall is the iron tower?", gold="324 m", **kwargs):
    return Task(task_id=task_id, question=question, gold=gold, **kwargs)


@pytest.fixture
def task():
    return make_task()
