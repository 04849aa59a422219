"""Runtime state-machine tests: planning, the executor loop, reflection, episodes."""

import json
from pathlib import Path

import pytest

from deepresearch.gateway import ChatResponse, TokenInfo
from deepresearch.records import canonical_dumps
from deepresearch.runtime import (
    EpisodeOptions,
    Limits,
    MODE_LONG_CONTEXT,
    MODE_NO_EXTRA,
    classify_category,
    make_plan,
    parse_plan_output,
    reflect_replan,
    run_episode,
    run_executor,
)
from deepresearch.memory import MemoryContext
from deepresearch.trajectory import (
    KIND_PLAN_INJECTION,
    SENTINEL_ANSWER,
    SOURCES,
)
from conftest import (
    CATEGORY_MARK,
    EXECUTOR_MARK,
    JUDGE_MARK,
    PLANNER_MARK,
    REFLECT_MARK,
    ScriptedWorld,
    make_task,
    plan_text,
    think_answer,
    think_tool,
)

GOLDEN_DIR = Path(__file__).parent / "golden"


class TestParsePlanOutput:
    def test_three_step_plan(self):
        plan = parse_plan_output(plan_text("find height", "verify", "answer"))
        assert plan.steps == ["find height", "verify", "answer"]
        assert plan.revision is None

    def test_numbering_variants_stripped(self):
        raw = "<think>t</think><plan>1) a\n- b\n2. c</plan>"
        assert parse_plan_output(raw).steps == ["a", "b", "c"]

    def test_missing_plan_tag(self):
        assert parse_plan_output("<think>t</think>no plan here") is None

    def test_empty_plan_body(self):
        assert parse_plan_output("<think>t</think><plan>\n  \n</plan>") is None


class TestMakePlan:
    def test_scripted_three_step_plan(self, world, task):
        world.rule([PLANNER_MARK, task.question], plan_text("a", "b", "c"))
        plan = make_plan(task, MemoryContext(), world.backends.planner, world.prompts)
        assert len(plan.steps) == 3
        assert plan.revision is None
        assert not plan.parse_fallback

    def test_empty_memory_renders_filler(self, world, task):
        world.rule(PLANNER_MARK, plan_text("a"))
        make_plan(task, MemoryContext(), world.backends.planner, world.prompts)
        purpose, request, _ = world.gateway.transcript[-1]
        assert purpose == "planner"
        assert "no prior experience" in request.messages[0].content

    def test_malformed_then_wellformed_two_calls(self, world, task):
        world.rule(PLANNER_MARK, ["garbage output", plan_text("recovered step")])
        plan = make_plan(task, MemoryContext(), world.backends.planner, world.prompts)
        assert plan.steps == ["recovered step"]
        assert world.gateway.calls("planner") == 2
        assert not plan.parse_fallback

    def test_double_malformed_falls_back(self, world, task):
        world.rule(PLANNER_MARK, ["junk", "more junk"])
        plan = make_plan(task, MemoryContext(), world.backends.planner, world.prompts)
        assert plan.parse_fallback
        assert plan.steps == ["answer directly"]


def plan_for(task):
    from deepresearch.trajectory import Plan

    return Plan(cot="think", steps=["search", "answer"])


class TestRunExecutor:
    def test_golden_five_step_transcript(self, world, task):
        world.rule([EXECUTOR_MARK, task.question], [think_tool("tower"), think_answer("324 m")])
        traj = run_executor(
            task, plan_for(task), world.tools, world.backends.executor, Limits(), world.prompts
        )
        kinds = [s.kind for s in traj.steps]
        assert kinds == ["thought", "tool_call", "observation", "thought", "answer"]
        assert traj.answer_final == "324 m"
        assert traj.answer_intermediate == "324 m"
        assert traj.assistant_turns == 2
        assert traj.user_turns == 1

    def test_looping_script_exhausts_at_ten_turns(self, world, task):
        world.rule(EXECUTOR_MARK, think_tool("again"))
        traj = run_executor(
            task, plan_for(task), world.tools, world.backends.executor, Limits(), world.prompts
        )
        assert traj.assistant_turns == 10
        assert traj.user_turns == 10
        assert traj.answer_final == SENTINEL_ANSWER
        assert traj.steps[-1].payload.get("synthesized") is True

    def test_empty_observation_continues(self, world, task):
        # image_search on a text-only task produces an error observation.
        body = json.dumps({"name": "image_search", "arguments": {"image": "<image>"}})
        call = f"<think>look</think><tool_call>{body}</tool_call>"
        world.rule([EXECUTOR_MARK, task.question], [call, think_answer("done anyway")])
        traj = run_executor(
            task, plan_for(task), world.tools, world.backends.executor, Limits(), world.prompts
        )
        obs = [s for s in traj.steps if s.kind == "observation"][0]
        assert obs.payload["is_error"] is True
        assert traj.answer_final == "done anyway"

    def test_malformed_recovery(self, world, task):
        world.rule([EXECUTOR_MARK, task.question], ["<answer>broken", think_answer("fixed")])
        traj = run_executor(
            task, plan_for(task), world.tools, world.backends.executor, Limits(), world.prompts
        )
        assert traj.has_malformed_step()
        assert traj.answer_final == "fixed"
        assert traj.assistant_turns == 2

    def test_source_attribution_complete(self, world, task):
        world.rule([EXECUTOR_MARK, task.question], [think_tool("x"), think_answer("y")])
        traj = run_executor(
            task, plan_for(task), world.tools, world.backends.executor, Limits(), world.prompts
        )
        for step in traj.steps:
            assert step.source in SOURCES
        for token in traj.token_records:
            assert token.mask == (1 if token.source == "policy" else 0)

    def test_backend_token_records_attached(self, world, task):
        text = think_answer("tok")
        half = len(text) // 2
        response = ChatResponse(
            text=text, tokens=(TokenInfo(text[:half], -0.5), TokenInfo(text[half:], -0.25))
        )
        world.rule([EXECUTOR_MARK, task.question], [response])
        traj = run_executor(
            task, plan_for(task), world.tools, world.backends.executor, Limits(), world.prompts
        )
        policy_tokens = [t for t in traj.token_records if t.source == "policy"]
        assert [t.logp_old for t in policy_tokens] == [-0.5, -0.25]

    def test_gateway_exhaustion_aborts(self, world, task):
        # No matching rule: the rule backend raises a script miss, which is
        # not transient, so wrap it in a flaky transport for this test.
        from deepresearch.errors import TransientTransportError

        class DownBackend:
            def complete(self, request):
                raise TransientTransportError("down")

        from deepresearch.gateway import Gateway

        gateway = Gateway(DownBackend(), retries=1, sleep=lambda _s: None)
        traj = run_executor(task, plan_for(task), world.tools, gateway, Limits(), world.prompts)
        assert traj.aborted
        assert traj.answer_final is None


class TestReflectReplan:
    def make_finished(self, world, task):
        world.rule([EXECUTOR_MARK, task.question], [think_answer("first try")])
        return run_executor(
            task, plan_for(task), world.tools, world.backends.executor, Limits(), world.prompts
        )

    def test_first_call_attaches_revision(self, world, task):
        traj = self.make_finished(world, task)
        plan = plan_for(task)
        world.rule(REFLECT_MARK, plan_text("revised step"))
        result = reflect_replan(task, plan, traj, world.backends.planner, world.prompts)
        assert result is plan
        assert plan.reflection_triggered
        assert plan.revision.steps == ["revised step"]

    def test_second_call_refuses(self, world, task):
        traj = self.make_finished(world, task)
        plan = plan_for(task)
        world.rule(REFLECT_MARK, plan_text("revised step"))
        reflect_replan(task, plan, traj, world.backends.planner, world.prompts)
        assert reflect_replan(task, plan, traj, world.backends.planner, world.prompts) is None
        assert world.gateway.calls("reflect") == 1

    def test_requires_final_answer(self, world, task):
        from deepresearch.trajectory import Trajectory

        with pytest.raises(ValueError):
            reflect_replan(
                task, plan_for(task), Trajectory(task_id="t"), world.backends.planner, world.prompts
            )


def happy_world(world, task, answer="324 m"):
    world.default_manager_rules()
    world.rule([PLANNER_MARK, task.question], plan_text("search the corpus", "answer"))
    world.rule([EXECUTOR_MARK, task.question], [think_tool("tower height"), think_answer(answer)])
    return world


class TestRunEpisode:
    def test_happy_path(self, world, task):
        happy_world(world, task)
        record = run_episode(task, world.store, world.tools, world.backends, world.prompts)
        assert record.answer == "324 m"
        assert record.verdict_final.correct
        assert record.trajectory.answer_intermediate == record.trajectory.answer_final
        assert not record.reflection_triggered
        assert record.errors == []

    def test_replan_path_two_phase(self, world):
        task = make_task(task_id="t2", question="what is the answer?", gold="42")
        world.default_manager_rules()
        world.rule([PLANNER_MARK, task.question], plan_text("guess"))
        world.rule(
            [EXECUTOR_MARK, task.question],
            [think_answer("wrong guess"), think_answer("42")],
        )
        world.rule([JUDGE_MARK, "wrong guess"], "incorrect")
        world.rule(REFLECT_MARK, plan_text("think harder"))
        record = run_episode(task, world.store, world.tools, world.backends, world.prompts)
        assert record.trajectory.answer_intermediate == "wrong guess"
        assert record.trajectory.answer_final == "42"
        assert record.reflection_triggered
        assert record.verdict_intermediate.verdict == "incorrect"
        assert record.verdict_final.verdict == "correct"
        injections = [s for s in record.trajectory.steps if s.kind == KIND_PLAN_INJECTION]
        assert len(injections) == 1

    def test_at_most_once_reflection_under_adversary(self, world):
        task = make_task(task_id="t3", question="impossible question", gold="never right")
        world.default_manager_rules()
        world.rule([PLANNER_MARK, task.question], plan_text("try"))
        world.rule([EXECUTOR_MARK, task.question], think_answer("always wrong"))
        world.rule(JUDGE_MARK, "incorrect")
        world.rule(REFLECT_MARK, plan_text("retry"))
        record = run_episode(task, world.store, world.tools, world.backends, world.prompts)
        injections = [s for s in record.trajectory.steps if s.kind == KIND_PLAN_INJECTION]
        assert len(injections) == 1
        assert record.trajectory.assistant_turns <= 10
        assert record.trajectory.user_turns <= 10

    def test_turn_bounds_under_adversarial_looping_script(self, world):
        task = make_task(task_id="t4", question="loop forever", gold="42")
        world.default_manager_rules()
        world.rule([PLANNER_MARK, task.question], plan_text("loop"))
        world.rule(EXECUTOR_MARK, think_tool("again"))
        world.rule(JUDGE_MARK, "incorrect")
        world.rule(REFLECT_MARK, plan_text("still loop"))
        record = run_episode(task, world.store, world.tools, world.backends, world.prompts)
        assert record.trajectory.assistant_turns == 10
        assert record.trajectory.user_turns == 10
        assert record.answer == SENTINEL_ANSWER
        injections = [s for s in record.trajectory.steps if s.kind == KIND_PLAN_INJECTION]
        assert len(injections) == 0  # no budget left to resume

    def test_no_extra_mode_zero_planner_calls(self, world, task):
        happy_world(world, task)
        world.rule(EXECUTOR_MARK, think_answer("324 m"))
        options = EpisodeOptions(prompt_mode=MODE_NO_EXTRA)
        record = run_episode(
            task, world.store, world.tools, world.backends, world.prompts, options
        )
        assert world.gateway.calls("planner") == 0
        assert record.plan is None
        assert record.answer == "324 m"

    def test_mode_separation_memory_never_in_guideline_executor_prompt(self, world, task):
        happy_world(world, task)
        marker = "MEMWORKFLOW_SENTINEL_XYZ"
        world.store.add_unit(
            bucket="text/general",
            question=task.question,
            workflow=marker,
            label="correct",
        )
        record = run_episode(task, world.store, world.tools, world.backends, world.prompts)
        assert not record.memory.empty
        executor_requests = [
            req for purpose, req, _resp in world.gateway.transcript if purpose == "executor"
        ]
        assert executor_requests
        for request in executor_requests:
            for message in request.messages:
                assert marker not in message.content
        planner_requests = [
            req for purpose, req, _resp in world.gateway.transcript if purpose == "planner"
        ]
        assert any(
            marker in m.content for req in planner_requests for m in req.messages
        )

    def test_long_context_mode_memory_in_executor_prompt(self, world, task):
        world.default_manager_rules()
        marker = "MEMWORKFLOW_SENTINEL_ABC"
        world.store.add_unit(
            bucket="text/general", question=task.question, workflow=marker, label="correct"
        )
        world.rule(EXECUTOR_MARK, think_answer("324 m"))
        options = EpisodeOptions(prompt_mode=MODE_LONG_CONTEXT)
        record = run_episode(
            task, world.store, world.tools, world.backends, world.prompts, options
        )
        assert world.gateway.calls("planner") == 0
        executor_requests = [
            req for purpose, req, _resp in world.gateway.transcript if purpose == "executor"
        ]
        assert any(marker in m.content for req in executor_requests for m in req.messages)
        assert "Here are some memories for your reference:" in (
            executor_requests[0].messages[1].content
        )

    def test_category_classification_fallback(self, world):
        task = make_task(task_id="t5", question="how many moons does mars have?", gold="2")
        task.category = None
        world.default_manager_rules()
        world.rule([PLANNER_MARK, task.question], plan_text("count moons"))
        world.rule([EXECUTOR_MARK, task.question], think_answer("2"))
        record = run_episode(task, world.store, world.tools, world.backends, world.prompts)
        assert record.bucket == "text/general"

    def test_classify_category_parses_label(self, world):
        backend = world.backend
        backend.add_rule(CATEGORY_MARK, "numerical")
        label = classify_category("how many?", world.gateway, world.prompts)
        assert label == "numerical"

    def test_classify_category_unknown_label_falls_back(self, world):
        world.rule(CATEGORY_MARK, "astrology")
        assert classify_category("q", world.gateway, world.prompts) == "general"


def build_episode_record(scenario: str):
    """Construct one of the five scripted scenarios from scratch and run it."""
    from deepresearch.embedding import HashingEmbedder
    from deepresearch.prompts import PromptLibrary
    from deepresearch.tools import CorpusIndex, ImageCache, ToolEnv

    embedder = HashingEmbedder(dim=16)
    prompts = PromptLibrary.default()
    docs = {
        "d1": "the iron tower in paris is 324 meters tall",
        "d2": "the great wall of china is thousands of kilometers long",
        "d3": "honey never spoils because of its low moisture",
    }
    tools = ToolEnv(
        index=CorpusIndex.from_texts(docs, embedder),
        image_cache=ImageCache(),
        embedder=embedder,
        top_k=3,
    )
    world = ScriptedWorld(embedder, prompts, tools)
    world.default_manager_rules()

    if scenario == "happy":
        task = make_task()
        world.rule([PLANNER_MARK, task.question], plan_text("search the corpus", "answer"))
        world.rule(
            [EXECUTOR_MARK, task.question], [think_tool("tower height"), think_answer("324 m")]
        )
    elif scenario == "replan":
        task = make_task(task_id="t2", question="what is the answer?", gold="42")
        world.rule([PLANNER_MARK, task.question], plan_text("guess"))
        world.rule(
            [EXECUTOR_MARK, task.question], [think_answer("wrong guess"), think_answer("42")]
        )
        world.rule([JUDGE_MARK, "wrong guess"], "incorrect")
        world.rule(REFLECT_MARK, plan_text("think harder"))
    elif scenario == "exhaustion":
        task = make_task(task_id="t3", question="loop forever", gold="42")
        world.rule([PLANNER_MARK, task.question], plan_text("loop"))
        world.rule(EXECUTOR_MARK, think_tool("again"))
        world.rule(JUDGE_MARK, "incorrect")
        world.rule(REFLECT_MARK, plan_text("still loop"))
    elif scenario == "malformed":
        task = make_task(task_id="t4", question="recover from chaos", gold="ok")
        world.rule([PLANNER_MARK, task.question], plan_text("be careful"))
        world.rule([EXECUTOR_MARK, task.question], ["<answer>broken", think_answer("ok")])
    elif scenario == "tool_failure":
        task = make_task(task_id="t5", question="what does the image show?", gold="a tower")
        world.rule([PLANNER_MARK, task.question], plan_text("inspect the image"))
        body = json.dumps({"name": "image_search", "arguments": {"image": "<image>"}})
        call = f"<think>look</think><tool_call>{body}</tool_call>"
        world.rule([EXECUTOR_MARK, task.question], [call, think_answer("a tower")])
    else:
        raise ValueError(scenario)

    record = run_episode(task, world.store, world.tools, world.backends, world.prompts)
    return canonical_dumps(record.to_json())


SCENARIOS = ["happy", "replan", "exhaustion", "malformed", "tool_failure"]


class TestGoldenTranscripts:
    @pytest.mark.parametrize("scenario", SCENARIOS)
    def test_byte_identical_across_runs(self, scenario):
        assert build_episode_record(scenario) == build_episode_record(scenario)

    @pytest.mark.parametrize("scenario", SCENARIOS)
    def test_matches_frozen_golden(self, scenario):
        golden = GOLDEN_DIR / f"{scenario}.json"
        assert golden.is_file(), f"golden file missing: {golden}"
        assert build_episode_record(scenario) == golden.read_text(encoding="utf-8").rstrip("\n")
