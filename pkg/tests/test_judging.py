"""Judging tests: supervised verdicts, reviewer parsing, meta-decision rules."""

import json
import random

import pytest

from deepresearch.gateway import Gateway, RuleBackend
from deepresearch.judging import (
    Finding,
    ReviewerReport,
    area_chair,
    judge_correctness,
    parse_verdict_text,
    review,
    unsupervised_verdict,
)
from deepresearch.trajectory import (
    KIND_ANSWER,
    KIND_THOUGHT,
    SOURCE_POLICY,
    Trajectory,
    TrajectoryStep,
)
from conftest import (
    AC_MARK,
    CRED_MARK,
    LOGIC_MARK,
    VALID_MARK,
    accept_decision,
    clean_report,
    fatal_report,
    reject_decision,
)


def finished_trajectory(answer="324 m"):
    traj = Trajectory(task_id="t")
    traj.steps = [
        TrajectoryStep(kind=KIND_THOUGHT, source=SOURCE_POLICY, text="looked it up", seq=0),
        TrajectoryStep(kind=KIND_ANSWER, source=SOURCE_POLICY, text=answer, seq=1),
    ]
    traj.answer_intermediate = answer
    traj.answer_final = answer
    return traj


def gateway_with(rules):
    backend = RuleBackend()
    for contains, responses in rules:
        backend.add_rule(contains, responses)
    return Gateway(backend)


class TestVerdictParsing:
    def test_correct_token(self):
        assert parse_verdict_text("Correct").verdict == "correct"

    def test_incorrect_wins_over_substring(self):
        assert parse_verdict_text("incorrect").verdict == "incorrect"
        assert parse_verdict_text("this is incorrect").verdict == "incorrect"

    def test_gibberish_is_parse_failure(self):
        verdict = parse_verdict_text("banana banana")
        assert verdict.verdict == "incorrect"
        assert verdict.parse_failure


class TestJudgeCorrectness:
    def test_scripted_correct(self, prompts):
        gateway = gateway_with([("strict grader", "correct")])
        verdict = judge_correctness("q", "324 meters", "324 m", gateway, prompts)
        assert verdict.correct

    def test_scripted_gibberish(self, prompts):
        gateway = gateway_with([("strict grader", "???")])
        verdict = judge_correctness("q", "wrong", "gold", gateway, prompts)
        assert not verdict.correct
        assert verdict.parse_failure

    def test_exact_match_short_circuits(self, prompts):
        gateway = gateway_with([])
        verdict = judge_correctness("q", "324 m", "324 m", gateway, prompts)
        assert verdict.correct
        assert gateway.calls() == 0


class TestReview:
    def test_clean_report(self, prompts):
        gateway = gateway_with([(LOGIC_MARK, clean_report(0.9))])
        report = review(finished_trajectory(), "logic", "q", gateway, prompts)
        assert report.score == 0.9
        assert report.findings == []
        assert not report.parse_failure

    def test_fatal_finding_carries_evidence(self, prompts):
        gateway = gateway_with([(CRED_MARK, fatal_report(evidence="quoted claim"))])
        report = review(finished_trajectory(), "credibility", "q", gateway, prompts)
        assert report.has_fatal()
        assert report.findings[0].evidence == "quoted claim"

    def test_fatal_without_evidence_is_malformed(self, prompts):
        bad = json.dumps(
            {"score": 0.5, "findings": [{"severity": "fatal", "evidence": "", "note": "n"}]}
        )
        gateway = gateway_with([(LOGIC_MARK, [bad, clean_report(0.4)])])
        report = review(finished_trajectory(), "logic", "q", gateway, prompts)
        assert report.score == 0.4
        assert gateway.calls("reviewer") == 2

    def test_double_malformed_yields_parse_report(self, prompts):
        gateway = gateway_with([(VALID_MARK, ["not json", "still not json"])])
        report = review(finished_trajectory(), "validity", "q", gateway, prompts)
        assert report.parse_failure
        assert report.score == 0.0
        assert report.has_fatal()
        assert gateway.calls("reviewer") == 2

    def test_retry_then_success(self, prompts):
        gateway = gateway_with([(LOGIC_MARK, ["garbage", clean_report(0.7)])])
        report = review(finished_trajectory(), "logic", "q", gateway, prompts)
        assert report.score == 0.7
        assert not report.parse_failure

    def test_out_of_range_score_is_malformed(self, prompts):
        bad = json.dumps({"score": 1.5, "findings": []})
        gateway = gateway_with([(LOGIC_MARK, [bad, bad])])
        report = review(finished_trajectory(), "logic", "q", gateway, prompts)
        assert report.parse_failure

    def test_requires_final_answer(self, prompts):
        gateway = gateway_with([])
        traj = Trajectory(task_id="t")
        with pytest.raises(ValueError):
            review(traj, "logic", "q", gateway, prompts)


def make_reports(cred_fatal=False, scores=(0.9, 0.8, 0.85)):
    findings = [Finding(severity="fatal", evidence="ev", note="bad")] if cred_fatal else []
    return [
        ReviewerReport(role="logic", score=scores[0]),
        ReviewerReport(role="credibility", score=scores[1], findings=findings),
        ReviewerReport(role="validity", score=scores[2]),
    ]


class TestAreaChair:
    def test_fatal_credibility_short_circuit(self, prompts):
        gateway = gateway_with([])
        decision = area_chair(make_reports(cred_fatal=True), "q", gateway, prompts)
        assert decision.accept is False
        assert gateway.calls() == 0
        assert decision.cited_findings

    def test_clean_reports_scripted_accept(self, prompts):
        gateway = gateway_with([(AC_MARK, accept_decision())])
        decision = area_chair(make_reports(), "q", gateway, prompts)
        assert decision.accept is True
        assert gateway.calls("area_chair") == 1

    def test_scripted_reject_with_rationale(self, prompts):
        gateway = gateway_with([(AC_MARK, reject_decision())])
        decision = area_chair(make_reports(), "q", gateway, prompts)
        assert decision.accept is False
        assert decision.rationale == "major issues"

    def test_malformed_ac_output_rejects(self, prompts):
        gateway = gateway_with([(AC_MARK, ["nonsense", "more nonsense"])])
        decision = area_chair(make_reports(), "q", gateway, prompts)
        assert decision.accept is False

    def test_requires_three_roles(self, prompts):
        gateway = gateway_with([])
        with pytest.raises(ValueError):
            area_chair(make_reports()[:2], "q", gateway, prompts)

    def test_fatal_logic_does_not_short_circuit(self, prompts):
        reports = make_reports()
        reports[0].findings = [Finding(severity="fatal", evidence="e", note="n")]
        gateway = gateway_with([(AC_MARK, accept_decision())])
        decision = area_chair(reports, "q", gateway, prompts)
        # Fatal findings outside the credibility role go to the meta-review.
        assert gateway.calls("area_chair") == 1
        assert decision.accept is True

    def test_fatal_dominance_500_random_report_sets(self, prompts):
        rng = random.Random(17)
        for _ in range(500):
            scores = tuple(round(rng.random(), 3) for _ in range(3))
            cred_fatal = rng.random() < 0.5
            reports = make_reports(cred_fatal=cred_fatal, scores=scores)
            if rng.random() < 0.4:
                reports[0].findings = [
                    Finding(severity=rng.choice(["minor", "major"]), evidence="e", note="n")
                ]
            gateway = gateway_with([(AC_MARK, accept_decision())])
            decision = area_chair(reports, "q", gateway, prompts)
            if cred_fatal:
                assert decision.accept is False
                assert gateway.calls() == 0


class TestUnsupervisedVerdict:
    def rules_all_clean(self):
        return [
            (LOGIC_MARK, clean_report(0.9)),
            (CRED_MARK, clean_report(0.8)),
            (VALID_MARK, clean_report(0.95)),
            (AC_MARK, accept_decision()),
        ]

    def test_all_clean_accepts(self, prompts):
        gateway = gateway_with(self.rules_all_clean())
        result = unsupervised_verdict(finished_trajectory(), "q", gateway, prompts)
        assert result.verdict.correct
        assert gateway.calls("reviewer") == 3
        assert gateway.calls("area_chair") == 1

    def test_fatal_factuality_rejects_without_ac_call(self, prompts):
        gateway = gateway_with(
            [
                (LOGIC_MARK, clean_report(0.9)),
                (CRED_MARK, fatal_report()),
                (VALID_MARK, clean_report(0.95)),
            ]
        )
        result = unsupervised_verdict(finished_trajectory(), "q", gateway, prompts)
        assert not result.verdict.correct
        assert gateway.calls("reviewer") == 3
        assert gateway.calls("area_chair") == 0

    def test_deterministic_under_scripts(self, prompts):
        def run():
            gateway = gateway_with(self.rules_all_clean())
            result = unsupervised_verdict(finished_trajectory(), "q", gateway, prompts)
            return json.dumps(result.to_json(), sort_keys=True)

        assert run() == run()

    def test_no_malformed_output_can_accept(self, prompts):
        rng = random.Random(23)
        garbage = ["", "{}", "[1,2]", "{\"accept\": \"yes\"}", "accept!", "{\"score\": 2}"]
        for _ in range(50):
            gateway = gateway_with(
                [
                    (LOGIC_MARK, rng.choice(garbage)),
                    (CRED_MARK, rng.choice(garbage)),
                    (VALID_MARK, rng.choice(garbage)),
                    (AC_MARK, rng.choice(garbage)),
                ]
            )
            result = unsupervised_verdict(finished_trajectory(), "q", gateway, prompts)
            assert result.verdict.correct is False
