"""Answer judging: supervised correctness and the peer-review framework.

Supervised judging grades a predicted answer against a gold answer with one
model call (byte-equal answers short-circuit without any call). The
unsupervised path decomposes trajectory quality into three orthogonal
reviewer roles (logic, credibility, validity) whose structured reports a
meta-reviewer synthesizes; a fatal credibility finding forces rejection in
code, before any meta call, so the dominance rule is an invariant rather
than a model behavior.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

from .gateway import ChatMessage, Gateway
from .prompts import PromptLibrary
from .records import canonical_dumps
from .trajectory import Trajectory, render_history

VERDICT_CORRECT = "correct"
VERDICT_INCORRECT = "incorrect"

ROLE_LOGIC = "logic"
ROLE_CREDIBILITY = "credibility"
ROLE_VALIDITY = "validity"
REVIEWER_ROLES = (ROLE_LOGIC, ROLE_CREDIBILITY, ROLE_VALIDITY)

SEVERITIES = ("minor", "major", "fatal")

_VERDICT_RE = re.compile(r"\b(incorrect|correct)\b", re.IGNORECASE)

FORMAT_REMINDER = "Reminder: reply with a single JSON object in the required format only."


@dataclass(frozen=True)
class CorrectnessVerdict:
    verdict: str
    rationale: str = ""
    raw: str = ""
    parse_failure: bool = False

    @property
    def correct(self) -> bool:
        return self.verdict == VERDICT_CORRECT

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "rationale": self.rationale,
            "raw": self.raw,
            "parse_failure": self.parse_failure,
        }


@dataclass(frozen=True)
class Finding:
    severity: str
    evidence: str
    note: str

    def to_json(self) -> dict:
        return {"severity": self.severity, "evidence": self.evidence, "note": self.note}


@dataclass
class ReviewerReport:
    role: str
    score: float
    findings: list[Finding] = field(default_factory=list)
    raw: str = ""
    parse_failure: bool = False

    def has_fatal(self) -> bool:
        return any(f.severity == "fatal" for f in self.findings)

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "score": self.score,
            "findings": [f.to_json() for f in self.findings],
            "parse_failure": self.parse_failure,
        }


@dataclass(frozen=True)
class ACDecision:
    accept: bool
    rationale: str
    cited_findings: list[Finding] = field(default_factory=list)
    raw: str = ""

    def to_json(self) -> dict:
        return {
            "accept": self.accept,
            "rationale": self.rationale,
            "cited_findings": [f.to_json() for f in self.cited_findings],
        }


def parse_verdict_text(text: str) -> CorrectnessVerdict:
    match = _VERDICT_RE.search(text)
    if match is None:
        return CorrectnessVerdict(
            verdict=VERDICT_INCORRECT,
            rationale="judger output did not contain a verdict token",
            raw=text,
            parse_failure=True,
        )
    return CorrectnessVerdict(verdict=match.group(1).lower(), raw=text)


def judge_correctness(
    question: str,
    predicted: str,
    gold: str,
    gateway: Gateway,
    prompts: PromptLibrary,
) -> CorrectnessVerdict:
    """Grade a prediction against gold; byte-equal strings skip the model call."""
    if gold is None:
        raise ValueError("supervised judging requires a gold answer")
    if predicted == gold:
        return CorrectnessVerdict(verdict=VERDICT_CORRECT, rationale="exact match")
    prompt = prompts.render("judge", question=question, gold=gold, predicted=predicted)
    response = gateway.chat([ChatMessage(role="user", content=prompt)], purpose="judge")
    return parse_verdict_text(response.text)


def _extract_json(text: str) -> Optional[dict]:
    text = text.strip()
    try:
        obj = json.loads(text)
        return obj if isinstance(obj, dict) else None
    except json.JSONDecodeError:
        pass
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        try:
            obj = json.loads(text[start : end + 1])
            return obj if isinstance(obj, dict) else None
        except json.JSONDecodeError:
            return None
    return None


def _parse_report(role: str, text: str) -> Optional[ReviewerReport]:
    obj = _extract_json(text)
    if obj is None:
        return None
    score = obj.get("score")
    if not isinstance(score, (int, float)) or not 0 <= float(score) <= 1:
        return None
    raw_findings = obj.get("findings", [])
    if not isinstance(raw_findings, list):
        return None
    findings = []
    for item in raw_findings:
        if not isinstance(item, dict):
            return None
        severity = item.get("severity")
        evidence = item.get("evidence", "")
        note = item.get("note", "")
        if severity not in SEVERITIES:
            return None
        if severity == "fatal" and not str(evidence).strip():
            # A fatal charge without an evidence quote is not a usable report.
            return None
        findings.append(Finding(severity=severity, evidence=str(evidence), note=str(note)))
    return ReviewerReport(role=role, score=float(score), findings=findings, raw=text)


def review(
    trajectory: Trajectory,
    role: str,
    question: str,
    gateway: Gateway,
    prompts: PromptLibrary,
) -> ReviewerReport:
    """Run one reviewer role over a finished trajectory.

    Malformed output gets one retry with a format reminder; a second failure
    yields a score-0 report carrying a fatal parse-failure finding.
    """
    if role not in REVIEWER_ROLES:
        raise ValueError(f"unknown reviewer role: {role!r}")
    if trajectory.answer_final is None:
        raise ValueError("review requires a trajectory with a final answer")
    prompt = prompts.render(
        f"reviewer_{role}",
        question=question,
        answer=trajectory.answer_final,
        history=render_history(trajectory),
    )
    messages = [ChatMessage(role="user", content=prompt)]
    response = gateway.chat(messages, purpose="reviewer")
    report = _parse_report(role, response.text)
    if report is None:
        retry_messages = messages + [
            ChatMessage(role="assistant", content=response.text),
            ChatMessage(role="user", content=FORMAT_REMINDER),
        ]
        response = gateway.chat(retry_messages, purpose="reviewer")
        report = _parse_report(role, response.text)
    if report is None:
        return ReviewerReport(
            role=role,
            score=0.0,
            findings=[
                Finding(
                    severity="fatal",
                    evidence=response.text[:200] or "(empty output)",
                    note="reviewer output could not be parsed",
                )
            ],
            raw=response.text,
            parse_failure=True,
        )
    return report


def area_chair(
    reports: list[ReviewerReport],
    question: str,
    gateway: Gateway,
    prompts: PromptLibrary,
) -> ACDecision:
    """Synthesize the three reviewer reports into an accept/reject decision.

    A fatal finding from the credibility reviewer rejects immediately with
    zero model calls; otherwise the meta-reviewer is consulted once (one
    retry on malformed output, then reject).
    """
    if len(reports) != 3 or {r.role for r in reports} != set(REVIEWER_ROLES):
        raise ValueError("area chair requires exactly one report per reviewer role")
    credibility = next(r for r in reports if r.role == ROLE_CREDIBILITY)
    fatal = [f for f in credibility.findings if f.severity == "fatal"]
    if fatal:
        return ACDecision(
            accept=False,
            rationale="fatal factuality finding forces rejection",
            cited_findings=fatal,
        )
    rendered = "\n".join(canonical_dumps(r.to_json()) for r in sorted(reports, key=lambda r: r.role))
    prompt = prompts.render("area_chair", question=question, reports=rendered)
    messages = [ChatMessage(role="user", content=prompt)]
    response = gateway.chat(messages, purpose="area_chair")
    decision = _parse_decision(response.text, reports)
    if decision is None:
        retry_messages = messages + [
            ChatMessage(role="assistant", content=response.text),
            ChatMessage(role="user", content=FORMAT_REMINDER),
        ]
        response = gateway.chat(retry_messages, purpose="area_chair")
        decision = _parse_decision(response.text, reports)
    if decision is None:
        return ACDecision(
            accept=False,
            rationale="meta-review output could not be parsed",
            raw=response.text,
        )
    return decision


def _parse_decision(text: str, reports: list[ReviewerReport]) -> Optional[ACDecision]:
    obj = _extract_json(text)
    if obj is None or not isinstance(obj.get("accept"), bool):
        return None
    cited = [f for r in reports for f in r.findings if f.severity in ("major", "fatal")]
    return ACDecision(
        accept=obj["accept"],
        rationale=str(obj.get("rationale", "")),
        cited_findings=cited,
        raw=text,
    )


@dataclass
class UnsupervisedResult:
    verdict: CorrectnessVerdict
    reports: list[ReviewerReport]
    decision: ACDecision

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict.to_json(),
            "reports": [r.to_json() for r in self.reports],
            "decision": self.decision.to_json(),
        }


def unsupervised_verdict(
    trajectory: Trajectory,
    question: str,
    gateway: Gateway,
    prompts: PromptLibrary,
) -> UnsupervisedResult:
    """Full peer-review pass: three reviewers, one meta-decision, one verdict.

    Acceptance maps to correct; the verdict substitutes for gold-based
    judgment wherever supervision is unavailable.
    """
    reports = [review(trajectory, role, question, gateway, prompts) for role in REVIEWER_ROLES]
    decision = area_chair(reports, question, gateway, prompts)
    verdict = CorrectnessVerdict(
        verdict=VERDICT_CORRECT if decision.accept else VERDICT_INCORRECT,
        rationale=decision.rationale,
    )
    return UnsupervisedResult(verdict=verdict, reports=reports, decision=decision)
