"""Prompt template loading and rendering.

Templates are external text files with ${named} fill-in slots, loaded from
the packaged `templates/` directory by default or from any directory on
disk, so deployments can swap prompt sets without code changes.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from string import Template
from typing import Optional

TEMPLATE_NAMES = (
    "planner",
    "executor_system",
    "executor_user",
    "reflection",
    "reflect_decide",
    "judge",
    "caption",
    "compress",
    "router",
    "category",
    "reviewer_logic",
    "reviewer_credibility",
    "reviewer_validity",
    "area_chair",
)

# Appendix-style extra prompt blocks prepended to the executor's user turn.
GUIDELINE_BLOCK = "Here is a guide for your reference:\n${plan}\nBegin your answer:\n"
LONG_CONTEXT_BLOCK = "Here are some memories for your reference:\n${memory_context}\n"

NO_EXPERIENCE_FILLER = "no prior experience"


class PromptLibrary:
    """Named template set with strict slot substitution."""

    def __init__(self, templates: dict[str, Template], set_id: str):
        self.templates = templates
        self.set_id = set_id

    @classmethod
    def default(cls) -> "PromptLibrary":
        templates = {}
        root = resources.files("deepresearch").joinpath("templates")
        for name in TEMPLATE_NAMES:
            text = root.joinpath(f"{name}.txt").read_text(encoding="utf-8")
            templates[name] = Template(text)
        return cls(templates, set_id="builtin")

    @classmethod
    def from_dir(cls, path: str | Path) -> "PromptLibrary":
        path = Path(path)
        templates = {}
        for name in TEMPLATE_NAMES:
            file = path / f"{name}.txt"
            if not file.is_file():
                raise FileNotFoundError(f"missing template: {file}")
            templates[name] = Template(file.read_text(encoding="utf-8"))
        return cls(templates, set_id=str(path))

    def render(self, name: str, **slots: str) -> str:
        if name not in self.templates:
            raise KeyError(f"unknown template: {name}")
        return self.templates[name].substitute(**slots)


def render_memory_block(entries: list[tuple[str, str]]) -> str:
    """Format retrieved workflows for the planner prompt."""
    if not entries:
        return NO_EXPERIENCE_FILLER
    lines = []
    for i, (question, workflow) in enumerate(entries, start=1):
        lines.append(f"{i}. past question: {question}\n   workflow: {workflow}")
    return "\n".join(lines)


def render_meta_examples(pairs: list[tuple[str, str, str]]) -> str:
    """Format contrastive plan pairs for planner/router prompts."""
    if not pairs:
        return "no examples available"
    lines = []
    for i, (question, good, bad) in enumerate(pairs, start=1):
        lines.append(
            f"example {i} (question: {question})\n"
            f"  plan that worked: {good}\n"
            f"  plan that failed: {bad}"
        )
    return "\n".join(lines)


def guideline_block(plan_text: str) -> str:
    return Template(GUIDELINE_BLOCK).substitute(plan=plan_text)


def long_context_block(memory_text: str) -> str:
    return Template(LONG_CONTEXT_BLOCK).substitute(memory_context=memory_text)


def optional_caption_block(caption: Optional[str]) -> str:
    if caption:
        return f"Image caption: {caption}\n"
    return ""
