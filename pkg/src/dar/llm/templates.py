from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jinja2
from jinja2 import meta

from ..errors import PreconditionFailed

PROMPT_DIR = Path(__file__).resolve().parent.parent / "prompts"


@dataclass(frozen=True)
class TemplateSpec:
    template_id: str
    filename: str
    role_kind: str  # "sql" or "narrative": selects the default temperature
    schema_id: Optional[str] = None
    strategy: str = "plain"


# One file per agent role. Bump the filename suffix when a prompt changes
# behaviour so transcripts recorded against the old text stay explainable.
TEMPLATES: dict[str, TemplateSpec] = {
    spec.template_id: spec
    for spec in (
        TemplateSpec("intent", "intent.v1.txt", "sql", "intent", "cot"),
        TemplateSpec("plan", "plan.v1.txt", "sql", "plan", "cot"),
        TemplateSpec("query_understanding", "query_understanding.v1.txt", "sql", "query_spec", "react"),
        TemplateSpec("query_generation", "query_generation.v1.txt", "sql", "sql", "react"),
        TemplateSpec("query_review", "query_review.v1.txt", "sql", "sql", "reflection"),
        TemplateSpec("structure_planner", "structure_planner.v1.txt", "sql", "outline", "cot"),
        TemplateSpec("scratch_research", "scratch_research.v1.txt", "narrative", None, "plain"),
        TemplateSpec("revision", "revision.v1.txt", "narrative", None, "reflection"),
        TemplateSpec("quality_judge", "quality_judge.v1.txt", "sql", "judge", "cot"),
        TemplateSpec("ai_function", "ai_function.v1.txt", "sql", None, "plain"),
        TemplateSpec("repair", "repair.v1.txt", "sql", None, "plain"),
    )
}


class TemplateLibrary:
    def __init__(self, directory: Path = PROMPT_DIR) -> None:
        self._env = jinja2.Environment(
            loader=jinja2.FileSystemLoader(str(directory)),
            autoescape=False,
            undefined=jinja2.StrictUndefined,
            keep_trailing_newline=True,
        )

    def spec(self, template_id: str) -> TemplateSpec:
        try:
            return TEMPLATES[template_id]
        except KeyError:
            raise PreconditionFailed(f"unknown template {template_id!r}") from None

    def source(self, template_id: str) -> str:
        spec = self.spec(template_id)
        assert self._env.loader is not None
        text, _, _ = self._env.loader.get_source(self._env, spec.filename)
        return text

    def variables(self, template_id: str) -> set[str]:
        return set(meta.find_undeclared_variables(self._env.parse(self.source(template_id))))

    def render(self, template_id: str, variables: dict[str, str]) -> str:
        spec = self.spec(template_id)
        missing = self.variables(template_id) - set(variables)
        if missing:
            raise PreconditionFailed(f"template {template_id} has unbound variables: {sorted(missing)}")
        try:
            return self._env.get_template(spec.filename).render(**variables)
        except jinja2.UndefinedError as exc:
            raise PreconditionFailed(f"template {template_id}: {exc}") from exc
