"""Generative SQL functions on engines that do not have them.

``AI.GENERATE``-family calls are found with a real SQL tokenizer (so string
literals and comments never match), rewritten into plain SQL that projects
each call's prompt expression, and evaluated row by row through the LLM
gateway. Engines flagged ``ai_native`` get the statement untouched.

Rewritable shapes:

* a call that forms a whole item of the outermost SELECT list, optionally
  aliased;
* an ``AI.GENERATE_BOOL`` call that forms a whole top-level AND conjunct of the
  outermost WHERE, in a query without GROUP BY, HAVING, DISTINCT, LIMIT,
  OFFSET or aggregates.

Everything else is ``unsupported_shape``.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Optional

import sqlglot
from pydantic import BaseModel, ConfigDict, ValidationError, create_model
from sqlglot.errors import SqlglotError
from sqlglot.tokens import Token, TokenType

from .backends import QueryLimits, SqlBackend
from .errors import BudgetExhausted, DarError, SqlParseError, UnsupportedShape
from .llm import Gateway
from .llm.schemas import extract_json
from .models import QueryOutcome
from .session import SessionState

logger = logging.getLogger(__name__)

OutputType = Literal["text", "bool", "double", "table"]

AI_FUNCTIONS: dict[str, OutputType] = {
    "ML.GENERATE_TEXT": "text",
    "AI.GENERATE": "text",
    "AI.GENERATE_BOOL": "bool",
    "AI.GENERATE_TABLE": "table",
    "AI.GENERATE_DOUBLE": "double",
}

OUTPUT_INSTRUCTIONS: dict[str, str] = {
    "text": "Answer with plain text only.",
    "bool": "Answer with exactly one word: true or false.",
    "double": "Answer with a single decimal number.",
    "table": "Answer with a single JSON object with exactly these fields: {schema}.",
}

DEFAULT_FANOUT_WIDTH = 4

_TABLE_TYPES: dict[str, type] = {
    "STRING": str,
    "TEXT": str,
    "INT64": int,
    "INTEGER": int,
    "INT": int,
    "FLOAT64": float,
    "FLOAT": float,
    "DOUBLE": float,
    "BOOL": bool,
    "BOOLEAN": bool,
}

_CLAUSES = {
    "SELECT",
    "FROM",
    "WHERE",
    "GROUP BY",
    "HAVING",
    "ORDER BY",
    "LIMIT",
    "OFFSET",
    "WINDOW",
    "QUALIFY",
    "WITH",
}
_SET_OPERATORS = {"UNION", "INTERSECT", "EXCEPT"}
_AGGREGATES = {"COUNT", "SUM", "AVG", "MIN", "MAX", "TOTAL", "GROUP_CONCAT", "STRING_AGG", "ARRAY_AGG"}
_NON_WORD_TYPES = {TokenType.STRING, TokenType.IDENTIFIER, TokenType.NUMBER}
_DECIMAL_RE = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


class AiCallSite(BaseModel):
    model_config = ConfigDict(frozen=True)

    function: str
    span: tuple[int, int]  # [start, end) character offsets into the SQL text
    prompt_expr: str
    output_type: OutputType
    table_schema: tuple[tuple[str, str], ...] = ()
    nested: bool = False


@dataclass(frozen=True)
class PerRowCall:
    call_site: AiCallSite
    input_column: str
    output_column: str
    coercion: OutputType
    role: Literal["project", "filter"] = "project"


@dataclass(frozen=True)
class Reassembly:
    renames: dict[str, str] = field(default_factory=dict)
    filters: tuple[str, ...] = ()


@dataclass(frozen=True)
class RewritePlan:
    base_sql: str
    per_row_calls: tuple[PerRowCall, ...] = ()
    reassembly: Reassembly = field(default_factory=Reassembly)

    @property
    def is_identity(self) -> bool:
        return not self.per_row_calls


# ---------------------------------------------------------------------------
# Tokenizing and scanning


def _tokenize(sql_text: str, dialect: str) -> list[Token]:
    try:
        return list(sqlglot.tokenize(sql_text, read=dialect))
    except SqlglotError as exc:
        raise SqlParseError(f"cannot tokenize SQL: {exc}") from exc


def _word(tok: Token) -> Optional[str]:
    if tok.token_type in _NON_WORD_TYPES:
        return None
    return " ".join(tok.text.upper().split())


def _call_heads(tokens: Sequence[Token]) -> list[tuple[int, str]]:
    """(index of the prefix token, function name) for every AI call head."""
    heads: list[tuple[int, str]] = []
    for i in range(len(tokens) - 3):
        prefix, dot, name, paren = tokens[i], tokens[i + 1], tokens[i + 2], tokens[i + 3]
        if dot.token_type != TokenType.DOT or paren.token_type != TokenType.L_PAREN:
            continue
        if i > 0 and tokens[i - 1].token_type == TokenType.DOT:
            continue
        prefix_word, name_word = _word(prefix), _word(name)
        if prefix_word is None or name_word is None:
            continue
        function = f"{prefix_word}.{name_word}"
        if function in AI_FUNCTIONS:
            heads.append((i, function))
    return heads


def _matching_paren(tokens: Sequence[Token], open_index: int) -> int:
    depth = 0
    for j in range(open_index, len(tokens)):
        if tokens[j].token_type == TokenType.L_PAREN:
            depth += 1
        elif tokens[j].token_type == TokenType.R_PAREN:
            depth -= 1
            if depth == 0:
                return j
    raise SqlParseError("unbalanced parentheses inside an AI function call")


def _split_args(tokens: Sequence[Token], open_index: int, close_index: int) -> list[tuple[int, int]]:
    args: list[tuple[int, int]] = []
    depth = 0
    start = open_index + 1
    for j in range(open_index + 1, close_index):
        kind = tokens[j].token_type
        if kind == TokenType.L_PAREN:
            depth += 1
        elif kind == TokenType.R_PAREN:
            depth -= 1
        elif kind == TokenType.COMMA and depth == 0:
            args.append((start, j - 1))
            start = j + 1
    args.append((start, close_index - 1))
    return args


def _parse_table_schema(text: str) -> tuple[tuple[str, str], ...]:
    fields: list[tuple[str, str]] = []
    for part in text.split(","):
        bits = part.split()
        if len(bits) != 2 or bits[1].upper() not in _TABLE_TYPES:
            raise SqlParseError(f"bad AI.GENERATE_TABLE schema entry {part.strip()!r}")
        fields.append((bits[0], bits[1].upper()))
    if not fields:
        raise SqlParseError("AI.GENERATE_TABLE needs a non-empty schema")
    return tuple(fields)


def scan_ai_calls(sql_text: str, dialect: str = "sqlite") -> list[AiCallSite]:
    tokens = _tokenize(sql_text, dialect)
    found: list[AiCallSite] = []
    covered_until = -1
    for index, function in _call_heads(tokens):
        start = tokens[index].start
        open_index = index + 3
        close_index = _matching_paren(tokens, open_index)
        end = tokens[close_index].end + 1
        if start < covered_until:
            # Inner call of an outer call already reported: mark the outer one.
            found[-1] = found[-1].model_copy(update={"nested": True})
            continue
        args = _split_args(tokens, open_index, close_index)
        first_lo, first_hi = args[0]
        if first_hi < first_lo:
            raise SqlParseError(f"{function} needs a prompt argument")
        prompt_expr = sql_text[tokens[first_lo].start : tokens[first_hi].end + 1]
        schema: tuple[tuple[str, str], ...] = ()
        if AI_FUNCTIONS[function] == "table":
            if len(args) < 2 or args[1][0] != args[1][1] or tokens[args[1][0]].token_type != TokenType.STRING:
                raise SqlParseError("AI.GENERATE_TABLE needs a string-literal schema as its second argument")
            schema = _parse_table_schema(tokens[args[1][0]].text)
        found.append(
            AiCallSite(
                function=function,
                span=(start, end),
                prompt_expr=prompt_expr,
                output_type=AI_FUNCTIONS[function],
                table_schema=schema,
            )
        )
        covered_until = end
    return found


def has_ai_calls(sql_text: str, dialect: str = "sqlite") -> bool:
    try:
        tokens = _tokenize(sql_text, dialect)
    except SqlParseError:
        return False
    return bool(_call_heads(tokens))


# ---------------------------------------------------------------------------
# Rewriting


@dataclass
class _Annotated:
    depth: int
    clause: Optional[str]


def _annotate(tokens: Sequence[Token]) -> list[_Annotated]:
    out: list[_Annotated] = []
    depth = 0
    clause: Optional[str] = None
    for i, tok in enumerate(tokens):
        if tok.token_type == TokenType.R_PAREN:
            depth -= 1
        word = _word(tok)
        if depth == 0 and word is not None:
            if word in ("GROUP", "ORDER") and i + 1 < len(tokens) and _word(tokens[i + 1]) == "BY":
                word = f"{word} BY"
            if word in _CLAUSES or word in _SET_OPERATORS:
                clause = word
        out.append(_Annotated(depth=depth, clause=clause))
        if tok.token_type == TokenType.L_PAREN:
            depth += 1
    return out


def _index_at(tokens: Sequence[Token], offset: int) -> int:
    for i, tok in enumerate(tokens):
        if tok.start == offset:
            return i
    raise SqlParseError(f"no token starts at offset {offset}")


def _at_end(tokens: Sequence[Token], i: int) -> bool:
    return i >= len(tokens) or tokens[i].token_type == TokenType.SEMICOLON


def _top_words(tokens: Sequence[Token], notes: Sequence[_Annotated], clause: Optional[str] = None) -> list[str]:
    words = []
    for tok, note in zip(tokens, notes):
        if note.depth == 0 and (clause is None or note.clause == clause):
            word = _word(tok)
            if word is not None:
                words.append(word)
    return words


def rewrite(sql_text: str, sites: Sequence[AiCallSite], dialect: str = "sqlite") -> RewritePlan:
    if not sites:
        return RewritePlan(base_sql=sql_text)

    tokens = _tokenize(sql_text, dialect)
    notes = _annotate(tokens)
    top = _top_words(tokens, notes)
    if any(w in _SET_OPERATORS for w in top):
        raise UnsupportedShape("AI functions are not supported in set operations")

    from_index: Optional[int] = None
    for i, (tok, note) in enumerate(zip(tokens, notes)):
        if note.depth == 0 and _word(tok) == "FROM":
            from_index = i
            break

    edits: list[tuple[int, int, str]] = []
    calls: list[PerRowCall] = []
    renames: dict[str, str] = {}
    filters: list[str] = []

    for n, site in enumerate(sites):
        helper = f"__ai_{n}"
        if site.nested:
            raise UnsupportedShape(f"nested AI function call in {site.function}")
        first = _index_at(tokens, site.span[0])
        close = _matching_paren(tokens, first + 3)
        note = notes[first]
        if note.depth != 0:
            raise UnsupportedShape(f"{site.function} inside another expression or subquery")
        if note.clause in ("GROUP BY", "HAVING", "ORDER BY"):
            raise UnsupportedShape(f"{site.function} in {note.clause} is not supported")

        prev = tokens[first - 1] if first > 0 else None
        prev_word = _word(prev) if prev is not None else None

        if note.clause == "SELECT":
            if not (prev is not None and (prev.token_type == TokenType.COMMA or prev_word in ("SELECT", "DISTINCT", "ALL"))):
                raise UnsupportedShape(f"{site.function} must be a whole SELECT item")
            after = close + 1
            alias: Optional[str] = None
            replace_end = site.span[1]
            if after < len(tokens) and _word(tokens[after]) == "AS" and after + 1 < len(tokens):
                alias = tokens[after + 1].text
                replace_end = tokens[after + 1].end + 1
                after += 2
            elif (
                after < len(tokens)
                and tokens[after].token_type in (TokenType.VAR, TokenType.IDENTIFIER)
                and _word(tokens[after]) not in _CLAUSES
            ):
                alias = tokens[after].text
                replace_end = tokens[after].end + 1
                after += 1
            if not (_at_end(tokens, after) or tokens[after].token_type == TokenType.COMMA or _word(tokens[after]) == "FROM"):
                raise UnsupportedShape(f"{site.function} must be a whole SELECT item")
            if alias is not None:
                for clause in ("GROUP BY", "HAVING", "ORDER BY"):
                    if alias.upper() in _top_words(tokens, notes, clause) or any(
                        t.text == alias and nn.depth == 0 and nn.clause == clause
                        for t, nn in zip(tokens, notes)
                    ):
                        raise UnsupportedShape(f"AI result {alias!r} is referenced in {clause}")
            output = alias if alias is not None else sql_text[site.span[0] : site.span[1]]
            edits.append((site.span[0], replace_end, f"({site.prompt_expr}) AS {helper}"))
            calls.append(PerRowCall(site, helper, output, site.output_type, "project"))
            renames[helper] = output
        elif note.clause == "WHERE":
            if site.function != "AI.GENERATE_BOOL":
                raise UnsupportedShape(f"only AI.GENERATE_BOOL may filter rows, not {site.function}")
            if prev_word not in ("WHERE", "AND"):
                raise UnsupportedShape("an AI predicate must be a whole top-level AND conjunct")
            after = close + 1
            if not (_at_end(tokens, after) or _word(tokens[after]) in ("AND", "GROUP", "GROUP BY", "ORDER", "ORDER BY", "LIMIT")):
                raise UnsupportedShape("an AI predicate must be a whole top-level AND conjunct")
            if "OR" in _top_words(tokens, notes, "WHERE") or "NOT" in _top_words(tokens, notes, "WHERE"):
                raise UnsupportedShape("AI predicates cannot be combined with OR/NOT")
            blockers = {"GROUP BY", "HAVING", "LIMIT", "OFFSET", "DISTINCT"} & set(top)
            if blockers:
                raise UnsupportedShape(f"AI predicates cannot be combined with {sorted(blockers)[0]}")
            for i, (tok, nn) in enumerate(zip(tokens, notes)):
                if (
                    nn.depth == 0
                    and nn.clause == "SELECT"
                    and _word(tok) in _AGGREGATES
                    and i + 1 < len(tokens)
                    and tokens[i + 1].token_type == TokenType.L_PAREN
                ):
                    raise UnsupportedShape("AI predicates cannot be combined with aggregates")
            if from_index is None:
                raise UnsupportedShape("an AI predicate needs a FROM clause")
            edits.append((site.span[0], site.span[1], "1 = 1"))
            insert_at = tokens[from_index].start
            edits.append((insert_at, insert_at, f", ({site.prompt_expr}) AS {helper} "))
            calls.append(PerRowCall(site, helper, helper, "bool", "filter"))
            filters.append(helper)
        else:
            raise UnsupportedShape(f"{site.function} is only supported in SELECT items and WHERE conditions")

    base_sql = sql_text
    # Apply right to left so earlier offsets stay valid; inserts at the same
    # offset keep their site order.
    for start, end, text in sorted(edits, key=lambda e: (e[0], e[1]), reverse=True):
        base_sql = base_sql[:start] + text + base_sql[end:]
    return RewritePlan(
        base_sql=base_sql,
        per_row_calls=tuple(calls),
        reassembly=Reassembly(renames=renames, filters=tuple(filters)),
    )


# ---------------------------------------------------------------------------
# Coercion and execution


def _table_model(schema: tuple[tuple[str, str], ...]) -> type[BaseModel]:
    fields: dict[str, Any] = {name: (_TABLE_TYPES[kind], ...) for name, kind in schema}
    return create_model("GeneratedRow", **fields)


def coerce_reply(reply: str, site: AiCallSite) -> tuple[Any, Optional[str]]:
    """Return (value, warning). A warning means the value degraded to null."""
    kind = site.output_type
    if kind == "text":
        return reply.strip(), None
    if kind == "bool":
        words = re.findall(r"[a-z]+", reply.strip().lower())
        first = words[0] if words else ""
        if first in ("true", "yes"):
            return True, None
        if first in ("false", "no"):
            return False, None
        return None, f"cannot read a boolean from reply {reply.strip()[:40]!r}"
    if kind == "double":
        match = _DECIMAL_RE.search(reply)
        if match is None:
            return None, f"no decimal number in reply {reply.strip()[:40]!r}"
        return float(match.group(0)), None
    try:
        model = _table_model(site.table_schema)
        return model.model_validate(extract_json(reply)).model_dump(), None
    except (ValueError, ValidationError) as exc:
        return None, f"reply does not match table schema: {exc.__class__.__name__}"


def _prompt_text(value: Any) -> str:
    return "NULL" if value is None else str(value)


def _row_call(gateway: Gateway, session: SessionState, call: PerRowCall, value: Any) -> tuple[Any, Optional[str]]:
    site = call.call_site
    instruction = OUTPUT_INSTRUCTIONS[site.output_type]
    if site.output_type == "table":
        instruction = instruction.format(schema=", ".join(f"{n} {t}" for n, t in site.table_schema))
    req = gateway.request(
        "ai_function",
        {"function": site.function, "output_instruction": instruction, "prompt": _prompt_text(value)},
    )
    try:
        reply = gateway.generate(session, req).text
    except BudgetExhausted:
        raise
    except DarError as exc:
        return None, f"{site.function} call failed: {exc}"
    return coerce_reply(reply, site)


def execute_with_ai(
    conn: SqlBackend,
    gateway: Gateway,
    session: SessionState,
    sql_text: str,
    limits: QueryLimits = QueryLimits(),
    *,
    fanout_width: int = DEFAULT_FANOUT_WIDTH,
) -> QueryOutcome:
    try:
        sites = scan_ai_calls(sql_text, conn.dialect)
    except SqlParseError as exc:
        if not has_ai_calls(sql_text, conn.dialect):
            return conn.execute_sql(sql_text, limits)
        return QueryOutcome.failure("parse_error", str(exc))
    if not sites or conn.ai_native:
        return conn.execute_sql(sql_text, limits)

    try:
        plan = rewrite(sql_text, sites, conn.dialect)
    except (UnsupportedShape, SqlParseError) as exc:
        return QueryOutcome.failure(exc.code, str(exc))

    remaining = gateway.remaining(session)
    filtering = bool(plan.reassembly.filters)
    base_limits = limits
    if filtering:
        # Judge every base row before max_rows applies; no more than the budget can cover.
        base_limits = replace(limits, max_rows=remaining // len(plan.per_row_calls))
    base = conn.execute_sql(plan.base_sql, base_limits)
    if base.error is not None:
        return base
    if filtering and base.truncated:
        raise BudgetExhausted(
            f"AI filter needs more than {remaining} LLM calls to judge every row; budget exhausted"
        )

    jobs = [(r, c) for r in range(len(base.rows)) for c in range(len(plan.per_row_calls))]
    if len(jobs) > remaining:
        raise BudgetExhausted(
            f"AI functions need {len(jobs)} LLM calls but only {remaining} remain in the budget"
        )

    results: dict[tuple[int, int], tuple[Any, Optional[str]]] = {}
    if jobs:
        with ThreadPoolExecutor(max_workers=max(1, fanout_width)) as pool:
            futures = {
                job: pool.submit(
                    _row_call,
                    gateway,
                    session,
                    plan.per_row_calls[job[1]],
                    base.rows[job[0]].get(plan.per_row_calls[job[1]].input_column),
                )
                for job in jobs
            }
            for job in jobs:
                results[job] = futures[job].result()

    warnings = list(base.warnings)
    rows: list[dict[str, Any]] = []
    for r, base_row in enumerate(base.rows):
        values = dict(base_row)
        keep = True
        for c, call in enumerate(plan.per_row_calls):
            value, warning = results[(r, c)]
            if warning is not None:
                warnings.append(f"row {r}: {warning}")
            if call.role == "filter":
                keep = keep and value is True
            values[call.input_column] = value
        if not keep:
            continue
        out: dict[str, Any] = {}
        for column in base.columns:
            if column in plan.reassembly.filters:
                continue
            out[plan.reassembly.renames.get(column, column)] = values.get(column)
        rows.append(out)

    columns = [plan.reassembly.renames.get(c, c) for c in base.columns if c not in plan.reassembly.filters]
    if warnings:
        logger.warning("AI function evaluation produced %d warning(s)", len(warnings) - len(base.warnings))
    truncated = base.truncated
    if filtering and len(rows) > limits.max_rows:
        rows = rows[: limits.max_rows]
        truncated = True
        warnings.append(f"result truncated to {limits.max_rows} rows")
    return QueryOutcome(
        rows=rows,
        columns=columns,
        elapsed=base.elapsed,
        cost=base.cost + len(jobs),
        truncated=truncated,
        warnings=warnings,
    )
