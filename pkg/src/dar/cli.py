from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import fixtures
from .config import default_config_path, load_config, with_overrides, write_default_config
from .errors import CheckpointError, ConfigError, ConnectionFailed, InvalidBrief, PreconditionFailed
from .orchestrator import CHECKPOINT_FILE, K_PHASE, K_PLAN, brief_from_text, metrics, run_research
from .session import get_stage, load_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONNECTION = 3
EXIT_BUDGET = 4

logger = logging.getLogger(__name__)


def _path_from_env_or_default(env_key: str, default: Path) -> Path:
    value = os.environ.get(env_key)
    if value:
        return Path(value).expanduser()
    return default


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        stream=sys.stderr,
    )


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dar", description="Autonomous database research from a one-shot brief")
    sub = p.add_subparsers(dest="cmd", required=True)

    init_p = sub.add_parser("init", help="Create a default config file if missing")
    init_p.add_argument(
        "--config",
        type=Path,
        default=_path_from_env_or_default("DAR_CONFIG", default_config_path()),
        help="Config path to create (default: ~/.config/dar/config.json)",
    )

    run_p = sub.add_parser("run", help="Run one research session")
    run_p.add_argument("--brief", type=Path, required=True, help="Brief file: plain text or a JSON brief")
    run_p.add_argument(
        "--config",
        type=Path,
        default=_path_from_env_or_default("DAR_CONFIG", default_config_path()),
        help="Config path (default: ~/.config/dar/config.json)",
    )
    run_p.add_argument("--out", type=Path, default=Path("out"), help="Output directory (default: ./out)")
    run_p.add_argument("--dry-run", action="store_true", help="Stop after planning and print the plan")
    run_p.add_argument("--resume", action="store_true", help="Continue from <out>/checkpoint.json")
    run_p.add_argument("--verbose", action="store_true", help="Verbose logging")
    run_p.add_argument("--max-llm-calls", type=int, default=None, help="Override [budget].max_llm_calls")
    run_p.add_argument("--theta", type=float, default=None, help="Override [report].theta")
    run_p.add_argument("--max-revisions", type=int, default=None, help="Override [report].max_revisions")
    run_p.add_argument(
        "--max-review-iterations", type=int, default=None, help="Override [pipeline].max_review_iterations"
    )

    fix_p = sub.add_parser("fixture", help="Generate the synthetic asset/incident database")
    fix_p.add_argument("--seed", type=int, default=fixtures.DEFAULT_SEED)
    fix_p.add_argument("--assets", type=int, default=fixtures.DEFAULT_ASSETS)
    fix_p.add_argument("--incidents", type=int, default=fixtures.DEFAULT_INCIDENTS)
    fix_p.add_argument("--out", type=Path, default=Path("research_poc.sqlite"), help="Database file to write")
    fix_p.add_argument("--verbose", action="store_true", help="Verbose logging")

    insp_p = sub.add_parser("inspect", help="Pretty-print a checkpoint")
    insp_p.add_argument("checkpoint", type=Path, help="Checkpoint file or output directory")

    return p


def _cmd_init(args: argparse.Namespace) -> int:
    config_path: Path = args.config
    write_default_config(config_path)
    print(f"Wrote config (if missing): {config_path}")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    config_path: Path = args.config
    _configure_logging(bool(args.verbose))

    if not config_path.exists():
        print(f"Config not found at {config_path}. Run `dar init` first.", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = with_overrides(
            load_config(config_path),
            max_llm_calls=args.max_llm_calls,
            theta=args.theta,
            max_revisions=args.max_revisions,
            max_review_iterations=args.max_review_iterations,
        )
        brief = brief_from_text(args.brief.read_text(encoding="utf-8"), config)
    except OSError as exc:
        print(f"Cannot read brief {args.brief}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, InvalidBrief) as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = run_research(brief, config, out_dir=args.out, resume=bool(args.resume), dry_run=bool(args.dry_run))
    except ConfigError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConnectionFailed, CheckpointError) as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_CONNECTION if isinstance(exc, ConnectionFailed) else EXIT_CONFIG

    if args.dry_run:
        if result.plan is None:
            print("No plan was produced.")
        else:
            print("Plan:")
            for subtask in result.plan.subtasks:
                print(f"  {subtask.id} [{subtask.expected_output}] {subtask.objective}")
                print(f"      tables: {', '.join(subtask.referenced_tables)}")
        return EXIT_OK

    m = result.metrics
    print(
        "Run: "
        f"status={m.status} "
        f"llm_calls={m.llm_calls} "
        f"sql_executions={m.sql_executions} "
        f"revisions={m.revisions} "
        f"quality={'-' if m.quality_score is None else f'{m.quality_score:.2f}'} "
        f"report={args.out / 'report.md'}"
    )
    validated = any(a.verdict.passed for a in result.session.query_history)
    if m.status == "budget_exhausted" and not validated:
        return EXIT_BUDGET
    return EXIT_OK


def _cmd_fixture(args: argparse.Namespace) -> int:
    _configure_logging(bool(args.verbose))
    try:
        path = fixtures.generate_fixture(args.seed, args.assets, args.incidents, args.out)
    except PreconditionFailed as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"Wrote fixture: {path} ({args.assets} assets, {args.incidents} incidents, seed {args.seed})")
    print(f"Ground truth: {fixtures.sidecar_path(path)}")
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    path: Path = args.checkpoint
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    try:
        session = load_checkpoint(path)
    except CheckpointError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_CONFIG

    print(f"Brief: {session.brief.objective.strip().splitlines()[0]}")
    print(f"Phase completed: {get_stage(session, K_PHASE) or 'none'}")
    plan = get_stage(session, K_PLAN)
    if plan is not None:
        print("Plan:")
        for subtask in plan.subtasks:
            print(f"  {subtask.id} [{subtask.expected_output}] {subtask.objective}")
    print("Attempts:")
    if not session.query_history:
        print("  (none)")
    for attempt in session.query_history:
        error = attempt.outcome.error
        detail = f" {error.code}" if error else f" rows={len(attempt.outcome.rows)}"
        print(f"  {attempt.candidate.query_id} {attempt.verdict.status}/{attempt.verdict.reason}{detail}")
    m = metrics(session)
    c = session.counters
    print(
        "Counters: "
        f"llm_calls={c.llm_calls} "
        f"sql_executions={c.sql_executions} "
        f"query_review_iterations={c.query_review_iterations} "
        f"revision_iterations={c.revision_iterations} "
        f"status={m.status}"
    )
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> None:
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.cmd == "init":
        raise SystemExit(_cmd_init(args))
    if args.cmd == "run":
        raise SystemExit(_cmd_run(args))
    if args.cmd == "fixture":
        raise SystemExit(_cmd_fixture(args))
    if args.cmd == "inspect":
        raise SystemExit(_cmd_inspect(args))

    raise SystemExit(EXIT_CONFIG)
