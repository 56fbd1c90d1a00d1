"""Operator entry point: run, replay, audit, trace and stats commands.

Every command prints exactly one machine-readable JSON summary line on stdout;
human-oriented logs go to stderr.  Exit codes: 0 success, 1 unfinished run or
failed audit/replay, 2 usage or input error, 3 environment error (missing
toolchain or credentials).  Option precedence is command-line flag over config
file over environment variable; the live-backend auth token is read only from
the environment, never from a flag.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from decimal import Decimal
from pathlib import Path

from .agents import (
    AuthError,
    FixtureParse,
    LiveBackend,
    LiveConfig,
    ScriptedBackend,
    load_fixture,
)
from .leanenv import (
    DEFAULT_PERMITTED_AXIOMS,
    RealVerifier,
    SimVerifier,
    ToolchainMissing,
    VerifierError,
    Workspace,
    audit_verdict,
    extract_signature_text,
    load_sim_rules,
)
from .ledger import (
    CostModel,
    LedgerError,
    ReplayMismatch,
    UnsupportedFormat,
    ZERO_RATES,
    aggregate_stats,
    cost,
    export_trace,
    load_ledger,
    read_ledger_records,
    render_stats_row,
    verify_replay,
)
from .looper import InputError, LoopConfig, Verdict, run

logger = logging.getLogger("proofloop")

EXIT_OK = 0
EXIT_UNFINISHED = 1
EXIT_USAGE = 2
EXIT_ENV = 3

LOCK_FILE = ".proofloop.lock"
ANCHOR_FILE = ".proofloop-anchor.json"

_DURATION_RE = re.compile(r"^(?:(\d+)h)?(?:(\d+)m)?(?:(\d+(?:\.\d+)?)s)?$")


class UsageError(Exception):
    pass


def parse_duration(text: str) -> float:
    """Accept '4h', '90m', '10s', '1h30m', or a bare number of seconds."""
    text = text.strip()
    if not text:
        raise UsageError("empty duration")
    try:
        return float(text)
    except ValueError:
        pass
    match = _DURATION_RE.match(text)
    if not match or not any(match.groups()):
        raise UsageError(f"cannot parse duration {text!r}")
    hours, minutes, seconds = match.groups()
    return float(hours or 0) * 3600 + float(minutes or 0) * 60 + float(seconds or 0)


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, ensure_ascii=False, default=str) + "\n")


class _Options:
    """Flag > config file > environment resolution for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: dict = {}
        config_path = getattr(args, "config", None) or os.environ.get("PROOFLOOP_CONFIG")
        if config_path:
            try:
                self.config = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config file {config_path}: {exc}") from exc

    def get(self, name: str, default=None):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        if name in self.config:
            return self.config[name]
        env = os.environ.get("PROOFLOOP_" + name.upper())
        if env is not None:
            return env
        return default


def _permitted(opts: _Options) -> frozenset[str]:
    permit = opts.get("permit")
    if not permit:
        return DEFAULT_PERMITTED_AXIOMS
    if isinstance(permit, str):
        return frozenset(permit.split())
    return frozenset(permit)


def _loop_config(opts: _Options) -> LoopConfig:
    stop_file = opts.get("stop_file")
    return LoopConfig(
        wall_clock_budget=parse_duration(str(opts.get("wall_clock", "4h"))),
        compile_budget=int(opts.get("compile_budget", 8)),
        replan_limit=int(opts.get("replan_limit", 64)),
        check_retry_limit=int(opts.get("check_retry_limit", 2)),
        permitted_axioms=_permitted(opts),
        stop_file=Path(stop_file) if stop_file else None,
    )


def _make_backend(opts: _Options):
    backend = str(opts.get("backend", "scripted"))
    if backend == "scripted":
        fixture_path = opts.get("fixture")
        if not fixture_path:
            raise UsageError("scripted backend needs --fixture")
        return ScriptedBackend(load_fixture(Path(fixture_path)))
    if backend == "live":
        endpoint = opts.get("endpoint")
        model = opts.get("model")
        if not endpoint or not model:
            raise UsageError("live backend needs --endpoint and --model")
        return LiveBackend(LiveConfig(endpoint=str(endpoint), model=str(model)))
    raise UsageError(f"unknown backend {backend!r}")


def _make_verifier(opts: _Options):
    verifier = str(opts.get("verifier", "sim"))
    if verifier == "sim":
        rules_path = opts.get("sim_rules")
        return SimVerifier(load_sim_rules(Path(rules_path) if rules_path else None))
    if verifier == "real":
        timeout = parse_duration(str(opts.get("build_timeout", "20m")))
        lake = "lake"
        toolchain_root = opts.get("toolchain_root")
        if toolchain_root:
            lake = str(Path(toolchain_root) / "bin" / "lake")
        return RealVerifier(lake_cmd=lake, build_timeout=timeout)
    raise UsageError(f"unknown verifier {verifier!r}")


def _rates(opts: _Options) -> CostModel:
    rates_path = opts.get("rates")
    if not rates_path:
        return ZERO_RATES
    data = json.loads(Path(rates_path).read_text(encoding="utf-8"))
    return CostModel(Decimal(str(data.get("prompt", 0))),
                     Decimal(str(data.get("completion", 0))),
                     Decimal(str(data.get("cache_read", 0))),
                     Decimal(str(data.get("cache_write", 0))))


class _WorkspaceLock:
    def __init__(self, workspace_dir: Path):
        self.path = workspace_dir / LOCK_FILE
        self.acquired = False

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"workspace is locked by {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self.acquired = True
        return self

    def __exit__(self, *exc_info):
        if self.acquired and self.path.exists():
            self.path.unlink()
        return False


def cmd_run(args: argparse.Namespace) -> int:
    opts = _Options(args)
    input_file = Path(args.file)
    if not input_file.is_file():
        logger.error("input file %s does not exist", input_file)
        return EXIT_USAGE
    out_dir = Path(opts.get("out", "proofloop-out"))
    workspace_dir = out_dir / "workspace"
    ledger_path = out_dir / "ledger.jsonl"
    try:
        config = _loop_config(opts)
        backend = _make_backend(opts)
        verifier = _make_verifier(opts)
    except (UsageError, FixtureParse, OSError, VerifierError, ValueError) as exc:
        if isinstance(exc, ToolchainMissing):
            logger.error("%s", exc)
            return EXIT_ENV
        logger.error("%s", exc)
        return EXIT_USAGE
    try:
        with _WorkspaceLock(workspace_dir):
            outcome, ledger = run(input_file, backend, verifier, config,
                                  workspace_dir=workspace_dir, ledger_path=ledger_path,
                                  run_id=opts.get("run_id"))
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except InputError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except ToolchainMissing as exc:
        logger.error("%s", exc)
        return EXIT_ENV
    except AuthError as exc:
        logger.error("%s", exc)
        return EXIT_ENV
    total = ledger.usage_total
    usd = cost(total, _rates(opts))
    _emit({
        "command": "run",
        "verdict": outcome.verdict.value,
        "reason": outcome.reason.value if outcome.reason else None,
        "plan_size": ledger.outcome.statement_count if ledger.outcome else 0,
        "revision": outcome.final_plan_revision,
        "wall_clock": round(ledger.outcome.wall_clock, 3) if ledger.outcome else 0.0,
        "frames": len(ledger.frames),
        "usage": {"prompt": total.prompt, "completion": total.completion,
                  "cache_read": total.cache_read, "cache_write": total.cache_write},
        "cost_usd": str(usd),
        "ledger": str(ledger_path),
        "workspace": str(workspace_dir),
    })
    return EXIT_OK if outcome.verdict is Verdict.SOLVED else EXIT_UNFINISHED


def _load_anchor(args: argparse.Namespace, workspace_dir: Path) -> tuple[str, str]:
    """Resolve (decl name, signature) from --anchor/--decl or the sidecar file."""
    decl = getattr(args, "decl", None)
    anchor_file = getattr(args, "anchor", None)
    if anchor_file:
        text = Path(anchor_file).read_text(encoding="utf-8")
        if not decl:
            from .looper import find_anchor

            found = find_anchor(text)
            return found.decl_name, found.signature_text
        sig = extract_signature_text(text, decl)
        return decl, sig.normalized
    sidecar = workspace_dir / ANCHOR_FILE
    if sidecar.is_file():
        data = json.loads(sidecar.read_text(encoding="utf-8"))
        return data["decl_name"], data["signature"]
    raise UsageError("no anchor information: pass --anchor FILE or audit a run workspace")


def cmd_audit(args: argparse.Namespace) -> int:
    opts = _Options(args)
    workspace_dir = Path(args.workspace)
    if not workspace_dir.is_dir():
        logger.error("workspace %s does not exist", workspace_dir)
        return EXIT_USAGE
    try:
        verifier = _make_verifier(opts)
        verifier.ensure_available()
        decl, signature = _load_anchor(args, workspace_dir)
    except ToolchainMissing as exc:
        logger.error("%s", exc)
        return EXIT_ENV
    except (UsageError, OSError, VerifierError, json.JSONDecodeError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    ws = Workspace(root_dir=workspace_dir)
    for path in sorted(workspace_dir.rglob("*.lean")):
        rel = str(path.relative_to(workspace_dir))
        node_id = path.stem
        ws.node_files[node_id] = rel
    target_rel = None
    for node_id, rel in ws.node_files.items():
        try:
            extract_signature_text((workspace_dir / rel).read_text(encoding="utf-8"), decl)
            target_rel = rel
            break
        except VerifierError:
            continue
    ws.target_file = target_rel or ""
    try:
        report = audit_verdict(ws, signature, decl, verifier, _permitted(opts))
    except ToolchainMissing as exc:
        logger.error("%s", exc)
        return EXIT_ENV
    _emit({
        "command": "audit",
        "pass": report.passed,
        "signature_match": report.signature_match,
        "axioms": sorted(report.axioms_used),
        "forbidden": [list(x) for x in report.forbidden_occurrences],
        "detail": report.detail,
    })
    return EXIT_OK if report.passed else EXIT_UNFINISHED


def cmd_replay(args: argparse.Namespace) -> int:
    path = Path(args.ledger)
    if not path.is_file():
        logger.error("ledger %s does not exist", path)
        return EXIT_USAGE
    records = read_ledger_records(path)
    try:
        frames, diffs = verify_replay(records)
    except ReplayMismatch as exc:
        _emit({"command": "replay", "consistent": False, "error": str(exc)})
        return EXIT_UNFINISHED
    except (LedgerError, Exception) as exc:  # malformed ledgers
        if isinstance(exc, ReplayMismatch):
            raise
        logger.error("cannot replay %s: %s", path, exc)
        return EXIT_USAGE
    _emit({"command": "replay", "consistent": True, "frames": frames, "diffs": diffs,
           "note": "frames consistent"})
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    path = Path(args.ledger)
    if not path.is_file():
        logger.error("ledger %s does not exist", path)
        return EXIT_USAGE
    try:
        ledger = load_ledger(path)
        rendered = export_trace(ledger, args.format)
    except (UnsupportedFormat, LedgerError, ValueError, KeyError) as exc:
        logger.error("cannot export trace: %s", exc)
        return EXIT_USAGE
    out = Path(args.out) if args.out else path.with_suffix(f".{args.format}")
    out.write_text(rendered, encoding="utf-8")
    _emit({"command": "trace", "format": args.format, "frames": len(ledger.frames),
           "out": str(out)})
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    paths = [Path(p) for p in args.ledgers]
    if not paths:
        logger.error("no ledger files given")
        return EXIT_USAGE
    try:
        ledgers = [load_ledger(p) for p in paths]
        stats = aggregate_stats(ledgers)
    except (LedgerError, OSError, ValueError, KeyError) as exc:
        logger.error("cannot aggregate: %s", exc)
        return EXIT_USAGE
    row = render_stats_row(stats)
    _emit({
        "command": "stats", "runs": stats.runs, "row": row,
        "mean_time_h": round(stats.mean_time_h, 6),
        "std_time_h": round(stats.std_time_h, 6),
        "median_time_h": round(stats.median_time_h, 6),
        "min_time_h": round(stats.min_time_h, 6),
        "max_time_h": round(stats.max_time_h, 6),
        "mean_statements": round(stats.mean_statements, 6),
        "std_statements": round(stats.std_statements, 6),
        "mean_min_per_stmt": round(stats.mean_min_per_stmt, 6),
        "std_min_per_stmt": round(stats.std_min_per_stmt, 6),
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proofloop",
        description="Close sorry declarations in a Lean 4 file with a recursive "
                    "planning/lean/check agent loop.",
    )
    parser.add_argument("--log-level", default=os.environ.get("PROOFLOOP_LOG", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the loop on a .lean file")
    p_run.add_argument("file")
    p_run.add_argument("--backend", choices=["scripted", "live"])
    p_run.add_argument("--fixture", help="fixture file for the scripted backend")
    p_run.add_argument("--verifier", choices=["sim", "real"])
    p_run.add_argument("--sim-rules", dest="sim_rules", help="rule table for the sim verifier")
    p_run.add_argument("--build-timeout", dest="build_timeout",
                       help="per-build timeout for the real verifier (default 20m)")
    p_run.add_argument("--wall-clock", dest="wall_clock", help="e.g. 4h, 30m, 10s")
    p_run.add_argument("--compile-budget", dest="compile_budget", type=int)
    p_run.add_argument("--replan-limit", dest="replan_limit", type=int)
    p_run.add_argument("--check-retry-limit", dest="check_retry_limit", type=int)
    p_run.add_argument("--permit", action="append", help="permitted axiom (repeatable)")
    p_run.add_argument("--out", help="output directory (ledger + workspace)")
    p_run.add_argument("--config", help="JSON config file")
    p_run.add_argument("--rates", help="JSON cost-model rates file")
    p_run.add_argument("--endpoint", help="live backend endpoint URL")
    p_run.add_argument("--model", help="live backend model name")
    p_run.add_argument("--stop-file", dest="stop_file", help="cooperative cancellation file")
    p_run.add_argument("--run-id", dest="run_id")
    p_run.set_defaults(func=cmd_run)

    p_audit = sub.add_parser("audit", help="audit a workspace against the solved condition")
    p_audit.add_argument("workspace")
    p_audit.add_argument("--decl", help="target declaration name")
    p_audit.add_argument("--anchor", help=".lean file carrying the original declaration")
    p_audit.add_argument("--permit", action="append")
    p_audit.add_argument("--verifier", choices=["sim", "real"])
    p_audit.add_argument("--sim-rules", dest="sim_rules")
    p_audit.add_argument("--build-timeout", dest="build_timeout")
    p_audit.add_argument("--config")
    p_audit.set_defaults(func=cmd_audit)

    p_replay = sub.add_parser("replay", help="re-execute a ledger's diffs and verify frames")
    p_replay.add_argument("ledger")
    p_replay.set_defaults(func=cmd_replay)

    p_trace = sub.add_parser("trace", help="export the frame sequence of a ledger")
    p_trace.add_argument("ledger")
    p_trace.add_argument("--format", choices=["text", "dot"], default="text")
    p_trace.add_argument("--out")
    p_trace.set_defaults(func=cmd_trace)

    p_stats = sub.add_parser("stats", help="aggregate statistics over solved-run ledgers")
    p_stats.add_argument("ledgers", nargs="+")
    p_stats.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
