"""Append-only run record: events, graph frames, token/cost accounting, stats.

The ledger is a line-delimited JSON file flushed after every record, so a
multi-hour run stays inspectable live and a crash loses at most the in-flight
line.  Frames snapshot node statuses and edges after every plan mutation and
every status change; the trace exporter turns them into a layered text or DOT
rendering.  Replay determinism is defined modulo timestamp fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, ROUND_HALF_UP
from enum import Enum
from pathlib import Path
from typing import IO, Any

from .agents import TokenUsage
from .plan import ProofPlan, Status, apply_diff, diff_from_text, plan_from_text, set_status


class LedgerError(Exception):
    pass


class LedgerClosed(LedgerError):
    pass


class UnsupportedFormat(LedgerError):
    pass


class EmptyInput(LedgerError):
    pass


class UnsolvedIncluded(LedgerError):
    pass


class CycleError(LedgerError):
    pass


class EventKind(str, Enum):
    PLAN_CREATED = "PlanCreated"
    DIFF_APPLIED = "DiffApplied"
    LEAN_ATTEMPT = "LeanAttempt"
    BUILD_CLEAN = "BuildClean"
    BUILD_SORRIES = "BuildSorries"
    CHECK_PASS = "CheckPass"
    CHECK_FAIL = "CheckFail"
    NODE_CLOSED = "NodeClosed"
    NODE_FAILING = "NodeFailing"
    RESTART = "Restart"
    SUCCESS_EXIT = "SuccessExit"
    BUDGET_STOP = "BudgetStop"


# Frame status vocabulary mirrors the trace legend, not the plan enum.
FRAME_STATUS = {
    Status.CLOSED: "formalized",
    Status.OPEN: "not-yet",
    Status.FAILING: "failing",
}

FRAME_COLORS = {
    "formalized": "#3B5B92",
    "not-yet": "#B4B7BD",
    "failing": "#B65F45",
}


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass(frozen=True)
class LoopEvent:
    ts: str
    kind: EventKind
    node_id: str | None = None
    detail: str = ""
    data: dict[str, Any] | None = None


@dataclass(frozen=True)
class Frame:
    index: int
    node_states: dict[str, str]
    edges: tuple[tuple[str, str], ...]
    plan_revision: int


@dataclass(frozen=True)
class UsageRecord:
    ts: str
    kind: str
    check_kind: str | None
    node_id: str | None
    usage: TokenUsage
    elapsed: float


@dataclass(frozen=True)
class Outcome:
    verdict: str  # "solved" | "unfinished"
    reason: str | None
    wall_clock: float
    statement_count: int
    revision: int


@dataclass
class RunLedger:
    """In-memory view of one run's record; optionally mirrored to a file."""

    run_id: str
    events: list[LoopEvent] = field(default_factory=list)
    frames: list[Frame] = field(default_factory=list)
    usage_records: list[UsageRecord] = field(default_factory=list)
    outcome: Outcome | None = None
    _sink: IO[str] | None = None
    _closed: bool = False

    @property
    def usage_total(self) -> TokenUsage:
        total = TokenUsage()
        for record in self.usage_records:
            total = total + record.usage
        return total

    def _emit(self, record: dict[str, Any]) -> None:
        if self._sink is not None:
            self._sink.write(json.dumps(record, ensure_ascii=False) + "\n")
            self._sink.flush()

    def record_event(self, kind: EventKind, node_id: str | None = None,
                     detail: str = "", data: dict[str, Any] | None = None) -> LoopEvent:
        if self._closed:
            raise LedgerClosed("ledger already closed")
        event = LoopEvent(utc_now_iso(), kind, node_id, detail, data)
        self.events.append(event)
        record: dict[str, Any] = {
            "rec": "event", "ts": event.ts, "kind": kind.value,
            "node": node_id, "detail": detail,
        }
        if data is not None:
            record["data"] = data
        self._emit(record)
        return event

    def snapshot_frame(self, plan: ProofPlan) -> Frame:
        if self._closed:
            raise LedgerClosed("ledger already closed")
        frame = Frame(
            index=len(self.frames),
            node_states={nid: FRAME_STATUS[plan.nodes[nid].status] for nid in plan.order},
            edges=tuple(plan.edges()),
            plan_revision=plan.revision,
        )
        self.frames.append(frame)
        self._emit({
            "rec": "frame", "index": frame.index, "revision": frame.plan_revision,
            "nodes": frame.node_states, "edges": [list(e) for e in frame.edges],
        })
        return frame

    def record_usage(self, kind: str, check_kind: str | None, node_id: str | None,
                     usage: TokenUsage, elapsed: float) -> None:
        if self._closed:
            raise LedgerClosed("ledger already closed")
        record = UsageRecord(utc_now_iso(), kind, check_kind, node_id, usage, elapsed)
        self.usage_records.append(record)
        self._emit({
            "rec": "usage", "ts": record.ts, "kind": kind, "check": check_kind,
            "node": node_id, "prompt": usage.prompt, "completion": usage.completion,
            "cache_read": usage.cache_read, "cache_write": usage.cache_write,
            "elapsed": elapsed,
        })

    def record_outcome(self, outcome: Outcome) -> None:
        if self._closed:
            raise LedgerClosed("ledger already closed")
        self.outcome = outcome
        total = self.usage_total
        self._emit({
            "rec": "outcome", "verdict": outcome.verdict, "reason": outcome.reason,
            "wall_clock": outcome.wall_clock, "statement_count": outcome.statement_count,
            "revision": outcome.revision,
            "usage_total": {
                "prompt": total.prompt, "completion": total.completion,
                "cache_read": total.cache_read, "cache_write": total.cache_write,
            },
        })
        self._closed = True
        if self._sink is not None:
            self._sink.close()
            self._sink = None


def open_ledger(run_id: str, path: Path | None = None, meta: dict[str, Any] | None = None) -> RunLedger:
    sink: IO[str] | None = None
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        sink = path.open("w", encoding="utf-8")
    ledger = RunLedger(run_id=run_id, _sink=sink)
    header = {"rec": "run", "version": 1, "run_id": run_id}
    if meta:
        header.update(meta)
    ledger._emit(header)
    return ledger


def read_ledger_records(path: Path) -> list[dict[str, Any]]:
    """Read JSON-line records, tolerating a truncated final line."""
    records: list[dict[str, Any]] = []
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                break  # in-flight record from an interrupted run
    return records


def load_ledger(path: Path) -> RunLedger:
    records = read_ledger_records(path)
    if not records or records[0].get("rec") != "run":
        raise LedgerError(f"{path} is not a run ledger")
    ledger = RunLedger(run_id=records[0].get("run_id", ""))
    ledger._closed = True
    for record in records[1:]:
        kind = record.get("rec")
        if kind == "event":
            ledger.events.append(LoopEvent(
                record.get("ts", ""), EventKind(record["kind"]),
                record.get("node"), record.get("detail", ""), record.get("data"),
            ))
        elif kind == "frame":
            ledger.frames.append(Frame(
                record["index"], dict(record["nodes"]),
                tuple((dep, node) for dep, node in record["edges"]),
                record["revision"],
            ))
        elif kind == "usage":
            ledger.usage_records.append(UsageRecord(
                record.get("ts", ""), record.get("kind", ""), record.get("check"),
                record.get("node"),
                TokenUsage(record.get("prompt", 0), record.get("completion", 0),
                           record.get("cache_read", 0), record.get("cache_write", 0)),
                record.get("elapsed", 0.0),
            ))
        elif kind == "outcome":
            ledger.outcome = Outcome(
                record["verdict"], record.get("reason"), record.get("wall_clock", 0.0),
                record.get("statement_count", 0), record.get("revision", 0),
            )
    return ledger


class ReplayMismatch(LedgerError):
    pass


def verify_replay(records: list[dict[str, Any]]) -> tuple[int, int]:
    """Re-execute the ledger's diffs and check every frame against them.

    Returns (frames checked, diffs applied); raises :class:`ReplayMismatch`
    on the first inconsistent frame or invalidation set.  A CheckFail event
    with an ``audit:`` detail reopens the anchor node, mirroring the loop.
    """
    plan: ProofPlan | None = None
    frames_checked = 0
    diffs_applied = 0
    for record in records:
        rec = record.get("rec")
        if rec == "event":
            kind = record.get("kind")
            data = record.get("data") or {}
            node = record.get("node")
            if kind == EventKind.PLAN_CREATED.value:
                plan = plan_from_text(data["plan"])
            elif kind == EventKind.DIFF_APPLIED.value:
                if plan is None:
                    raise ReplayMismatch("diff applied before any plan was created")
                diff = diff_from_text(data["diff"])
                plan, invalidated = apply_diff(plan, diff)
                diffs_applied += 1
                if sorted(invalidated) != list(data.get("invalidated", [])):
                    raise ReplayMismatch(
                        f"diff #{diffs_applied}: invalidated set {sorted(invalidated)} "
                        f"!= recorded {data.get('invalidated')}")
            elif kind == EventKind.NODE_CLOSED.value and plan is not None:
                plan = set_status(plan, node, Status.CLOSED)
            elif kind == EventKind.NODE_FAILING.value and plan is not None:
                plan = set_status(plan, node, Status.FAILING)
            elif (kind == EventKind.CHECK_FAIL.value and plan is not None
                  and record.get("detail", "").startswith("audit:")):
                plan = set_status(plan, node, Status.OPEN)
        elif rec == "frame":
            if plan is None:
                raise ReplayMismatch("frame recorded before any plan was created")
            expected = {nid: FRAME_STATUS[plan.nodes[nid].status] for nid in plan.order}
            if record["nodes"] != expected:
                raise ReplayMismatch(f"frame {record['index']}: node states diverge")
            if [list(e) for e in plan.edges()] != record["edges"]:
                raise ReplayMismatch(f"frame {record['index']}: edges diverge")
            if record["revision"] != plan.revision:
                raise ReplayMismatch(f"frame {record['index']}: revision diverges")
            if record["index"] != frames_checked:
                raise ReplayMismatch(f"frame index {record['index']} out of sequence")
            frames_checked += 1
    return frames_checked, diffs_applied


# ---------------------------------------------------------------------------
# Layered layout: level 0 for dep-free nodes, else one above the deepest dep.

def depth_layout(frame: Frame) -> dict[str, int]:
    deps: dict[str, list[str]] = {node: [] for node in frame.node_states}
    for dep, node in frame.edges:
        if node in deps and dep in frame.node_states:
            deps[node].append(dep)
    levels: dict[str, int] = {}
    visiting: set[str] = set()

    def level_of(node: str) -> int:
        if node in levels:
            return levels[node]
        if node in visiting:
            raise CycleError(f"frame edges contain a cycle through {node}")
        visiting.add(node)
        value = 0 if not deps[node] else 1 + max(level_of(d) for d in deps[node])
        visiting.discard(node)
        levels[node] = value
        return value

    for node in frame.node_states:
        level_of(node)
    return levels


# ---------------------------------------------------------------------------
# Cost accounting (USD, half-up to cents) and multi-run statistics.

@dataclass(frozen=True)
class CostModel:
    """USD per million tokens for each usage class."""

    prompt: Decimal
    completion: Decimal
    cache_read: Decimal
    cache_write: Decimal

    def __post_init__(self) -> None:
        for name in ("prompt", "completion", "cache_read", "cache_write"):
            value = Decimal(str(getattr(self, name)))
            if value < 0:
                raise LedgerError(f"negative rate for {name}")
            object.__setattr__(self, name, value)


ZERO_RATES = CostModel(Decimal(0), Decimal(0), Decimal(0), Decimal(0))

_CENT = Decimal("0.01")
_MILLION = Decimal(1_000_000)


def cost(usage: TokenUsage, model: CostModel) -> Decimal:
    """Dot product of counts (in millions) with rates, rounded half-up to cents."""
    exact = (
        usage.prompt * model.prompt
        + usage.completion * model.completion
        + usage.cache_read * model.cache_read
        + usage.cache_write * model.cache_write
    ) / _MILLION
    return exact.quantize(_CENT, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class RunStats:
    mean_time_h: float
    std_time_h: float
    median_time_h: float
    min_time_h: float
    max_time_h: float
    mean_statements: float
    std_statements: float
    mean_min_per_stmt: float
    std_min_per_stmt: float
    runs: int


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def _sample_std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    m = _mean(values)
    return (sum((v - m) ** 2 for v in values) / (len(values) - 1)) ** 0.5


def _median(values: list[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2


def aggregate_stats(ledgers: list[RunLedger]) -> RunStats:
    """Sample statistics over solved runs; minutes/statement is the per-run ratio."""
    if not ledgers:
        raise EmptyInput("no ledgers to aggregate")
    for ledger in ledgers:
        if ledger.outcome is None or ledger.outcome.verdict != "solved":
            raise UnsolvedIncluded(f"run {ledger.run_id} is not solved")
    hours = [ledger.outcome.wall_clock / 3600.0 for ledger in ledgers]
    stmts = [float(ledger.outcome.statement_count) for ledger in ledgers]
    ratios = [
        (ledger.outcome.wall_clock / 60.0) / ledger.outcome.statement_count
        for ledger in ledgers
    ]
    return RunStats(
        mean_time_h=_mean(hours), std_time_h=_sample_std(hours),
        median_time_h=_median(hours), min_time_h=min(hours), max_time_h=max(hours),
        mean_statements=_mean(stmts), std_statements=_sample_std(stmts),
        mean_min_per_stmt=_mean(ratios), std_min_per_stmt=_sample_std(ratios),
        runs=len(ledgers),
    )


def render_stats_row(stats: RunStats) -> str:
    """One mean±std row: time, median, min-max, statements, minutes/statement."""
    return (
        f"{stats.mean_time_h:.2f}±{stats.std_time_h:.2f}h"
        f" | {stats.median_time_h:.2f}h"
        f" | {stats.min_time_h:.2f}-{stats.max_time_h:.2f}h"
        f" | {stats.mean_statements:.1f}±{stats.std_statements:.1f}"
        f" | {stats.mean_min_per_stmt:.1f}±{stats.std_min_per_stmt:.1f}"
    )


# ---------------------------------------------------------------------------
# Trace export.

TRACE_FORMATS = ("text", "dot")


def _ordered_nodes(frame: Frame) -> list[tuple[int, str]]:
    levels = depth_layout(frame)
    return sorted((levels[node], node) for node in frame.node_states)


def export_trace(ledger: RunLedger, fmt: str) -> str:
    """Render every frame; deterministic ordering by (level, node id)."""
    if fmt not in TRACE_FORMATS:
        raise UnsupportedFormat(f"unsupported trace format {fmt!r}")
    if not ledger.frames:
        raise LedgerError("ledger has no frames to export")
    if fmt == "text":
        lines = ["prooftrace v1"]
        for frame in ledger.frames:
            lines.append(f"frame {frame.index} revision {frame.plan_revision}")
            for level, node in _ordered_nodes(frame):
                lines.append(f"  {level} {node} {frame.node_states[node]}")
            for dep, node in sorted(frame.edges):
                lines.append(f"  edge {dep} {node}")
            lines.append("end")
        return "\n".join(lines) + "\n"

    chunks: list[str] = []
    for frame in ledger.frames:
        lines = [f"digraph frame{frame.index} {{"]
        lines.append('  rankdir=BT;')
        lines.append('  node [shape=box, style=filled];')
        for level, node in _ordered_nodes(frame):
            status = frame.node_states[node]
            color = FRAME_COLORS[status]
            lines.append(
                f'  "{node}" [class="{status}", fillcolor="{color}", label="{node}\\nL{level}"];'
            )
        for dep, node in sorted(frame.edges):
            lines.append(f'  "{dep}" -> "{node}";')
        lines.append("}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"
