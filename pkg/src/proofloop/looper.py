"""The recursive outer loop: select, prove, check, replan, audit, stop.

One run walks the proof plan in dependency order.  Each open statement gets a
Lean work cycle (invoke, write, build, repeat up to the compile budget).  A
clean build goes to the faithfulness check before the loop advances; a build
that still carries sorries, or a cycle that exhausts its budget, goes to the
math check and then the decomposition check.  Any failed check turns into a
plan diff from the planning agent, downstream statements are invalidated, and
selection restarts from the top of the revised plan.  The run counts as solved
only when every statement is closed and the final workspace passes the
signature and kernel-level axiom audit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .agents import (
    AgentTask,
    AuthError,
    BackendUnavailable,
    CheckKind,
    CheckVerdict,
    InvokeRecord,
    LeanOutcome,
    LocalContext,
    MalformedResponse,
    TaskKind,
    assemble_context,
    invoke,
)
from .leanenv import (
    BuildReport,
    DECL_KEYWORDS,
    DEFAULT_PERMITTED_AXIOMS,
    SORRY_TOKEN_RE,
    VerifierError,
    Workspace,
    audit_verdict,
    extract_signature_text,
    mask_lean_source,
    normalize_signature,
)
from .ledger import EventKind, Outcome, RunLedger, open_ledger, utc_now_iso
from .plan import (
    AnchorDecl,
    DiffCause,
    PlanError,
    ProofPlan,
    RejectedDiff,
    Status,
    apply_diff,
    create_plan,
    is_complete,
    next_open_statement,
    plan_to_text,
    diff_to_text,
    set_status,
)

logger = logging.getLogger(__name__)


class InputError(Exception):
    """The input file is unusable (unreadable, or no sorry declaration)."""


class Verdict(str, Enum):
    SOLVED = "solved"
    UNFINISHED = "unfinished"


class StopReason(str, Enum):
    TIME_BUDGET = "time-budget"
    REPLAN_LIMIT = "replan-limit"
    BACKEND_FAILURE = "backend-failure"
    AUDIT_FAIL = "audit-fail"


@dataclass(frozen=True)
class RunOutcome:
    verdict: Verdict
    reason: StopReason | None
    final_plan_revision: int

    def __post_init__(self) -> None:
        solved = self.verdict is Verdict.SOLVED
        if solved == (self.reason is not None):
            raise ValueError("solved outcomes carry no reason; unfinished ones must")


@dataclass(frozen=True)
class LoopConfig:
    wall_clock_budget: float = 4 * 3600.0
    compile_budget: int = 8
    replan_limit: int = 64
    check_retry_limit: int = 2
    permitted_axioms: frozenset[str] = DEFAULT_PERMITTED_AXIOMS
    stop_file: Path | None = None

    def __post_init__(self) -> None:
        if self.wall_clock_budget < 0:
            raise ValueError("wall clock budget must be >= 0")
        for name in ("compile_budget", "replan_limit", "check_retry_limit"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class NextStep(str, Enum):
    CHECK_FAITHFULNESS = "check-faithfulness"
    CHECK_MATH = "check-math"
    CLOSE_AND_ADVANCE = "close-and-advance"
    CHECK_DECOMPOSITION = "check-decomposition"
    RETRY_SAME_NODE = "retry-same-node"
    REPLAN_FAITHFULNESS = "replan-faithfulness"
    REPLAN_MATH = "replan-math"
    REPLAN_SPLIT = "replan-split"


def route_build_result(report: BuildReport) -> NextStep:
    """Clean builds go to faithfulness; sorries or exhaustion go to math."""
    if report.clean:
        return NextStep.CHECK_FAITHFULNESS
    return NextStep.CHECK_MATH


_CHECK_ROUTES = {
    (CheckKind.FAITHFULNESS, True): NextStep.CLOSE_AND_ADVANCE,
    (CheckKind.FAITHFULNESS, False): NextStep.REPLAN_FAITHFULNESS,
    (CheckKind.MATH, True): NextStep.CHECK_DECOMPOSITION,
    (CheckKind.MATH, False): NextStep.REPLAN_MATH,
    (CheckKind.DECOMPOSITION, True): NextStep.RETRY_SAME_NODE,
    (CheckKind.DECOMPOSITION, False): NextStep.REPLAN_SPLIT,
}

def route_check_verdict(kind: CheckKind, verdict: CheckVerdict) -> NextStep:
    """Total routing table over (check kind, pass bit)."""
    return _CHECK_ROUTES[(kind, verdict.passed)]


# ---------------------------------------------------------------------------
# Anchor extraction from the input file.

_DECL_RE = re.compile(
    r"(?:^|(?<=\s))(%s)\s+([A-Za-z_][A-Za-z0-9_.']*)" % "|".join(DECL_KEYWORDS)
)


def find_anchor(text: str) -> AnchorDecl:
    """Locate the first sorry-bearing declaration and capture its header."""
    masked = mask_lean_source(text, mask_strings=True)
    sorry = SORRY_TOKEN_RE.search(masked)
    if sorry is None:
        raise InputError("input contains no sorry declaration")
    decls = [m for m in _DECL_RE.finditer(masked) if m.start() < sorry.start()]
    if not decls:
        raise InputError("found a sorry outside any declaration")
    target = decls[-1]
    name = target.group(2)
    try:
        sig = extract_signature_text(text, name)
    except VerifierError as exc:
        raise InputError(f"cannot extract target signature: {exc}") from exc
    assign = masked.find(":=", target.end())
    next_decl = _DECL_RE.search(masked, sorry.end())
    body_end = next_decl.start() if next_decl else len(text)
    body = text[assign if assign >= 0 else target.end():body_end]
    return AnchorDecl(name, sig.normalized, body)


# ---------------------------------------------------------------------------
# The run itself.

class _Stop(Exception):
    def __init__(self, reason: StopReason, detail: str):
        self.reason = reason
        self.detail = detail
        super().__init__(detail)


class _Run:
    def __init__(self, input_file: Path, backend, verifier, config: LoopConfig,
                 workspace_dir: Path, ledger_path: Path | None, run_id: str | None):
        try:
            self.input_text = input_file.read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read {input_file}: {exc}") from exc
        self.anchor = find_anchor(self.input_text)
        self.backend = backend
        self.verifier = verifier
        self.config = config
        if run_id is None:
            digest = hashlib.sha256()
            digest.update(self.input_text.encode("utf-8"))
            digest.update(repr((config.wall_clock_budget, config.compile_budget,
                                config.replan_limit, config.check_retry_limit,
                                sorted(config.permitted_axioms))).encode())
            run_id = digest.hexdigest()[:12]
        self.ledger = open_ledger(run_id, ledger_path, meta={
            "input": input_file.name, "started": utc_now_iso(),
            "verifier": getattr(verifier, "mode", "?"),
        })
        self.ws = Workspace(root_dir=workspace_dir)
        verifier.init_workspace(self.ws)
        self._write_anchor_sidecar()
        self.plan: ProofPlan | None = None
        self.replans = 0
        self.anchor_node_id: str | None = None
        self.node_diag: dict[str, str] = {}
        self.started = time.monotonic()

    def _write_anchor_sidecar(self) -> None:
        sidecar = self.ws.root_dir / ".proofloop-anchor.json"
        sidecar.write_text(json.dumps({
            "decl_name": self.anchor.decl_name,
            "signature": self.anchor.signature_text,
        }, ensure_ascii=False) + "\n", encoding="utf-8")

    # -- gates -------------------------------------------------------------

    def elapsed(self) -> float:
        return time.monotonic() - self.started

    def gate(self, phase: str) -> None:
        if self.config.stop_file is not None and self.config.stop_file.exists():
            raise _Stop(StopReason.TIME_BUDGET, f"stop file present before {phase}")
        if self.elapsed() >= self.config.wall_clock_budget:
            raise _Stop(StopReason.TIME_BUDGET, f"wall clock budget reached before {phase}")

    # -- agent plumbing ------------------------------------------------------

    def _invoke(self, task: AgentTask, phase: str) -> InvokeRecord:
        """One task with fresh re-invocations on malformed payloads."""
        attempts = 1 + self.config.check_retry_limit
        last: Exception | None = None
        for _ in range(attempts):
            self.gate(phase)
            try:
                record = invoke(self.backend, task)
            except MalformedResponse as exc:
                last = exc
                logger.warning("malformed response during %s: %s", phase, exc)
                continue
            except (BackendUnavailable, AuthError) as exc:
                raise _Stop(StopReason.BACKEND_FAILURE, f"{phase}: {exc}") from exc
            self.ledger.record_usage(
                task.kind.value,
                task.check_kind.value if task.check_kind else None,
                task.subject.node_id, record.usage, record.elapsed,
            )
            return record
        raise _Stop(StopReason.BACKEND_FAILURE, f"{phase}: {last}")

    # -- plan bookkeeping ----------------------------------------------------

    def _frame(self) -> None:
        assert self.plan is not None
        self.ledger.snapshot_frame(self.plan)

    def _set_status(self, node_id: str, status: Status) -> None:
        assert self.plan is not None
        self.plan = set_status(self.plan, node_id, status)

    def _close_node(self, node_id: str) -> None:
        self._set_status(node_id, Status.CLOSED)
        self.ledger.record_event(EventKind.NODE_CLOSED, node_id, "faithfulness passed")
        self._frame()

    def _mark_failing(self, node_id: str) -> None:
        assert self.plan is not None
        if self.plan.nodes[node_id].status is not Status.FAILING:
            self._set_status(node_id, Status.FAILING)
            self.ledger.record_event(EventKind.NODE_FAILING, node_id, "compile budget exhausted")
            self._frame()

    # -- phases ----------------------------------------------------------------

    def initial_plan(self) -> None:
        ctx = LocalContext(
            statement=self.anchor.signature_text,
            anchor_signature=self.anchor.signature_text,
            lean_source=self.input_text,
        )
        task = AgentTask(TaskKind.PLAN_INITIAL, ctx)
        attempts = 1 + self.config.check_retry_limit
        last_reason = ""
        for _ in range(attempts):
            record = self._invoke(task, "initial planning")
            try:
                plan = create_plan(list(record.result.diff.adds))
            except PlanError as exc:
                last_reason = str(exc)
                logger.warning("initial plan rejected: %s", exc)
                continue
            anchor_node = plan.nodes[plan.anchor_id]
            if anchor_node.anchor.decl_name != self.anchor.decl_name:
                last_reason = "initial plan anchors a different declaration"
                continue
            if (normalize_signature(anchor_node.anchor.signature_text)
                    != normalize_signature(self.anchor.signature_text)):
                last_reason = "initial plan carries a different anchor signature"
                continue
            self.plan = plan
            self.anchor_node_id = plan.anchor_id
            self.ledger.record_event(
                EventKind.PLAN_CREATED, plan.anchor_id,
                f"initial plan with {len(plan.nodes)} statements",
                data={"plan": plan_to_text(plan)},
            )
            self._frame()
            return
        raise _Stop(StopReason.BACKEND_FAILURE, f"initial planning: {last_reason}")

    def lean_cycle(self, node_id: str) -> tuple[LeanOutcome, BuildReport]:
        """Invoke-write-build until the build compiles or the budget runs out."""
        assert self.plan is not None
        budget = self.config.compile_budget
        source: str | None = None
        errors = self.node_diag.get(node_id)
        report: BuildReport | None = None
        attempts = 0
        for attempt in range(1, budget + 1):
            ctx = assemble_context(self.plan, node_id, lean_source=source, build_errors=errors)
            record = self._invoke(AgentTask(TaskKind.LEAN_WORK, ctx), f"lean work on {node_id}")
            source = record.result.lean.source
            attempts = attempt
            self.ws.write_node_source(node_id, source, is_target=node_id == self.anchor_node_id)
            self.gate(f"build for {node_id}")
            try:
                report = self.verifier.build(self.ws)
            except VerifierError as exc:
                raise _Stop(StopReason.BACKEND_FAILURE, f"build for {node_id}: {exc}") from exc
            summary = ("clean" if report.clean
                       else f"{len(report.sorry_sites)} sorry site(s)" if report.compiled
                       else "build errors")
            self.ledger.record_event(EventKind.LEAN_ATTEMPT, node_id,
                                     f"attempt {attempt}/{budget}: {summary}")
            if report.compiled:
                break
            errors = report.diagnostics
            self.node_diag[node_id] = report.diagnostics
        assert report is not None and source is not None
        if report.compiled:
            self.node_diag.pop(node_id, None)
            if report.clean:
                self.ledger.record_event(EventKind.BUILD_CLEAN, node_id,
                                         f"clean after {attempts} attempt(s)")
            else:
                self.ledger.record_event(
                    EventKind.BUILD_SORRIES, node_id,
                    f"{len(report.sorry_sites)} sorry site(s) after {attempts} attempt(s)")
            return LeanOutcome(source, False, attempts), report
        self.ledger.record_event(EventKind.BUILD_SORRIES, node_id,
                                 f"exhausted compile budget ({attempts} attempts)")
        self._mark_failing(node_id)
        return LeanOutcome(source, True, attempts), report

    def check(self, kind: CheckKind, node_id: str, source: str,
              errors: str | None) -> CheckVerdict:
        assert self.plan is not None
        ctx = assemble_context(self.plan, node_id, lean_source=source,
                               build_errors=errors, check_kind=kind)
        record = self._invoke(AgentTask(TaskKind.CHECK, ctx, check_kind=kind),
                              f"{kind.value} check on {node_id}")
        verdict = record.result.verdict
        event = EventKind.CHECK_PASS if verdict.passed else EventKind.CHECK_FAIL
        detail = kind.value + (f": {verdict.note}" if verdict.note else "")
        self.ledger.record_event(event, node_id, detail)
        return verdict

    def replan(self, cause: DiffCause, node_id: str) -> None:
        assert self.plan is not None
        if self.replans >= self.config.replan_limit:
            raise _Stop(StopReason.REPLAN_LIMIT,
                        f"replan limit of {self.config.replan_limit} reached")
        ctx = assemble_context(self.plan, node_id,
                               build_errors=self.node_diag.get(node_id))
        task = AgentTask(TaskKind.PLAN_REVISE, ctx, cause=cause)
        attempts = 1 + self.config.check_retry_limit
        last_reason = ""
        for _ in range(attempts):
            record = self._invoke(task, f"replanning at {node_id}")
            diff = record.result.diff
            try:
                new_plan, invalidated = apply_diff(self.plan, diff)
            except RejectedDiff as exc:
                last_reason = str(exc)
                logger.warning("diff rejected: %s", exc)
                continue
            removed = set(self.plan.nodes) - set(new_plan.nodes)
            self.plan = new_plan
            self.replans += 1
            for stale in sorted(invalidated | removed):
                self.ws.remove_node_source(stale)
                self.node_diag.pop(stale, None)
            self.ledger.record_event(
                EventKind.DIFF_APPLIED, node_id,
                f"cause={cause.value}: +{len(diff.adds)} -{len(diff.removes)} "
                f"~{len(diff.rewrites)}, invalidated {len(invalidated)}",
                data={"diff": diff_to_text(diff),
                      "invalidated": sorted(invalidated), "cause": cause.value},
            )
            self._frame()
            self.ledger.record_event(EventKind.RESTART, None,
                                     "selection restarts from the top of the plan")
            return
        raise _Stop(StopReason.BACKEND_FAILURE,
                    f"replanning at {node_id}: {last_reason or 'diffs kept being rejected'}")

    def success_exit(self) -> bool:
        assert self.plan is not None and self.anchor_node_id is not None
        try:
            report = audit_verdict(self.ws, self.anchor.signature_text,
                                   self.anchor.decl_name, self.verifier,
                                   self.config.permitted_axioms)
        except VerifierError as exc:
            raise _Stop(StopReason.BACKEND_FAILURE, f"final audit: {exc}") from exc
        if report.passed:
            self.ledger.record_event(
                EventKind.CHECK_PASS, self.anchor_node_id,
                "audit: pass; axioms=" + (",".join(sorted(report.axioms_used)) or "(none)"))
            self.ledger.record_event(EventKind.SUCCESS_EXIT, self.anchor_node_id,
                                     "anchored target closed with original signature")
            return True
        self.ledger.record_event(EventKind.CHECK_FAIL, self.anchor_node_id,
                                 f"audit: {report.detail}")
        return False

    def main_loop(self) -> None:
        assert self.plan is not None
        while True:
            if is_complete(self.plan):
                if self.success_exit():
                    return
                if self.replans >= self.config.replan_limit:
                    raise _Stop(StopReason.AUDIT_FAIL, "final audit failed with no replans left")
                self._set_status(self.anchor_node_id, Status.OPEN)
                self._frame()
                self.replan(DiffCause.FAITHFULNESS_FAIL, self.anchor_node_id)
                continue
            node_id = next_open_statement(self.plan)
            assert node_id is not None
            outcome, report = self.lean_cycle(node_id)
            step = route_build_result(report)
            if step is NextStep.CHECK_FAITHFULNESS:
                verdict = self.check(CheckKind.FAITHFULNESS, node_id, outcome.source, None)
                if route_check_verdict(CheckKind.FAITHFULNESS, verdict) is NextStep.CLOSE_AND_ADVANCE:
                    self._close_node(node_id)
                else:
                    self.replan(DiffCause.FAITHFULNESS_FAIL, node_id)
                continue
            errors = report.diagnostics or None
            verdict = self.check(CheckKind.MATH, node_id, outcome.source, errors)
            if route_check_verdict(CheckKind.MATH, verdict) is NextStep.REPLAN_MATH:
                self.replan(DiffCause.MATH_FAIL, node_id)
                continue
            verdict = self.check(CheckKind.DECOMPOSITION, node_id, outcome.source, errors)
            if route_check_verdict(CheckKind.DECOMPOSITION, verdict) is NextStep.REPLAN_SPLIT:
                self.replan(DiffCause.DECOMPOSITION_SPLIT, node_id)
            # Decomposition pass: the same node is selected again next iteration.

    def execute(self) -> tuple[RunOutcome, RunLedger]:
        try:
            self.gate("initial planning")
            self.initial_plan()
            self.main_loop()
            outcome = RunOutcome(Verdict.SOLVED, None, self.plan.revision)
        except _Stop as stop:
            self.ledger.record_event(EventKind.BUDGET_STOP, None,
                                     f"{stop.reason.value}: {stop.detail}")
            revision = self.plan.revision if self.plan else 0
            outcome = RunOutcome(Verdict.UNFINISHED, stop.reason, revision)
        self.ledger.record_outcome(Outcome(
            verdict=outcome.verdict.value,
            reason=outcome.reason.value if outcome.reason else None,
            wall_clock=self.elapsed(),
            statement_count=len(self.plan.nodes) if self.plan else 0,
            revision=outcome.final_plan_revision,
        ))
        return outcome, self.ledger


def run(input_file: Path, backend, verifier, config: LoopConfig, *,
        workspace_dir: Path, ledger_path: Path | None = None,
        run_id: str | None = None) -> tuple[RunOutcome, RunLedger]:
    """Run the full loop on one input file; see the module docstring."""
    state = _Run(input_file, backend, verifier, config, workspace_dir, ledger_path, run_id)
    return state.execute()
