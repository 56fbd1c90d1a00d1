"""Single-objective agent invocations and the two interchangeable backends.

Three agent types exist, each with a fixed authority boundary: planning agents
return plan diffs, lean agents return source text for one statement, check
agents return one pass/fail bit.  Every invocation carries exactly one
objective and the minimum local context it needs; no conversation state is
carried between invocations.

:class:`ScriptedBackend` replays entries from a fixture file keyed by (task
kind, check kind, node, occurrence), which makes whole runs deterministic.
:class:`LiveBackend` talks to a single HTTPS endpoint with bounded retries and
parses the delimited payload out of the model text.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from string import Template

import requests

from .plan import DiffCause, PlanDiff, PlanError, ProofPlan, diff_from_text, diff_to_text

logger = logging.getLogger(__name__)


class AgentError(Exception):
    pass


class BackendUnavailable(AgentError):
    """Transport-level failure that survived the retry policy."""


class MalformedResponse(AgentError):
    """The response carried no parseable payload; the loop decides on retries."""


class AuthError(AgentError):
    pass


class FixtureMiss(MalformedResponse):
    """No scripted entry for this task key and occurrence."""


class FixtureParse(AgentError):
    pass


class UnknownNode(AgentError):
    pass


class TaskKind(str, Enum):
    PLAN_INITIAL = "plan-initial"
    PLAN_REVISE = "plan-revise"
    LEAN_WORK = "lean"
    CHECK = "check"


class CheckKind(str, Enum):
    MATH = "math"
    DECOMPOSITION = "decomposition"
    FAITHFULNESS = "faithfulness"


@dataclass(frozen=True)
class LocalContext:
    """The minimum context one invocation sees; never a full plan dump."""

    node_id: str | None = None
    statement: str = ""
    sketch: str = ""
    dep_statements: tuple[tuple[str, str], ...] = ()
    anchor_signature: str | None = None
    lean_source: str | None = None
    build_errors: str | None = None


@dataclass(frozen=True)
class AgentTask:
    kind: TaskKind
    subject: LocalContext
    check_kind: CheckKind | None = None
    cause: DiffCause | None = None

    def __post_init__(self) -> None:
        if (self.kind is TaskKind.CHECK) != (self.check_kind is not None):
            raise AgentError("check tasks carry exactly one check kind; others carry none")


@dataclass(frozen=True)
class TokenUsage:
    prompt: int = 0
    completion: int = 0
    cache_read: int = 0
    cache_write: int = 0

    def __post_init__(self) -> None:
        for name in ("prompt", "completion", "cache_read", "cache_write"):
            if getattr(self, name) < 0:
                raise AgentError(f"negative token count for {name}")

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(
            self.prompt + other.prompt,
            self.completion + other.completion,
            self.cache_read + other.cache_read,
            self.cache_write + other.cache_write,
        )


@dataclass(frozen=True)
class CheckVerdict:
    passed: bool
    note: str = ""


@dataclass(frozen=True)
class LeanOutcome:
    source: str
    exhausted: bool = False
    attempts_used: int = 1


@dataclass(frozen=True)
class AgentResult:
    kind: TaskKind
    payload: PlanDiff | LeanOutcome | CheckVerdict

    def __post_init__(self) -> None:
        expected = {
            TaskKind.PLAN_INITIAL: PlanDiff,
            TaskKind.PLAN_REVISE: PlanDiff,
            TaskKind.LEAN_WORK: LeanOutcome,
            TaskKind.CHECK: CheckVerdict,
        }[self.kind]
        if not isinstance(self.payload, expected):
            raise AgentError(f"payload {type(self.payload).__name__} does not match {self.kind.value} task")

    @property
    def diff(self) -> PlanDiff:
        assert isinstance(self.payload, PlanDiff)
        return self.payload

    @property
    def lean(self) -> LeanOutcome:
        assert isinstance(self.payload, LeanOutcome)
        return self.payload

    @property
    def verdict(self) -> CheckVerdict:
        assert isinstance(self.payload, CheckVerdict)
        return self.payload


def assemble_context(
    plan: ProofPlan,
    node_id: str,
    *,
    lean_source: str | None = None,
    build_errors: str | None = None,
    check_kind: CheckKind | None = None,
) -> LocalContext:
    """Build the local view one invocation is allowed to see.

    Lean and planning tasks get the node's statement and sketch, the statements
    (never the sources) of its direct deps, and the anchor signature iff the
    node is the target.  Check tasks are isolated further: statement and lean
    source only, with build errors included for math/decomposition checks and
    excluded from faithfulness.
    """
    node = plan.nodes.get(node_id)
    if node is None:
        raise UnknownNode(f"node {node_id} not in plan")
    if check_kind is not None:
        return LocalContext(
            node_id=node_id,
            statement=node.informal,
            lean_source=lean_source,
            build_errors=None if check_kind is CheckKind.FAITHFULNESS else build_errors,
        )
    return LocalContext(
        node_id=node_id,
        statement=node.informal,
        sketch=node.sketch,
        dep_statements=tuple((dep, plan.nodes[dep].informal) for dep in node.deps),
        anchor_signature=node.anchor.signature_text if node.anchor else None,
        lean_source=lean_source,
        build_errors=build_errors,
    )


@dataclass(frozen=True)
class InvokeRecord:
    result: AgentResult
    usage: TokenUsage
    elapsed: float


def invoke(backend, task: AgentTask) -> InvokeRecord:
    """One fresh, stateless invocation: result kind always matches task kind."""
    start = time.monotonic()
    result, usage = backend.invoke(task)
    elapsed = time.monotonic() - start
    if result.kind is not task.kind:
        raise MalformedResponse(f"backend answered a {result.kind.value} task with {task.kind.value}")
    return InvokeRecord(result, usage, elapsed)


# ---------------------------------------------------------------------------
# Scripted backend: fixture-file replay.

@dataclass(frozen=True)
class FixtureKey:
    kind: TaskKind
    check_kind: CheckKind | None = None
    node_id: str | None = None

    def label(self) -> str:
        parts = [self.kind.value]
        if self.check_kind:
            parts.append(self.check_kind.value)
        if self.node_id:
            parts.append(self.node_id)
        return "/".join(parts)


@dataclass(frozen=True)
class FixtureEntry:
    key: FixtureKey
    occurrence: int
    payload: PlanDiff | LeanOutcome | CheckVerdict
    usage: TokenUsage = TokenUsage()


@dataclass
class Fixture:
    entries: dict[tuple[FixtureKey, int], FixtureEntry] = field(default_factory=dict)

    def add(self, entry: FixtureEntry) -> None:
        slot = (entry.key, entry.occurrence)
        if slot in self.entries:
            raise FixtureParse(f"duplicate fixture entry {entry.key.label()}#{entry.occurrence}")
        self.entries[slot] = entry


def _task_key(task: AgentTask) -> FixtureKey:
    return FixtureKey(task.kind, task.check_kind, task.subject.node_id)


class ScriptedBackend:
    """Replays fixture entries in per-key occurrence order."""

    def __init__(self, fixture: Fixture):
        self.fixture = fixture
        self._cursor: dict[FixtureKey, int] = {}

    def invoke(self, task: AgentTask) -> tuple[AgentResult, TokenUsage]:
        key = _task_key(task)
        occurrence = self._cursor.get(key, 0) + 1
        entry = self.fixture.entries.get((key, occurrence))
        if entry is None:
            raise FixtureMiss(f"no fixture entry for {key.label()}#{occurrence}")
        self._cursor[key] = occurrence
        return AgentResult(task.kind, entry.payload), entry.usage


def parse_fixture(text: str) -> Fixture:
    """Parse the fixture-file format described in docs/formats.md."""
    fixture = Fixture()
    lines = text.splitlines()
    i = 0

    def skip_blank(j: int) -> int:
        while j < len(lines) and (not lines[j].strip() or lines[j].lstrip().startswith("#")):
            j += 1
        return j

    i = skip_blank(i)
    if i >= len(lines) or lines[i].strip() != "fixture v1":
        raise FixtureParse("not a fixture v1 document")
    i += 1
    while True:
        i = skip_blank(i)
        if i >= len(lines):
            break
        header = lines[i].strip().split()
        if header[0] != "entry":
            raise FixtureParse(f"line {i + 1}: expected 'entry', got {lines[i]!r}")
        try:
            kind = TaskKind(header[1])
        except ValueError as exc:
            raise FixtureParse(f"line {i + 1}: unknown task kind {header[1]!r}") from exc
        fields = header[2:]
        check_kind: CheckKind | None = None
        if kind is TaskKind.CHECK:
            if not fields:
                raise FixtureParse(f"line {i + 1}: check entry missing check kind")
            raw = fields.pop(0)
            try:
                check_kind = CheckKind(raw)
            except ValueError as exc:
                raise FixtureParse(f"line {i + 1}: unknown check kind {raw!r}") from exc
        node_id: str | None = None
        occurrence = 1
        if fields and not fields[0].isdigit():
            node_id = fields.pop(0)
        if fields:
            occurrence = int(fields.pop(0))
        i += 1

        usage = TokenUsage()
        payload: PlanDiff | LeanOutcome | CheckVerdict | None = None
        while True:
            i = skip_blank(i)
            if i >= len(lines):
                raise FixtureParse("unexpected end of fixture inside entry")
            line = lines[i].strip()
            if line == "end":
                i += 1
                break
            if line.startswith("usage "):
                counts = [int(x) for x in line.split()[1:]]
                if len(counts) != 4:
                    raise FixtureParse(f"line {i + 1}: usage needs four counts")
                usage = TokenUsage(*counts)
                i += 1
            elif line.startswith("verdict "):
                rest = line[len("verdict "):].strip()
                word, _, note = rest.partition(" ")
                if word not in ("pass", "fail"):
                    raise FixtureParse(f"line {i + 1}: verdict must be pass or fail")
                note = note.strip()
                if note.startswith('"'):
                    try:
                        note = json.loads(note)
                    except ValueError as exc:
                        raise FixtureParse(f"line {i + 1}: bad verdict note") from exc
                payload = CheckVerdict(word == "pass", note)
                i += 1
            elif line.startswith("payload "):
                parts = line.split()
                if len(parts) != 3 or "<<" not in parts[2]:
                    raise FixtureParse(f"line {i + 1}: bad payload header")
                payload_type = parts[1]
                marker = parts[2].split("<<", 1)[1]
                i += 1
                body: list[str] = []
                while i < len(lines) and lines[i] != marker:
                    body.append(lines[i])
                    i += 1
                if i >= len(lines):
                    raise FixtureParse(f"payload heredoc missing terminator {marker!r}")
                i += 1
                body_text = "\n".join(body) + ("\n" if body else "")
                if payload_type == "diff":
                    try:
                        payload = diff_from_text(body_text)
                    except PlanError as exc:
                        raise FixtureParse(f"bad diff payload: {exc}") from exc
                elif payload_type == "source":
                    payload = LeanOutcome(source=body_text)
                else:
                    raise FixtureParse(f"unknown payload type {payload_type!r}")
            else:
                raise FixtureParse(f"line {i + 1}: unexpected line {line!r}")
        if payload is None:
            raise FixtureParse("entry has no payload or verdict")
        fixture.add(FixtureEntry(FixtureKey(kind, check_kind, node_id), occurrence, payload, usage))
    return fixture


def load_fixture(path: Path) -> Fixture:
    return parse_fixture(path.read_text(encoding="utf-8"))


def fixture_to_text(fixture: Fixture) -> str:
    """Serialize a fixture; inverse of :func:`parse_fixture`."""
    out: list[str] = ["fixture v1"]
    for (key, occurrence), entry in fixture.entries.items():
        header = ["entry", key.kind.value]
        if key.check_kind:
            header.append(key.check_kind.value)
        if key.node_id:
            header.append(key.node_id)
        header.append(str(occurrence))
        out.append("")
        out.append(" ".join(header))
        if entry.usage != TokenUsage():
            u = entry.usage
            out.append(f"usage {u.prompt} {u.completion} {u.cache_read} {u.cache_write}")
        payload = entry.payload
        if isinstance(payload, CheckVerdict):
            word = "pass" if payload.passed else "fail"
            note = f" {json.dumps(payload.note, ensure_ascii=False)}" if payload.note else ""
            out.append(f"verdict {word}{note}")
        elif isinstance(payload, LeanOutcome):
            out.append("payload source <<LEAN-EOF")
            out.append(payload.source.rstrip("\n"))
            out.append("LEAN-EOF")
        else:
            out.append("payload diff <<DIFF-EOF")
            out.append(diff_to_text(payload).rstrip("\n"))
            out.append("DIFF-EOF")
        out.append("end")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Live backend: one HTTPS endpoint, bounded retries, delimited payloads.

PAYLOAD_MARKERS = {
    TaskKind.PLAN_INITIAL: ("BEGIN-PLAN-DIFF", "END-PLAN-DIFF"),
    TaskKind.PLAN_REVISE: ("BEGIN-PLAN-DIFF", "END-PLAN-DIFF"),
    TaskKind.LEAN_WORK: ("BEGIN-LEAN-SOURCE", "END-LEAN-SOURCE"),
    TaskKind.CHECK: ("BEGIN-VERDICT", "END-VERDICT"),
}

_PROMPT_FILES = {
    (TaskKind.PLAN_INITIAL, None): "plan_initial.txt",
    (TaskKind.PLAN_REVISE, None): "plan_revise.txt",
    (TaskKind.LEAN_WORK, None): "lean_work.txt",
    (TaskKind.CHECK, CheckKind.MATH): "check_math.txt",
    (TaskKind.CHECK, CheckKind.DECOMPOSITION): "check_decomposition.txt",
    (TaskKind.CHECK, CheckKind.FAITHFULNESS): "check_faithfulness.txt",
}


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff_base: float = 2.0


@dataclass(frozen=True)
class LiveConfig:
    endpoint: str
    model: str
    auth_env: str = "PROOFLOOP_API_TOKEN"
    retry: RetryPolicy = RetryPolicy()
    prompt_dir: Path | None = None
    request_timeout: float = 120.0


def extract_payload(text: str, kind: TaskKind) -> str:
    begin, end = PAYLOAD_MARKERS[kind]
    start = text.find(begin)
    if start < 0:
        raise MalformedResponse(f"response has no {begin} marker")
    start += len(begin)
    stop = text.find(end, start)
    if stop < 0:
        raise MalformedResponse(f"response has no {end} marker")
    return text[start:stop].strip("\n")


def parse_verdict_payload(body: str) -> CheckVerdict:
    stripped = body.strip()
    if not stripped:
        raise MalformedResponse("empty verdict payload")
    word, _, note = stripped.partition("\n")
    word = word.strip().lower()
    if word not in ("pass", "fail"):
        raise MalformedResponse(f"verdict must start with pass or fail, got {word!r}")
    return CheckVerdict(word == "pass", note.strip())


class LiveBackend:
    """Single-endpoint HTTP client; each invoke is one independent request."""

    def __init__(self, config: LiveConfig, session: requests.Session | None = None,
                 sleep=time.sleep):
        self.config = config
        self.session = session or requests.Session()
        self._sleep = sleep
        self._prompts: dict[tuple[TaskKind, CheckKind | None], Template] = {}

    def _token(self) -> str:
        token = os.environ.get(self.config.auth_env, "")
        if not token:
            raise AuthError(f"auth token not set in ${self.config.auth_env}")
        return token

    def _template(self, kind: TaskKind, check_kind: CheckKind | None) -> Template:
        slot = (kind, check_kind)
        if slot not in self._prompts:
            name = _PROMPT_FILES[slot]
            base = self.config.prompt_dir or Path(__file__).parent / "prompts"
            self._prompts[slot] = Template((base / name).read_text(encoding="utf-8"))
        return self._prompts[slot]

    def _render_prompt(self, task: AgentTask) -> str:
        ctx = task.subject
        deps = "\n".join(f"- {dep_id}: {text}" for dep_id, text in ctx.dep_statements)
        return self._template(task.kind, task.check_kind).safe_substitute(
            statement=ctx.statement,
            sketch=ctx.sketch,
            deps=deps,
            anchor_signature=ctx.anchor_signature or "",
            lean_source=ctx.lean_source or "",
            build_errors=ctx.build_errors or "",
            cause=task.cause.value if task.cause else "",
        )

    def _post(self, body: dict) -> dict:
        token = self._token()
        last_error: Exception | None = None
        for attempt in range(1, self.config.retry.attempts + 1):
            if attempt > 1:
                self._sleep(self.config.retry.backoff_base * 2 ** (attempt - 2))
            try:
                response = self.session.post(
                    self.config.endpoint,
                    json=body,
                    headers={"Authorization": f"Bearer {token}"},
                    timeout=self.config.request_timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("transport failure on attempt %d: %s", attempt, exc)
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials ({response.status_code})")
            if response.status_code >= 500 or response.status_code == 429:
                last_error = BackendUnavailable(f"status {response.status_code}")
                logger.warning("retryable status %d on attempt %d", response.status_code, attempt)
                continue
            if response.status_code != 200:
                raise BackendUnavailable(f"unexpected status {response.status_code}")
            try:
                return response.json()
            except ValueError as exc:
                raise MalformedResponse(f"response body is not JSON: {exc}") from exc
        raise BackendUnavailable(f"transport failed after {self.config.retry.attempts} attempts: {last_error}")

    def invoke(self, task: AgentTask) -> tuple[AgentResult, TokenUsage]:
        data = self._post({
            "model": self.config.model,
            "prompt": self._render_prompt(task),
            "metadata": {
                "kind": task.kind.value,
                "check": task.check_kind.value if task.check_kind else None,
                "node": task.subject.node_id,
            },
        })
        text = data.get("text")
        if not isinstance(text, str):
            raise MalformedResponse("response JSON has no 'text' field")
        raw_usage = data.get("usage") or {}
        usage = TokenUsage(
            int(raw_usage.get("prompt_tokens", 0)),
            int(raw_usage.get("completion_tokens", 0)),
            int(raw_usage.get("cache_read_tokens", 0)),
            int(raw_usage.get("cache_write_tokens", 0)),
        )
        body = extract_payload(text, task.kind)
        payload: PlanDiff | LeanOutcome | CheckVerdict
        if task.kind is TaskKind.CHECK:
            payload = parse_verdict_payload(body)
        elif task.kind is TaskKind.LEAN_WORK:
            payload = LeanOutcome(source=body + "\n")
        else:
            try:
                payload = diff_from_text(body + "\n")
            except PlanError as exc:
                raise MalformedResponse(f"diff payload does not parse: {exc}") from exc
        return AgentResult(task.kind, payload), usage
