"""Shared proof plan: a dependency-ordered DAG of statements with one anchored target.

The plan is the only state that crosses agent invocations.  Each node holds an
informal statement, a proof sketch, its dependency ids and a completion status;
exactly one node carries the anchor (the original target declaration whose
signature the final proof must preserve).  All mutation goes through
:func:`apply_diff`, which applies a whole diff atomically or rejects it, and
reports the set of downstream nodes it invalidated.

Plans are immutable snapshots: ``apply_diff`` returns a new plan.  The text
serialization (``plan_to_text`` / ``plan_from_text``) is lossless and is shared
by fixture files, the run ledger and the trace exporter.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum


class PlanError(Exception):
    """Base class for plan construction and mutation errors."""


class CycleError(PlanError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("dependency cycle: " + " -> ".join(cycle))


class AnchorError(PlanError):
    pass


class DanglingDepError(PlanError):
    pass


class RejectedDiff(PlanError):
    """The diff would break a plan invariant; the plan is unchanged."""


class Status(str, Enum):
    OPEN = "open"
    FAILING = "failing"
    CLOSED = "closed"


class DiffCause(str, Enum):
    INITIAL_PLAN = "initial-plan"
    FAITHFULNESS_FAIL = "faithfulness-fail"
    MATH_FAIL = "math-fail"
    DECOMPOSITION_SPLIT = "decomposition-split"


# Statement ids appear in space-separated lists of the text format.
_ID_RE = re.compile(r"^\S+$")

# Whole-word `sorry`, treating Lean identifier characters as word characters.
_SORRY_RE = re.compile(r"(?<![A-Za-z0-9_'!?])sorry(?![A-Za-z0-9_'!?])")


def _check_id(node_id: str) -> str:
    if not isinstance(node_id, str) or not _ID_RE.match(node_id):
        raise PlanError(f"invalid statement id: {node_id!r}")
    return node_id


@dataclass(frozen=True)
class AnchorDecl:
    """The original target declaration: name, full header text, sorry body."""

    decl_name: str
    signature_text: str
    original_body: str

    def __post_init__(self) -> None:
        if not self.signature_text.strip():
            raise AnchorError("anchor signature text must be non-empty")
        if not _SORRY_RE.search(self.original_body):
            raise AnchorError("anchor body must contain a sorry token")


@dataclass(frozen=True)
class PlanNode:
    """One statement of the plan."""

    node_id: str
    informal: str
    sketch: str
    deps: tuple[str, ...] = ()
    status: Status = Status.OPEN
    anchor: AnchorDecl | None = None

    def __post_init__(self) -> None:
        _check_id(self.node_id)
        object.__setattr__(self, "deps", tuple(self.deps))
        seen: set[str] = set()
        for dep in self.deps:
            _check_id(dep)
            if dep == self.node_id:
                raise PlanError(f"node {self.node_id} depends on itself")
            if dep in seen:
                raise PlanError(f"node {self.node_id} lists dep {dep} twice")
            seen.add(dep)

    def with_status(self, status: Status) -> PlanNode:
        return PlanNode(self.node_id, self.informal, self.sketch, self.deps, status, self.anchor)


@dataclass(frozen=True)
class NodeRewrite:
    """Replacement text/sketch/deps for an existing node; the id is stable."""

    node_id: str
    informal: str
    sketch: str
    deps: tuple[str, ...]

    def __post_init__(self) -> None:
        _check_id(self.node_id)
        object.__setattr__(self, "deps", tuple(self.deps))


@dataclass(frozen=True)
class PlanDiff:
    adds: tuple[PlanNode, ...] = ()
    removes: tuple[str, ...] = ()
    rewrites: tuple[NodeRewrite, ...] = ()
    cause: DiffCause = DiffCause.INITIAL_PLAN

    def __post_init__(self) -> None:
        object.__setattr__(self, "adds", tuple(self.adds))
        object.__setattr__(self, "removes", tuple(self.removes))
        object.__setattr__(self, "rewrites", tuple(self.rewrites))


@dataclass(frozen=True)
class ProofPlan:
    """Immutable plan snapshot.  ``order`` is a topological sort of the ids."""

    nodes: dict[str, PlanNode]
    order: tuple[str, ...]
    revision: int = 0
    retired: frozenset[str] = field(default_factory=frozenset)

    @property
    def anchor_id(self) -> str:
        for node_id in self.order:
            if self.nodes[node_id].anchor is not None:
                return node_id
        raise AnchorError("plan has no anchor node")

    @property
    def anchor(self) -> AnchorDecl:
        decl = self.nodes[self.anchor_id].anchor
        assert decl is not None
        return decl

    def dependents(self) -> dict[str, set[str]]:
        """Map node id -> ids that list it as a direct dependency."""
        out: dict[str, set[str]] = {node_id: set() for node_id in self.nodes}
        for node in self.nodes.values():
            for dep in node.deps:
                out[dep].add(node.node_id)
        return out

    def edges(self) -> list[tuple[str, str]]:
        """Dependency edges as (dep, node) pairs in deterministic order."""
        pairs = []
        for node_id in self.order:
            for dep in self.nodes[node_id].deps:
                pairs.append((dep, node_id))
        return pairs


def _find_cycle(nodes: dict[str, PlanNode]) -> list[str] | None:
    """Return one dependency cycle as a closed id path, if any."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {node_id: WHITE for node_id in nodes}
    stack: list[str] = []

    def visit(start: str) -> list[str] | None:
        path = [(start, iter(nodes[start].deps))]
        color[start] = GRAY
        stack.append(start)
        while path:
            node_id, it = path[-1]
            advanced = False
            for dep in it:
                if color[dep] == GRAY:
                    i = stack.index(dep)
                    return stack[i:] + [dep]
                if color[dep] == WHITE:
                    color[dep] = GRAY
                    stack.append(dep)
                    path.append((dep, iter(nodes[dep].deps)))
                    advanced = True
                    break
            if not advanced:
                path.pop()
                stack.pop()
                color[node_id] = BLACK
        return None

    for node_id in nodes:
        if color[node_id] == WHITE:
            cycle = visit(node_id)
            if cycle:
                return cycle
    return None


def _toposort(nodes: dict[str, PlanNode], sort_key: dict[str, int]) -> tuple[str, ...]:
    """Kahn's algorithm; ties broken by the caller-supplied stable key."""
    import heapq

    remaining = {node_id: len(node.deps) for node_id, node in nodes.items()}
    dependents: dict[str, list[str]] = {node_id: [] for node_id in nodes}
    for node in nodes.values():
        for dep in node.deps:
            dependents[dep].append(node.node_id)
    ready = [(sort_key[node_id], node_id) for node_id, n in remaining.items() if n == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        _, node_id = heapq.heappop(ready)
        order.append(node_id)
        for dep_user in dependents[node_id]:
            remaining[dep_user] -= 1
            if remaining[dep_user] == 0:
                heapq.heappush(ready, (sort_key[dep_user], dep_user))
    if len(order) != len(nodes):
        cycle = _find_cycle(nodes)
        raise CycleError(cycle or sorted(node_id for node_id in nodes if remaining[node_id] > 0))
    return tuple(order)


def _validate_graph(nodes: dict[str, PlanNode]) -> None:
    anchors = [node_id for node_id, node in nodes.items() if node.anchor is not None]
    if len(anchors) != 1:
        raise AnchorError(f"plan must have exactly one anchor, found {len(anchors)}")
    for node in nodes.values():
        for dep in node.deps:
            if dep not in nodes:
                raise DanglingDepError(f"node {node.node_id} depends on unknown {dep}")


def create_plan(nodes: list[PlanNode] | tuple[PlanNode, ...]) -> ProofPlan:
    """Build a revision-0 plan; order ties break by position in ``nodes``."""
    node_map: dict[str, PlanNode] = {}
    for node in nodes:
        if node.node_id in node_map:
            raise PlanError(f"duplicate statement id {node.node_id}")
        node_map[node.node_id] = node
    _validate_graph(node_map)
    sort_key = {node.node_id: i for i, node in enumerate(nodes)}
    order = _toposort(node_map, sort_key)
    return ProofPlan(nodes=node_map, order=order, revision=0)


def apply_diff(plan: ProofPlan, diff: PlanDiff) -> tuple[ProofPlan, frozenset[str]]:
    """Apply ``diff`` atomically.

    Returns the new plan and the invalidated set: every surviving node whose
    statement or deps changed, plus everything downstream of a changed or
    removed node, all reset to Open.  A rewrite that only touches the sketch
    invalidates the node itself but not its dependents.  Raises
    :class:`RejectedDiff` (plan unchanged) if the result would break any
    invariant.
    """
    anchor_id = plan.anchor_id
    removes = set(diff.removes)
    if len(removes) != len(diff.removes):
        raise RejectedDiff("duplicate ids in removes")
    if anchor_id in removes:
        raise RejectedDiff("diff removes the anchored target")
    for node_id in removes:
        if node_id not in plan.nodes:
            raise RejectedDiff(f"removes unknown node {node_id}")

    rewrite_map: dict[str, NodeRewrite] = {}
    for rewrite in diff.rewrites:
        if rewrite.node_id in rewrite_map:
            raise RejectedDiff(f"node {rewrite.node_id} rewritten twice")
        if rewrite.node_id not in plan.nodes:
            raise RejectedDiff(f"rewrites unknown node {rewrite.node_id}")
        if rewrite.node_id in removes:
            raise RejectedDiff(f"node {rewrite.node_id} both removed and rewritten")
        rewrite_map[rewrite.node_id] = rewrite

    add_ids: set[str] = set()
    for node in diff.adds:
        if node.node_id in plan.nodes or node.node_id in add_ids:
            raise RejectedDiff(f"added id {node.node_id} already exists")
        if node.node_id in plan.retired:
            raise RejectedDiff(f"added id {node.node_id} was retired by an earlier diff")
        if node.anchor is not None:
            raise RejectedDiff("diff adds a second anchor")
        add_ids.add(node.node_id)

    # Assemble the new node map.
    new_nodes: dict[str, PlanNode] = {}
    changed_full: set[str] = set()   # informal or deps changed
    changed_sketch: set[str] = set()  # sketch only
    for node_id, node in plan.nodes.items():
        if node_id in removes:
            continue
        rewrite = rewrite_map.get(node_id)
        if rewrite is None:
            new_nodes[node_id] = node
            continue
        try:
            new_node = PlanNode(node_id, rewrite.informal, rewrite.sketch,
                                rewrite.deps, node.status, node.anchor)
        except PlanError as exc:
            raise RejectedDiff(str(exc)) from exc
        new_nodes[node_id] = new_node
        if rewrite.informal != node.informal or tuple(rewrite.deps) != node.deps:
            changed_full.add(node_id)
        elif rewrite.sketch != node.sketch:
            changed_sketch.add(node_id)
    for node in diff.adds:
        new_nodes[node.node_id] = node

    try:
        _validate_graph(new_nodes)
    except PlanError as exc:
        raise RejectedDiff(str(exc)) from exc

    # Stable re-sort: survivors keep their previous order position, adds append.
    sort_key = {node_id: i for i, node_id in enumerate(plan.order)}
    base = len(plan.order)
    for i, node in enumerate(diff.adds):
        sort_key[node.node_id] = base + i
    try:
        order = _toposort(new_nodes, sort_key)
    except CycleError as exc:
        raise RejectedDiff(str(exc)) from exc

    # Invalidation: closure of changed/removed seeds over the old dependent
    # edges, restricted to survivors; sketch-only edits stay local.
    old_dependents = plan.dependents()
    seeds = changed_full | removes
    reached: set[str] = set(seeds)
    frontier = list(seeds)
    while frontier:
        node_id = frontier.pop()
        for dep_user in old_dependents.get(node_id, ()):
            if dep_user not in reached:
                reached.add(dep_user)
                frontier.append(dep_user)
    invalidated = frozenset((reached | changed_sketch) & set(new_nodes))

    for node_id in invalidated:
        node = new_nodes[node_id]
        if node.status is not Status.OPEN:
            new_nodes[node_id] = node.with_status(Status.OPEN)
        else:
            new_nodes[node_id] = node

    new_plan = ProofPlan(
        nodes=new_nodes,
        order=order,
        revision=plan.revision + 1,
        retired=plan.retired | removes,
    )
    if new_plan.anchor.signature_text != plan.anchor.signature_text:
        raise RejectedDiff("anchor signature changed")
    return new_plan, invalidated


def set_status(plan: ProofPlan, node_id: str, status: Status) -> ProofPlan:
    """Status-only update used by the run loop; structure is untouched."""
    if node_id not in plan.nodes:
        raise PlanError(f"unknown node {node_id}")
    nodes = dict(plan.nodes)
    nodes[node_id] = nodes[node_id].with_status(status)
    return ProofPlan(nodes=nodes, order=plan.order, revision=plan.revision, retired=plan.retired)


def next_open_statement(plan: ProofPlan) -> str | None:
    """Earliest Open/Failing node in order whose deps are all Closed."""
    for node_id in plan.order:
        node = plan.nodes[node_id]
        if node.status is Status.CLOSED:
            continue
        if all(plan.nodes[dep].status is Status.CLOSED for dep in node.deps):
            return node_id
    return None


def is_complete(plan: ProofPlan) -> bool:
    return all(node.status is Status.CLOSED for node in plan.nodes.values())


# ---------------------------------------------------------------------------
# Text serialization.  Line-oriented, one node per record, lossless.
# See docs/formats.md for the grammar.

_PLAN_HEADER = "proofplan v1"
_DIFF_HEADER = "plandiff v1"


def _q(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)


def _node_lines(node: PlanNode, with_status: bool = True) -> list[str]:
    lines = [
        f"node {node.node_id}",
        f"informal {_q(node.informal)}",
        f"sketch {_q(node.sketch)}",
        ("deps " + " ".join(node.deps)).rstrip(),
    ]
    if with_status:
        lines.append(f"status {node.status.value}")
    if node.anchor is not None:
        a = node.anchor
        lines.append(f"anchor {_q(a.decl_name)} {_q(a.signature_text)} {_q(a.original_body)}")
    lines.append("end")
    return lines


def plan_to_text(plan: ProofPlan) -> str:
    lines = [_PLAN_HEADER, f"revision {plan.revision}"]
    if plan.retired:
        lines.append("retired " + " ".join(sorted(plan.retired)))
    for node_id in plan.order:
        lines.extend(_node_lines(plan.nodes[node_id]))
    return "\n".join(lines) + "\n"


class _LineReader:
    def __init__(self, text: str, what: str):
        self.lines = text.splitlines()
        self.pos = 0
        self.what = what

    def peek(self) -> str | None:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            if line and not line.startswith("#"):
                return line
            self.pos += 1
        return None

    def take(self) -> str:
        line = self.peek()
        if line is None:
            raise PlanError(f"unexpected end of {self.what}")
        self.pos += 1
        return line

    def expect(self, keyword: str) -> str:
        line = self.take()
        if line != keyword and not line.startswith(keyword + " "):
            raise PlanError(f"{self.what}: expected {keyword!r}, got {line!r}")
        return line[len(keyword):].strip()


def _parse_json_fields(rest: str, count: int, what: str) -> list[str]:
    decoder = json.JSONDecoder()
    out = []
    idx = 0
    for _ in range(count):
        while idx < len(rest) and rest[idx] == " ":
            idx += 1
        try:
            value, idx = decoder.raw_decode(rest, idx)
        except ValueError as exc:
            raise PlanError(f"{what}: bad quoted field in {rest!r}") from exc
        if not isinstance(value, str):
            raise PlanError(f"{what}: expected string field")
        out.append(value)
    return out


def _parse_node_block(reader: _LineReader, header_rest: str, with_status: bool) -> PlanNode:
    node_id = header_rest
    informal = _parse_json_fields(reader.expect("informal"), 1, reader.what)[0]
    sketch = _parse_json_fields(reader.expect("sketch"), 1, reader.what)[0]
    deps = tuple(reader.expect("deps").split())
    status = Status.OPEN
    if with_status:
        raw = reader.expect("status")
        try:
            status = Status(raw)
        except ValueError as exc:
            raise PlanError(f"{reader.what}: unknown status {raw!r}") from exc
    anchor = None
    line = reader.take()
    if line.startswith("anchor "):
        name, sig, body = _parse_json_fields(line[len("anchor "):], 3, reader.what)
        anchor = AnchorDecl(name, sig, body)
        line = reader.take()
    if line != "end":
        raise PlanError(f"{reader.what}: expected 'end', got {line!r}")
    return PlanNode(node_id, informal, sketch, deps, status, anchor)


def plan_from_text(text: str) -> ProofPlan:
    reader = _LineReader(text, "plan")
    if reader.take() != _PLAN_HEADER:
        raise PlanError("not a proofplan v1 document")
    revision = int(reader.expect("revision"))
    retired: frozenset[str] = frozenset()
    line = reader.peek()
    if line is not None and line.startswith("retired"):
        retired = frozenset(reader.take().split()[1:])
    nodes: list[PlanNode] = []
    while reader.peek() is not None:
        rest = reader.expect("node")
        nodes.append(_parse_node_block(reader, rest, with_status=True))
    plan = create_plan(nodes)
    return ProofPlan(nodes=plan.nodes, order=plan.order, revision=revision, retired=retired)


def diff_to_text(diff: PlanDiff) -> str:
    lines = [_DIFF_HEADER, f"cause {diff.cause.value}"]
    for node in diff.adds:
        block = _node_lines(node)
        block[0] = f"add {node.node_id}"
        lines.extend(block)
    for node_id in diff.removes:
        lines.append(f"remove {node_id}")
    for rewrite in diff.rewrites:
        lines.append(f"rewrite {rewrite.node_id}")
        lines.append(f"informal {_q(rewrite.informal)}")
        lines.append(f"sketch {_q(rewrite.sketch)}")
        lines.append(("deps " + " ".join(rewrite.deps)).rstrip())
        lines.append("end")
    return "\n".join(lines) + "\n"


def diff_from_text(text: str) -> PlanDiff:
    reader = _LineReader(text, "diff")
    if reader.take() != _DIFF_HEADER:
        raise PlanError("not a plandiff v1 document")
    raw_cause = reader.expect("cause")
    try:
        cause = DiffCause(raw_cause)
    except ValueError as exc:
        raise PlanError(f"diff: unknown cause {raw_cause!r}") from exc
    adds: list[PlanNode] = []
    removes: list[str] = []
    rewrites: list[NodeRewrite] = []
    while True:
        line = reader.peek()
        if line is None:
            break
        if line.startswith("add "):
            reader.take()
            adds.append(_parse_node_block(reader, line[4:].strip(), with_status=True))
        elif line.startswith("remove "):
            removes.append(reader.take().split(None, 1)[1])
        elif line.startswith("rewrite "):
            node_id = reader.take().split(None, 1)[1]
            informal = _parse_json_fields(reader.expect("informal"), 1, "diff")[0]
            sketch = _parse_json_fields(reader.expect("sketch"), 1, "diff")[0]
            deps = tuple(reader.expect("deps").split())
            if reader.take() != "end":
                raise PlanError("diff: rewrite block missing 'end'")
            rewrites.append(NodeRewrite(node_id, informal, sketch, deps))
        else:
            raise PlanError(f"diff: unexpected line {line!r}")
    return PlanDiff(tuple(adds), tuple(removes), tuple(rewrites), cause)
