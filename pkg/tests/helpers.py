"""Shared builders and independent oracles for the test suite.

The oracles here deliberately use different algorithms from the library code:
invalidation is re-derived by fixpoint scans over the edge list, depth levels
by Bellman-Ford style relaxation, and the forbidden-token reference scanner is
a plain character automaton.
"""

from __future__ import annotations

import random
from pathlib import Path

from proofloop.agents import (
    CheckKind,
    CheckVerdict,
    Fixture,
    FixtureEntry,
    FixtureKey,
    LeanOutcome,
    TaskKind,
    TokenUsage,
)
from proofloop.plan import (
    AnchorDecl,
    DiffCause,
    NodeRewrite,
    PlanDiff,
    PlanNode,
    ProofPlan,
    Status,
    create_plan,
)

REPO_ROOT = Path(__file__).resolve().parent.parent
BURNSIDE_DIR = REPO_ROOT / "fixtures" / "burnside"


def anchor_decl(name: str = "T") -> AnchorDecl:
    return AnchorDecl(name, f"theorem {name} : True", ":= by\n  sorry\n")


def mk_node(node_id: str, deps: tuple[str, ...] = (), status: Status = Status.OPEN,
            anchor: AnchorDecl | None = None, informal: str | None = None,
            sketch: str = "") -> PlanNode:
    return PlanNode(node_id, informal if informal is not None else f"statement {node_id}",
                    sketch, deps, status, anchor)


def chain_plan(ids: list[str], statuses: dict[str, Status] | None = None,
               anchor_id: str | None = None) -> ProofPlan:
    """A -> B -> C style: each node depends on the previous one."""
    statuses = statuses or {}
    anchor_id = anchor_id or ids[-1]
    nodes = []
    for i, node_id in enumerate(ids):
        deps = (ids[i - 1],) if i else ()
        nodes.append(mk_node(node_id, deps, statuses.get(node_id, Status.OPEN),
                             anchor_decl(node_id) if node_id == anchor_id else None))
    return create_plan(nodes)


# ---------------------------------------------------------------------------
# Fixture building for scripted runs.

SIMPLE_INPUT = """theorem Main : True := by
  sorry
"""


def clean_src(node_id: str, extra: str = "") -> str:
    return f"theorem {node_id}_stub : True := trivial\n{extra}"


def sorried_src(node_id: str) -> str:
    return f"theorem {node_id}_stub : True := by\n  sorry\n"


def error_src(node_id: str, i: int = 1) -> str:
    return f"-- sim: error broken {node_id} #{i}\ntheorem {node_id}_stub : True := trivial\n"


def main_clean_src(extra: str = "") -> str:
    return f"theorem Main : True := trivial\n{extra}"


class FixtureBuilder:
    """Occurrence-tracking fixture assembly for synthetic runs."""

    def __init__(self) -> None:
        self.fixture = Fixture()
        self._occ: dict[tuple, int] = {}

    def _next(self, key: FixtureKey) -> int:
        occ = self._occ.get(key, 0) + 1
        self._occ[key] = occ
        return occ

    def initial(self, diff: PlanDiff) -> "FixtureBuilder":
        key = FixtureKey(TaskKind.PLAN_INITIAL)
        self.fixture.add(FixtureEntry(key, self._next(key), diff))
        return self

    def revise(self, node_id: str, diff: PlanDiff) -> "FixtureBuilder":
        key = FixtureKey(TaskKind.PLAN_REVISE, None, node_id)
        self.fixture.add(FixtureEntry(key, self._next(key), diff))
        return self

    def lean(self, node_id: str, source: str, usage: TokenUsage = TokenUsage()) -> "FixtureBuilder":
        key = FixtureKey(TaskKind.LEAN_WORK, None, node_id)
        self.fixture.add(FixtureEntry(key, self._next(key), LeanOutcome(source), usage))
        return self

    def check(self, node_id: str, kind: CheckKind, passed: bool,
              note: str = "") -> "FixtureBuilder":
        key = FixtureKey(TaskKind.CHECK, kind, node_id)
        self.fixture.add(FixtureEntry(key, self._next(key), CheckVerdict(passed, note)))
        return self


def single_node_fixture() -> Fixture:
    """One anchored statement, closed on the first clean attempt."""
    diff = PlanDiff(adds=(mk_node("Main", anchor=anchor_decl("Main")),),
                    cause=DiffCause.INITIAL_PLAN)
    builder = FixtureBuilder()
    builder.initial(diff)
    builder.lean("Main", main_clean_src())
    builder.check("Main", CheckKind.FAITHFULNESS, True)
    return builder.fixture


def splitter_fixture(cycles: int) -> Fixture:
    """A perpetually splitting run: every decomposition check votes to split."""
    builder = FixtureBuilder()
    builder.initial(PlanDiff(adds=(mk_node("Main", anchor=anchor_decl("Main")),),
                             cause=DiffCause.INITIAL_PLAN))
    current = "Main"
    for i in range(1, cycles + 1):
        helper = f"H{i}"
        builder.lean(current, sorried_src(current))
        builder.check(current, CheckKind.MATH, True)
        builder.check(current, CheckKind.DECOMPOSITION, False, "split")
        node = mk_node(helper)
        rewrite = NodeRewrite(current, f"statement {current}", "", (helper,))
        builder.revise(current, PlanDiff(adds=(node,), rewrites=(rewrite,),
                                         cause=DiffCause.DECOMPOSITION_SPLIT))
        current = helper
    builder.lean(current, sorried_src(current))
    builder.check(current, CheckKind.MATH, True)
    builder.check(current, CheckKind.DECOMPOSITION, False, "split")
    return builder.fixture


# ---------------------------------------------------------------------------
# Independent oracles.

def oracle_invalidated(plan: ProofPlan, diff: PlanDiff) -> set[str]:
    """Fixpoint recomputation of the invalidated set over the OLD edge list."""
    edges = [(dep, node_id) for node_id, node in plan.nodes.items() for dep in node.deps]
    seeds: set[str] = set(diff.removes)
    self_only: set[str] = set()
    for rewrite in diff.rewrites:
        old = plan.nodes[rewrite.node_id]
        if rewrite.informal != old.informal or tuple(rewrite.deps) != old.deps:
            seeds.add(rewrite.node_id)
        elif rewrite.sketch != old.sketch:
            self_only.add(rewrite.node_id)
    reached = set(seeds)
    changed = True
    while changed:
        changed = False
        for dep, user in edges:
            if dep in reached and user not in reached:
                reached.add(user)
                changed = True
    survivors = set(plan.nodes) - set(diff.removes)
    return (reached | self_only) & survivors


def oracle_levels(node_ids: list[str], edges: list[tuple[str, str]]) -> dict[str, int]:
    """Longest path from sources by relaxation until fixpoint."""
    levels = {node: 0 for node in node_ids}
    for _ in range(len(node_ids) + 1):
        moved = False
        for dep, node in edges:
            if levels[node] < levels[dep] + 1:
                levels[node] = levels[dep] + 1
                moved = True
        if not moved:
            return levels
    raise AssertionError("relaxation did not converge; graph is cyclic")


IDENT_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_'")


def oracle_scan(text: str, filename: str = "<memory>") -> list[tuple[str, str, int]]:
    """Character automaton reference for the forbidden-token scanner."""
    tokens = ("sorry", "admit", "axiom")
    hits = []
    n = len(text)
    i = 0
    line = 1
    state = "code"
    depth = 0
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            if state == "line-comment":
                state = "code"
            i += 1
            continue
        if state == "code":
            if text.startswith("--", i):
                state = "line-comment"
                i += 2
                continue
            if text.startswith("/-", i):
                state = "block-comment"
                depth = 1
                i += 2
                continue
            if ch == '"':
                state = "string"
                i += 1
                continue
            for token in tokens:
                if text.startswith(token, i):
                    before = text[i - 1] if i > 0 else " "
                    after = text[i + len(token)] if i + len(token) < n else " "
                    if before not in IDENT_CHARS and after not in IDENT_CHARS:
                        hits.append((token, filename, line))
                        i += len(token)
                        break
            else:
                i += 1
            continue
        if state == "line-comment":
            i += 1
            continue
        if state == "block-comment":
            if text.startswith("/-", i):
                depth += 1
                i += 2
            elif text.startswith("-/", i):
                depth -= 1
                i += 2
                if depth == 0:
                    state = "code"
            else:
                i += 1
            continue
        if state == "string":
            if ch == "\\":
                i += 2
            elif ch == '"':
                state = "code"
                i += 1
            else:
                i += 1
            continue
    return hits


# ---------------------------------------------------------------------------
# Random generators (seeded by callers).

def random_dag_plan(rng: random.Random, max_nodes: int = 50) -> ProofPlan:
    count = rng.randint(2, max_nodes)
    ids = [f"n{i}" for i in range(count)]
    nodes = []
    for i, node_id in enumerate(ids):
        pool = ids[:i]
        deps = tuple(sorted(rng.sample(pool, rng.randint(0, min(len(pool), 4)))))
        is_anchor = i == count - 1
        status = rng.choice([Status.OPEN, Status.FAILING, Status.CLOSED])
        nodes.append(mk_node(node_id, deps, status,
                             anchor_decl(node_id) if is_anchor else None))
    order = list(range(count))
    rng.shuffle(order)
    return create_plan([nodes[i] for i in order])


def random_diff(rng: random.Random, plan: ProofPlan) -> PlanDiff:
    ids = list(plan.order)
    anchor = plan.anchor_id
    removable = [node_id for node_id in ids if node_id != anchor]
    removes = tuple(sorted(rng.sample(removable, rng.randint(0, min(2, len(removable))))))
    survivors = [node_id for node_id in ids if node_id not in removes]
    position = {node_id: i for i, node_id in enumerate(plan.order)}

    rewrites: dict[str, NodeRewrite] = {}
    # First fix the dangling deps left by removals.
    for node_id in survivors:
        node = plan.nodes[node_id]
        if any(dep in removes for dep in node.deps):
            deps = tuple(dep for dep in node.deps if dep not in removes)
            rewrites[node_id] = NodeRewrite(node_id, node.informal, node.sketch, deps)
    # Then some free-choice rewrites with random change flags.
    for node_id in rng.sample(survivors, rng.randint(0, min(3, len(survivors)))):
        if node_id in rewrites:
            continue
        node = plan.nodes[node_id]
        informal = node.informal
        sketch = node.sketch
        deps = tuple(dep for dep in node.deps if dep not in removes)
        mode = rng.choice(["informal", "sketch", "deps", "none"])
        if mode == "informal":
            informal += " (edited)"
        elif mode == "sketch":
            sketch += " (edited)"
        elif mode == "deps":
            earlier = [e for e in survivors if position[e] < position[node_id]]
            deps = tuple(sorted(rng.sample(earlier, rng.randint(0, min(len(earlier), 3)))))
        rewrites[node_id] = NodeRewrite(node_id, informal, sketch, deps)

    adds = []
    add_count = rng.randint(0, 2)
    for i in range(add_count):
        node_id = f"a{plan.revision}_{i}"
        pool = survivors + [a.node_id for a in adds]
        deps = tuple(sorted(rng.sample(pool, rng.randint(0, min(len(pool), 3)))))
        adds.append(mk_node(node_id, deps))
    return PlanDiff(tuple(adds), removes, tuple(rewrites.values()),
                    DiffCause.DECOMPOSITION_SPLIT)


def random_lean_file(rng: random.Random) -> str:
    """Token soup mixing keywords, lookalikes, comments and strings."""
    words = ["sorry", "admit", "axiom", "sorryFree", "unsorry", "sorry'",
             "axiom_of_choice", "admitted", "theorem", "foo", "rfl", "x1"]
    pieces: list[str] = []
    for _ in range(rng.randint(5, 60)):
        roll = rng.random()
        if roll < 0.45:
            pieces.append(rng.choice(words))
            pieces.append(rng.choice([" ", " ", "\n", " (", ") ", ".", ", "]))
        elif roll < 0.60:
            pieces.append("-- " + " ".join(rng.choices(words, k=rng.randint(1, 4))) + "\n")
        elif roll < 0.75:
            inner = " ".join(rng.choices(words, k=rng.randint(1, 4)))
            if rng.random() < 0.4:
                inner += " /- " + rng.choice(words) + " -/ "
            pieces.append("/- " + inner + " -/")
        elif roll < 0.9:
            body = " ".join(rng.choices(words, k=rng.randint(1, 3)))
            if rng.random() < 0.3:
                body += "\\\" " + rng.choice(words)
            if rng.random() < 0.2:
                body += "\\\\"
            pieces.append('"' + body + '"')
        else:
            pieces.append("\n")
    if rng.random() < 0.1:
        pieces.append("/- unterminated " + rng.choice(words))
    if rng.random() < 0.1:
        pieces.append('"unterminated ' + rng.choice(words))
    return "".join(pieces)
