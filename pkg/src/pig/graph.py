"""DAGs with a response node and an environment node, and the graph sets built on them.

Everything here is purely combinatorial: relatives, d-separation (Bayes-ball
reachability), Markov and stable blankets, forbidden descendants, the
star condition and validated augmentations by follower action parents.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class GraphError(ValueError):
    """Invalid graph input (unknown label, cycle, forbidden edge)."""


class CycleError(GraphError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("graph contains the cycle " + " -> ".join(cycle))


def _as_set(nodes) -> frozenset:
    if nodes is None:
        return frozenset()
    if isinstance(nodes, str):
        return frozenset([nodes])
    return frozenset(nodes)


@dataclass(frozen=True)
class Dag:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]
    response: str = "Y"
    env: str = "E"
    _pa: dict = field(init=False, repr=False, compare=False)
    _ch: dict = field(init=False, repr=False, compare=False)

    def __init__(self, nodes: Iterable[str], edges: Iterable[tuple[str, str]],
                 response: str = "Y", env: str = "E"):
        nodes = tuple(dict.fromkeys(nodes))
        edges = frozenset((str(a), str(b)) for a, b in edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "env", env)
        known = set(nodes)
        for label in (response, env):
            if label not in known:
                raise GraphError(f"node {label!r} missing from node list")
        pa: dict[str, set] = {v: set() for v in nodes}
        ch: dict[str, set] = {v: set() for v in nodes}
        for a, b in edges:
            if a not in known or b not in known:
                raise GraphError(f"edge {a}->{b} references an unknown node")
            if a == b:
                raise CycleError([a, a])
            pa[b].add(a)
            ch[a].add(b)
        object.__setattr__(self, "_pa", {k: frozenset(v) for k, v in pa.items()})
        object.__setattr__(self, "_ch", {k: frozenset(v) for k, v in ch.items()})
        if pa[env]:
            raise GraphError(f"environment node {env!r} must be a source node")
        if (env, response) in edges:
            raise GraphError(f"edge {env}->{response} is not allowed")
        self.topological_order()  # raises CycleError

    # construction helpers -------------------------------------------------

    @classmethod
    def from_dict(cls, spec: Mapping) -> "Dag":
        return cls(spec["nodes"], [tuple(e) for e in spec["edges"]],
                   spec.get("response", "Y"), spec.get("env", "E"))

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes),
                "edges": sorted([list(e) for e in self.edges]),
                "response": self.response, "env": self.env}

    def with_edges(self, extra: Iterable[tuple[str, str]]) -> "Dag":
        return Dag(self.nodes, set(self.edges) | set(extra), self.response, self.env)

    # basic relatives ------------------------------------------------------

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(v for v in self.nodes if v not in (self.response, self.env))

    def _check(self, node: str) -> None:
        if node not in self._pa:
            raise GraphError(f"unknown node {node!r}")

    def parents(self, node: str) -> frozenset:
        self._check(node)
        return self._pa[node]

    def children(self, node: str) -> frozenset:
        self._check(node)
        return self._ch[node]

    def descendants(self, nodes) -> frozenset:
        """Nodes reachable from ``nodes`` by a directed path of length one or more."""
        start = _as_set(nodes)
        for v in start:
            self._check(v)
        seen: set = set()
        stack = [c for v in start for c in self._ch[v]]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(self._ch[v])
        return frozenset(seen)

    def ancestors(self, nodes) -> frozenset:
        start = _as_set(nodes)
        seen: set = set()
        stack = [p for v in start for p in self._pa[v]]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(self._pa[v])
        return frozenset(seen)

    def nondescendants(self, node: str) -> frozenset:
        self._check(node)
        return frozenset(set(self.nodes) - self.descendants(node) - {node})

    def relatives(self, node: str, kind: str) -> frozenset:
        fn = {"parents": self.parents, "children": self.children,
              "descendants": self.descendants,
              "nondescendants": self.nondescendants}.get(kind)
        if fn is None:
            raise GraphError(f"unknown relative kind {kind!r}")
        return fn(node)

    def topological_order(self) -> tuple[str, ...]:
        indeg = {v: len(self._pa[v]) for v in self.nodes}
        queue = deque(v for v in self.nodes if indeg[v] == 0)
        order = []
        while queue:
            v = queue.popleft()
            order.append(v)
            for c in sorted(self._ch[v], key=self.nodes.index):
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if len(order) != len(self.nodes):
            raise CycleError(_find_cycle(self._ch, [v for v in self.nodes if indeg[v] > 0]))
        return tuple(order)

    # d-separation ---------------------------------------------------------

    def d_separated(self, a, b, z=()) -> bool:
        """Bayes-ball reachability: True iff every path between ``a`` and ``b`` is blocked by ``z``."""
        A, B, Z = _as_set(a), _as_set(b), _as_set(z)
        for v in A | B | Z:
            self._check(v)
        if (A | B) & Z:
            raise GraphError("conditioning set must not contain the endpoints")
        if A & B:
            return False
        # ancestors of Z (inclusive) decide whether colliders are open
        anz = self.ancestors(Z) | Z
        visited = set()
        # (node, direction): "up" = arrived from a child, "down" = arrived from a parent
        stack = [(v, "up") for v in A]
        while stack:
            v, d = stack.pop()
            if (v, d) in visited:
                continue
            visited.add((v, d))
            if v not in Z and v in B:
                return False
            if d == "up" and v not in Z:
                stack.extend((p, "up") for p in self._pa[v])
                stack.extend((c, "down") for c in self._ch[v])
            elif d == "down":
                if v not in Z:
                    stack.extend((c, "down") for c in self._ch[v])
                if v in anz:
                    stack.extend((p, "up") for p in self._pa[v])
        return True


def _find_cycle(children: Mapping[str, frozenset], candidates: list[str]) -> list[str]:
    cand = set(candidates)
    color: dict[str, int] = {}
    path: list[str] = []

    def visit(v):
        color[v] = 1
        path.append(v)
        for c in sorted(children[v]):
            if c not in cand:
                continue
            if color.get(c) == 1:
                return path[path.index(c):] + [c]
            if c not in color:
                found = visit(c)
                if found:
                    return found
        color[v] = 2
        path.pop()
        return None

    for v in candidates:
        if v not in color:
            found = visit(v)
            if found:
                return found
    return candidates


# ---------------------------------------------------------------------------
# graph sets


def _covariate_set(dag: Dag, nodes) -> frozenset:
    return frozenset(nodes) - {dag.response, dag.env}


def markov_blanket(dag: Dag) -> frozenset:
    y = dag.response
    ch = dag.children(y)
    out = set(dag.parents(y)) | set(ch)
    for c in ch:
        out |= dag.parents(c)
    return _covariate_set(dag, out)


def forbidden_descendants(dag: Dag) -> tuple[frozenset, frozenset]:
    """Return ``(intervened children of Y, those children with all their descendants)``."""
    ch_int = frozenset(dag.children(dag.response) & dag.children(dag.env))
    forb = frozenset(ch_int | dag.descendants(ch_int)) if ch_int else frozenset()
    return ch_int, forb


def stable_blanket(dag: Dag) -> frozenset:
    y = dag.response
    _, forb = forbidden_descendants(dag)
    allowed_children = dag.children(y) - forb
    out = set(dag.parents(y)) | set(allowed_children)
    for c in allowed_children:
        out |= dag.parents(c)
    return _covariate_set(dag, out)


def check_star_condition(dag: Dag) -> bool:
    ch_int, _ = forbidden_descendants(dag)
    if not ch_int:
        return True
    return (dag.children(dag.response) & dag.descendants(ch_int)) <= ch_int


def star_violators(dag: Dag) -> frozenset:
    """Children of Y that descend from an intervened child without being intervened themselves."""
    ch_int, _ = forbidden_descendants(dag)
    if not ch_int:
        return frozenset()
    return frozenset((dag.children(dag.response) & dag.descendants(ch_int)) - ch_int)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class Violation:
    target: str
    parent: str | None
    rule: str

    def __str__(self):
        who = f"({self.target}, {self.parent})" if self.parent else self.target
        return f"{who}: {self.rule}"


@dataclass(frozen=True)
class AugmentationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "ok" if self.ok else "; ".join(map(str, self.violations))


def validate_augmentation(dag: Dag, action_sets: Mapping[str, Iterable[str]]) -> AugmentationReport:
    """Check action sets against the rules that keep the stable blanket fixed.

    Every permitted new parent must avoid Y, E and the forbidden descendants,
    and adding *all* action edges at once must leave the graph acyclic.
    """
    violations = []
    ch_e = dag.children(dag.env)
    _, forb = forbidden_descendants(dag)
    known = set(dag.nodes)
    for j, parents in action_sets.items():
        if j not in ch_e:
            violations.append(Violation(j, None, "target is not a child of the environment node"))
            continue
        for k in parents:
            if k not in known:
                violations.append(Violation(j, k, "unknown node"))
            elif k == dag.response:
                violations.append(Violation(j, k, "the response may not be an action parent"))
            elif k == dag.env:
                violations.append(Violation(j, k, "the environment node may not be an action parent"))
            elif k in forb:
                violations.append(Violation(j, k, "parent is a forbidden descendant"))
            elif k == j:
                violations.append(Violation(j, k, "self-loop"))
    if not violations:
        extra = [(k, j) for j, ps in action_sets.items() for k in ps]
        try:
            dag.with_edges(extra)
        except CycleError as err:
            violations.append(Violation(err.cycle[0], err.cycle[-2] if len(err.cycle) > 1 else None,
                                        "augmented graph is cyclic: " + " -> ".join(err.cycle)))
    return AugmentationReport(tuple(violations))


def augment(dag: Dag, action_sets: Mapping[str, Iterable[str]],
            chosen: Mapping[str, Iterable[str]]) -> Dag:
    """Add edges ``k -> j`` for every chosen action parent ``k`` of intervened node ``j``."""
    report = validate_augmentation(dag, {j: set(chosen.get(j, ())) for j in chosen})
    if not report.ok:
        raise GraphError(str(report))
    for j, ks in chosen.items():
        extra = set(ks) - set(action_sets.get(j, ()))
        if extra:
            raise GraphError(f"{sorted(extra)} not in the action set of {j}")
    return dag.with_edges((k, j) for j, ks in chosen.items() for k in ks)


# ---------------------------------------------------------------------------
# random graphs


def random_dag(n_covariates: int, rng: np.random.Generator, edge_prob: float = 0.35,
               env_prob: float = 0.35, min_env_children: int = 0) -> Dag:
    """Random DAG over ``X1..Xn``, ``Y`` and a source ``E`` (never ``E -> Y``)."""
    inner = [f"X{i + 1}" for i in range(n_covariates)]
    pos = int(rng.integers(0, n_covariates + 1))
    order = inner[:pos] + ["Y"] + inner[pos:]
    order = [order[i] for i in rng.permutation(len(order))]
    edges = []
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            if rng.random() < edge_prob:
                edges.append((a, b))
    targets = [v for v in inner if rng.random() < env_prob]
    while len(targets) < min(min_env_children, n_covariates):
        extra = inner[int(rng.integers(0, n_covariates))]
        if extra not in targets:
            targets.append(extra)
    edges += [("E", t) for t in targets]
    return Dag(inner + ["Y", "E"], edges)


FIG2 = Dag(
    ["X1", "X2", "X3", "X4", "X5", "Y", "E"],
    [("X2", "X1"), ("X1", "Y"), ("X2", "Y"), ("Y", "X3"), ("Y", "X4"),
     ("X2", "X4"), ("X4", "X5"), ("E", "X1"), ("E", "X4")],
)

STAR_EXAMPLE = Dag(["X1", "X2", "Y", "E"],
                   [("Y", "X1"), ("Y", "X2"), ("X2", "X1"), ("E", "X2")])
