"""Category hierarchy, novel-path verdicts and the tree-to-DAG transformation."""

from __future__ import annotations

import enum
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import CategoryPath

logger = logging.getLogger(__name__)

TREE, NOVEL = "tree", "novel"


class VerdictKind(str, enum.Enum):
    EXISTING = "EXISTING"
    NOVEL_ACCEPTED = "NOVEL_ACCEPTED"
    REJECTED_UNKNOWN_NODE = "REJECTED_UNKNOWN_NODE"
    REJECTED_CYCLE = "REJECTED_CYCLE"
    REJECTED_MALFORMED = "REJECTED_MALFORMED"


REJECTED_KINDS = (VerdictKind.REJECTED_UNKNOWN_NODE, VerdictKind.REJECTED_CYCLE, VerdictKind.REJECTED_MALFORMED)


@dataclass(frozen=True)
class PathVerdict:
    kind: VerdictKind
    path: CategoryPath
    detail: str = ""


@dataclass(frozen=True)
class TaxonomyGraph:
    """Node labels, directed edges tagged with their origin, and known full paths.

    Identical labels are a single node. ``top_level`` holds labels seen first
    in some gold path, ``leaves`` labels seen last.
    """

    nodes: frozenset[str]
    edges: Mapping[tuple[str, str], str]
    known_paths: frozenset[str]
    top_level: frozenset[str]
    leaves: frozenset[str]
    _children: Mapping[str, tuple[str, ...]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        children: dict[str, list[str]] = defaultdict(list)
        for parent, child in sorted(self.edges):
            children[parent].append(child)
        object.__setattr__(self, "_children", {k: tuple(v) for k, v in children.items()})

    @classmethod
    def from_paths(cls, paths: Iterable[CategoryPath]) -> TaxonomyGraph:
        nodes, known, tops, leaves = set(), set(), set(), set()
        edges: dict[tuple[str, str], str] = {}
        for path in paths:
            if path.depth == 0:
                continue
            nodes.update(path.nodes)
            known.add(path.serialize())
            tops.add(path.nodes[0])
            leaves.add(path.nodes[-1])
            for edge in zip(path.nodes, path.nodes[1:]):
                edges.setdefault(edge, TREE)
        return cls(frozenset(nodes), dict(edges), frozenset(known), frozenset(tops), frozenset(leaves))

    def children(self, label: str) -> tuple[str, ...]:
        return self._children.get(label, ())

    def is_forest(self) -> bool:
        """True when every node has at most one parent and there are no cycles."""
        indeg: dict[str, int] = defaultdict(int)
        for _, child in self.edges:
            indeg[child] += 1
        return all(v <= 1 for v in indeg.values()) and is_acyclic(self.nodes, self.edges)

    def novel_edges(self) -> list[tuple[str, str]]:
        return sorted(e for e, origin in self.edges.items() if origin == NOVEL)

    def topological_order(self) -> list[str]:
        return topological_order(self.nodes, self.edges)

    def write_edges_tsv(self, path: str | Path, header: str | None = None) -> None:
        """``parent<TAB>child<TAB>origin`` lines, sorted, after an optional ``# header`` line."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if header:
                fh.write(f"# {header}\n")
            for (parent, child), origin in sorted(self.edges.items()):
                fh.write(f"{parent}\t{child}\t{origin}\n")


def read_edges_tsv(path: str | Path) -> dict[tuple[str, str], str]:
    edges = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            parent, child, origin = line.split("\t")
            edges[(parent, child)] = origin
    return edges


def topological_order(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> list[str]:
    """Kahn peeling with lexicographic tie-breaking; raises on a cycle."""
    nodes = set(nodes)
    succ: dict[str, list[str]] = defaultdict(list)
    indeg = {n: 0 for n in nodes}
    for parent, child in edges:
        succ[parent].append(child)
        indeg[child] = indeg.get(child, 0) + 1
        indeg.setdefault(parent, 0)
    ready = deque(sorted(n for n, d in indeg.items() if d == 0))
    order = []
    while ready:
        n = ready.popleft()
        order.append(n)
        for c in sorted(succ[n]):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(indeg):
        raise ValueError("graph contains a cycle")
    return order


def is_acyclic(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> bool:
    try:
        topological_order(nodes, edges)
    except ValueError:
        return False
    return True


def _reaches(g: TaxonomyGraph, extra: Mapping[str, list[str]], start: str, goal: str) -> bool:
    stack, seen = [start], {start}
    while stack:
        n = stack.pop()
        if n == goal:
            return True
        for c in (*g.children(n), *extra.get(n, ())):
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return False


def _cycle_edge(g: TaxonomyGraph, path: CategoryPath) -> tuple[str, str] | None:
    """First new edge of ``path`` that closes a cycle, if any."""
    extra: dict[str, list[str]] = defaultdict(list)
    for u, v in zip(path.nodes, path.nodes[1:]):
        if (u, v) in g.edges:
            continue
        if _reaches(g, extra, v, u):
            return (u, v)
        extra[u].append(v)
    return None


def classify_path(g: TaxonomyGraph, p: CategoryPath) -> PathVerdict:
    if p.depth == 0:
        return PathVerdict(VerdictKind.REJECTED_MALFORMED, p, "empty path")
    if p.has_repeats():
        return PathVerdict(VerdictKind.REJECTED_MALFORMED, p, "repeated node")
    unknown = [n for n in p.nodes if n not in g.nodes]
    if unknown:
        return PathVerdict(VerdictKind.REJECTED_UNKNOWN_NODE, p, f"unknown node {unknown[0]!r}")
    if p.serialize() in g.known_paths:
        return PathVerdict(VerdictKind.EXISTING, p)
    bad = _cycle_edge(g, p)
    if bad is not None:
        return PathVerdict(VerdictKind.REJECTED_CYCLE, p, f"edge {bad[0]!r} -> {bad[1]!r} closes a cycle")
    new = sum(1 for e in zip(p.nodes, p.nodes[1:]) if e not in g.edges)
    return PathVerdict(VerdictKind.NOVEL_ACCEPTED, p, f"{new} new edge(s)")


def apply_novel_paths(g: TaxonomyGraph, verdicts: Iterable[PathVerdict]) -> TaxonomyGraph:
    """Add the edges of every accepted novel path, returning a new graph.

    Only edges not already present are added. Accepted paths are re-checked in
    order against the growing graph, so two paths that are acyclic on their
    own but cyclic together cannot both land; the later one is skipped.
    """
    edges = dict(g.edges)
    known = set(g.known_paths)
    current = g
    skipped = 0
    for v in verdicts:
        if v.kind is not VerdictKind.NOVEL_ACCEPTED or v.path.serialize() in known:
            continue
        if _cycle_edge(current, v.path) is not None:
            skipped += 1
            continue
        for edge in zip(v.path.nodes, v.path.nodes[1:]):
            edges.setdefault(edge, NOVEL)
        known.add(v.path.serialize())
        current = TaxonomyGraph(g.nodes, dict(edges), frozenset(known), g.top_level, g.leaves)
    if skipped:
        logger.info("skipped %d accepted paths that became cyclic in combination", skipped)
    return current


def path_shape_report(verdicts: Sequence[PathVerdict], g: TaxonomyGraph) -> dict:
    """Counts per verdict kind and the shape of accepted novel paths.

    The two fractions are ``None`` when no novel path was accepted.
    """
    counts = {k: 0 for k in VerdictKind}
    for v in verdicts:
        counts[v.kind] += 1
    novel = [v.path for v in verdicts if v.kind is VerdictKind.NOVEL_ACCEPTED]
    distinct = {p.serialize() for p in novel}
    top_first = sum(1 for p in novel if p.nodes[0] in g.top_level)
    leaf_last = sum(1 for p in novel if p.nodes[-1] in g.leaves)
    return {
        "total": len(verdicts),
        "count_existing": counts[VerdictKind.EXISTING],
        "count_novel": counts[VerdictKind.NOVEL_ACCEPTED],
        "count_novel_distinct": len(distinct),
        "count_rejected_by_kind": {k.value: counts[k] for k in REJECTED_KINDS},
        "fraction_top_first": top_first / len(novel) if novel else None,
        "fraction_leaf_last": leaf_last / len(novel) if novel else None,
    }
