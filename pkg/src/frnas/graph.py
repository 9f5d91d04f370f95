"""Architecture DAGs with operations on vertices.

``adjacency[i, j] == 1`` is an edge from vertex ``i`` to vertex ``j``. The
forward encoding uses the adjacency as is; the reverse encoding uses its
transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GraphError(ValueError):
    """Base class for invalid architecture graphs."""


class NonSquareAdjacency(GraphError):
    pass


class SelfLoop(GraphError):
    def __init__(self, vertex: int):
        super().__init__(f"self loop on vertex {vertex}")
        self.vertex = vertex


class CycleDetected(GraphError):
    def __init__(self, vertices: Sequence[int]):
        super().__init__(f"cycle through vertices {list(vertices)}")
        self.vertices = list(vertices)


class BadOpIndex(GraphError):
    def __init__(self, vertex: int, index: int, size: int):
        super().__init__(f"vertex {vertex} has op index {index}, vocabulary size is {size}")
        self.vertex = vertex
        self.index = index


class UnknownOpName(GraphError):
    def __init__(self, name: str):
        super().__init__(f"operation {name!r} not in vocabulary")
        self.name = name


@dataclass(frozen=True)
class OpVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("vocabulary must contain at least one operation")
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownOpName(name) from None

    @classmethod
    def from_file(cls, path) -> "OpVocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(tuple(line.strip() for line in fh if line.strip()))

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.names) + "\n")


@dataclass(frozen=True, eq=False)
class ArchGraph:
    """An architecture cell: adjacency matrix plus one op index per vertex.

    Construction copies the inputs into read-only arrays but does not
    validate; call :func:`validate_graph` for that.
    """

    adjacency: np.ndarray
    ops: tuple[int, ...]
    _key: bytes = field(init=False, repr=False)

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.int8)
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "ops", tuple(int(o) for o in self.ops))
        object.__setattr__(
            self, "_key", a.tobytes() + b"|" + np.asarray(self.ops, np.int64).tobytes()
        )

    @property
    def n_vertices(self) -> int:
        return len(self.ops)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def key(self) -> bytes:
        """Canonical bytes of (adjacency, ops), used for deduplication."""
        return self._key

    def __eq__(self, other):
        if not isinstance(other, ArchGraph):
            return NotImplemented
        return self.adjacency.shape == other.adjacency.shape and self._key == other._key

    def __hash__(self):
        return hash(self._key)


def topological_order(adjacency: np.ndarray) -> list[int] | None:
    """Kahn's algorithm; None if the graph has a cycle."""
    a = np.asarray(adjacency)
    n = a.shape[0]
    indeg = a.sum(axis=0).astype(int)
    ready = [v for v in range(n) if indeg[v] == 0]
    order = []
    while ready:
        v = ready.pop()
        order.append(v)
        for w in np.flatnonzero(a[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(int(w))
    return order if len(order) == n else None


def validate_graph(g: ArchGraph, vocab: OpVocabulary) -> None:
    """Raise a :class:`GraphError` subclass naming the offending vertex or edge."""
    a = g.adjacency
    n = g.n_vertices
    if a.ndim != 2 or a.shape != (n, n):
        raise NonSquareAdjacency(
            f"adjacency shape {a.shape} does not match {n} vertices"
        )
    if np.any((a != 0) & (a != 1)):
        raise GraphError("adjacency entries must be 0 or 1")
    diag = np.flatnonzero(np.diagonal(a))
    if diag.size:
        raise SelfLoop(int(diag[0]))
    for v, op in enumerate(g.ops):
        if not 0 <= op < vocab.size:
            raise BadOpIndex(v, op, vocab.size)
    if topological_order(a) is None:
        raise CycleDetected(_find_cycle(a))


def _find_cycle(a: np.ndarray) -> list[int]:
    # Peel off vertices that cannot be on a cycle, then walk successors.
    alive = np.ones(a.shape[0], bool)
    changed = True
    while changed:
        changed = False
        for v in np.flatnonzero(alive):
            if not (a[alive, v].any() and a[v, alive].any()):
                alive[v] = False
                changed = True
    v = int(np.flatnonzero(alive)[0])
    seen: dict[int, int] = {}
    path = []
    while v not in seen:
        seen[v] = len(path)
        path.append(v)
        v = int(np.flatnonzero(a[v] & alive)[0])
    return path[seen[v]:]


def reverse_graph(g: ArchGraph) -> ArchGraph:
    return ArchGraph(g.adjacency.T, g.ops)


def one_hot_features(g: ArchGraph, vocab: OpVocabulary) -> np.ndarray:
    out = np.zeros((g.n_vertices, vocab.size))
    for v, op in enumerate(g.ops):
        if not 0 <= op < vocab.size:
            raise BadOpIndex(v, op, vocab.size)
        out[v, op] = 1.0
    return out
