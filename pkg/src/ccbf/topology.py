"""Directed coupling graph and neighbor-set queries.

An edge ``(i, j)`` means agent ``j``'s state enters agent ``i``'s drift.
Agent indices are 1-based everywhere in the public API.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

__all__ = ["CouplingGraph"]


@dataclass(frozen=True)
class CouplingGraph:
    """Immutable coupling structure over agents ``1..n``.

    Self-loops are always present; they are added on construction if the
    caller leaves them out.

    Example:
        >>> g = CouplingGraph.chain(3)
        >>> g.in_neighbors(2)
        [1, 2, 3]
        >>> g.out_neighbors(3)
        [2, 3]
    """

    n: int
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError(f"agent count must be a positive integer, got {self.n!r}")
        edges = set()
        for e in self.edges:
            i, j = (int(v) for v in e)
            if not (1 <= i <= self.n and 1 <= j <= self.n):
                raise ValueError(f"edge {e} has an index outside 1..{self.n}")
            edges.add((i, j))
        edges.update((i, i) for i in range(1, self.n + 1))
        object.__setattr__(self, "edges", frozenset(edges))

        plus: dict[int, list[int]] = {i: [] for i in range(1, self.n + 1)}
        minus: dict[int, list[int]] = {i: [] for i in range(1, self.n + 1)}
        for i, j in edges:
            plus[i].append(j)
            minus[j].append(i)
        object.__setattr__(self, "_plus", {i: tuple(sorted(v)) for i, v in plus.items()})
        object.__setattr__(self, "_minus", {i: tuple(sorted(v)) for i, v in minus.items()})

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> CouplingGraph:
        return cls(n, frozenset(tuple(e) for e in edges))

    @classmethod
    def complete(cls, n: int) -> CouplingGraph:
        return cls(n, frozenset((i, j) for i in range(1, n + 1) for j in range(1, n + 1)))

    @classmethod
    def chain(cls, n: int) -> CouplingGraph:
        """Bidirectional path 1 - 2 - ... - n."""
        edges = set()
        for i in range(1, n):
            edges.add((i, i + 1))
            edges.add((i + 1, i))
        return cls(n, frozenset(edges))

    @classmethod
    def ring(cls, n: int, bidirectional: bool = True) -> CouplingGraph:
        """Ring where agent ``i`` depends on ``i+1`` (and ``i-1`` if bidirectional)."""
        edges = set()
        for i in range(1, n + 1):
            nxt = i % n + 1
            edges.add((i, nxt))
            if bidirectional:
                edges.add((nxt, i))
        return cls(n, frozenset(edges))

    def _check(self, i: int) -> None:
        if not 1 <= i <= self.n:
            raise IndexError(f"agent index {i} out of range 1..{self.n}")

    def in_neighbors(self, i: int) -> list[int]:
        """Agents whose state enters agent ``i``'s drift (includes ``i``)."""
        self._check(i)
        return list(self._plus[i])  # type: ignore[attr-defined]

    def out_neighbors(self, i: int) -> list[int]:
        """Agents whose drift depends on agent ``i``'s state (includes ``i``)."""
        self._check(i)
        return list(self._minus[i])  # type: ignore[attr-defined]

    def neighbors(self, i: int) -> list[int]:
        """Union of in- and out-neighbors."""
        return sorted(set(self.in_neighbors(i)) | set(self.out_neighbors(i)))

    def two_hop(self, i: int) -> list[int]:
        """All agents within two hops of ``i`` in the undirected neighbor sense."""
        out: set[int] = set()
        for j in self.neighbors(i):
            out.update(self.neighbors(j))
        return sorted(out)

    def edge_list(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def is_complete(self) -> bool:
        return len(self.edges) == self.n * self.n
