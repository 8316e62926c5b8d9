"""Molecular graphs, canonical hashing, fingerprints, scaffolds and properties."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1, "S": 2}
ELEMENTS = tuple(VALENCE)
FINGERPRINT_BITS = 1024


class ValenceError(ValueError):
    pass


@dataclass(frozen=True)
class MoleculeGraph:
    """Undirected molecular graph: element symbols plus ``(i, j, order)`` bonds with ``i < j``."""

    atoms: tuple[str, ...] = ()
    bonds: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        atoms = tuple(self.atoms)
        bonds = []
        seen = set()
        for i, j, order in self.bonds:
            i, j, order = int(i), int(j), int(order)
            if i == j:
                raise ValueError(f"self-loop on atom {i}")
            if order not in (1, 2, 3):
                raise ValueError(f"bond order must be 1..3, got {order}")
            if not (0 <= i < len(atoms) and 0 <= j < len(atoms)):
                raise ValueError(f"bond ({i}, {j}) references a missing atom")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"parallel bond between {key}")
            seen.add(key)
            bonds.append((key[0], key[1], order))
        for a in atoms:
            if a not in VALENCE:
                raise ValueError(f"unknown element {a!r}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", tuple(sorted(bonds)))

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, sorted ``(neighbor, order)`` pairs."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for i, j, order in self.bonds:
            adj[i].append((j, order))
            adj[j].append((i, order))
        return tuple(tuple(sorted(a)) for a in adj)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def bond_order_sum(self, i: int) -> int:
        return sum(o for _, o in self.adjacency[i])

    def is_valid(self) -> bool:
        """Valence respected everywhere and a single connected component (or empty)."""
        if any(self.bond_order_sum(i) > VALENCE[a] for i, a in enumerate(self.atoms)):
            return False
        return self.n_components() <= 1

    def n_components(self) -> int:
        n = len(self.atoms)
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j, _ in self.bonds:
            parent[find(i)] = find(j)
        return len({find(i) for i in range(n)})

    def n_rings(self) -> int:
        return len(self.bonds) - len(self.atoms) + self.n_components()

    def relabel(self, perm) -> "MoleculeGraph":
        """Graph with atom ``i`` moved to position ``perm[i]``."""
        atoms = [None] * len(self.atoms)
        for i, a in enumerate(self.atoms):
            atoms[perm[i]] = a
        return MoleculeGraph(tuple(atoms), tuple((perm[i], perm[j], o) for i, j, o in self.bonds))

    def subgraph(self, keep) -> "MoleculeGraph":
        keep = sorted(keep)
        index = {old: new for new, old in enumerate(keep)}
        bonds = tuple((index[i], index[j], o) for i, j, o in self.bonds if i in index and j in index)
        return MoleculeGraph(tuple(self.atoms[i] for i in keep), bonds)


# -- canonical labeling -----------------------------------------------------

def _refine(graph: MoleculeGraph, cells: list[list[int]]) -> list[list[int]]:
    """Equitable refinement of an ordered partition.

    A vertex's signature is the multiset of (neighbor cell, bond order). Cells
    are split by sorted signature, and split pieces keep their parent's place
    in the order, so the result depends only on the input ordered partition.
    """
    adj = graph.adjacency
    while True:
        cell_of = {}
        for ci, cell in enumerate(cells):
            for v in cell:
                cell_of[v] = ci
        new_cells: list[list[int]] = []
        for cell in cells:
            if len(cell) == 1:
                new_cells.append(cell)
                continue
            groups: dict[tuple, list[int]] = {}
            for v in cell:
                sig = tuple(sorted((cell_of[u], o) for u, o in adj[v]))
                groups.setdefault(sig, []).append(v)
            for sig in sorted(groups):
                new_cells.append(groups[sig])
        if len(new_cells) == len(cells):
            return new_cells
        cells = new_cells


def _initial_partition(graph: MoleculeGraph) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for v, element in enumerate(graph.atoms):
        inv = (ELEMENTS.index(element), graph.degree(v), tuple(sorted(o for _, o in graph.adjacency[v])))
        groups.setdefault(inv, []).append(v)
    return [groups[k] for k in sorted(groups)]


def _certificate(graph: MoleculeGraph, order: list[int]) -> tuple:
    rank = {v: r for r, v in enumerate(order)}
    atoms = tuple(ELEMENTS.index(graph.atoms[v]) for v in order)
    bonds = tuple(sorted((min(rank[i], rank[j]), max(rank[i], rank[j]), o) for i, j, o in graph.bonds))
    return atoms, bonds


def canonical_order(graph: MoleculeGraph) -> list[int]:
    """Atom indices listed in canonical order.

    Individualization-refinement: refine, then branch on every member of the
    first smallest non-singleton cell, and keep the leaf whose relabeled graph
    (the certificate) is lexicographically smallest.
    """
    if graph.n_atoms == 0:
        return []
    best: list = [None, None]

    def search(cells):
        cells = _refine(graph, cells)
        if all(len(c) == 1 for c in cells):
            order = [c[0] for c in cells]
            cert = _certificate(graph, order)
            if best[0] is None or cert < best[0]:
                best[0], best[1] = cert, order
            return
        target = min((i for i, c in enumerate(cells) if len(c) > 1), key=lambda i: (len(cells[i]), i))
        # Non-adjacent twins (identical neighbor lists) are swapped by an
        # automorphism that fixes the partition, so one per twin class suffices.
        reps = {}
        for v in cells[target]:
            reps.setdefault(graph.adjacency[v], v)
        for v in reps.values():
            rest = [u for u in cells[target] if u != v]
            search(cells[:target] + [[v], rest] + cells[target + 1:])

    search(_initial_partition(graph))
    return best[1]


def canonical_form(graph: MoleculeGraph) -> MoleculeGraph:
    order = canonical_order(graph)
    perm = {v: r for r, v in enumerate(order)}
    return graph.relabel([perm[i] for i in range(graph.n_atoms)])


def _digest(payload: str) -> int:
    return int.from_bytes(hashlib.blake2b(payload.encode(), digest_size=8).digest(), "little")


EMPTY_HASH = _digest("empty")


def canonical_hash(graph: MoleculeGraph) -> int:
    """64-bit isomorphism-invariant digest. The empty graph maps to ``EMPTY_HASH``."""
    if graph.n_atoms == 0:
        return EMPTY_HASH
    atoms, bonds = _certificate(graph, canonical_order(graph))
    return _digest(repr((atoms, bonds)))


# -- fingerprints and scaffolds --------------------------------------------

def fingerprint(graph: MoleculeGraph, n_bits: int = FINGERPRINT_BITS, radius: int = 2) -> np.ndarray:
    """Circular fingerprint: every rooted neighborhood of radius 0..2 sets one bit."""
    bits = np.zeros(n_bits, dtype=bool)
    adj = graph.adjacency
    ids = [_digest(f"{a}|{sorted(o for _, o in adj[v])}") for v, a in enumerate(graph.atoms)]
    for v in range(graph.n_atoms):
        bits[ids[v] % n_bits] = True
    for _ in range(radius):
        ids = [_digest(f"{ids[v]}|{sorted((o, ids[u]) for u, o in adj[v])}") for v in range(graph.n_atoms)]
        for v in range(graph.n_atoms):
            bits[ids[v] % n_bits] = True
    return bits


def scaffold(graph: MoleculeGraph) -> MoleculeGraph:
    """Repeatedly delete atoms of degree <= 1; trees vanish completely."""
    alive = set(range(graph.n_atoms))
    degree = {v: graph.degree(v) for v in alive}
    stack = [v for v in alive if degree[v] <= 1]
    while stack:
        v = stack.pop()
        if v not in alive:
            continue
        alive.discard(v)
        for u, _ in graph.adjacency[v]:
            if u in alive:
                degree[u] -= 1
                if degree[u] == 1:
                    stack.append(u)
    return graph.subgraph(alive)


def scaffold_hash(graph: MoleculeGraph) -> int:
    return canonical_hash(scaffold(graph))


# -- properties -------------------------------------------------------------

def _gauss(x: float, m: float, s: float) -> float:
    return math.exp(-((x - m) ** 2) / (2 * s * s))


def heteroatom_fraction(graph: MoleculeGraph) -> float:
    if graph.n_atoms == 0:
        return 0.0
    return sum(a != "C" for a in graph.atoms) / graph.n_atoms


def surrogate_property(graph: MoleculeGraph) -> float:
    """Drug-likeness stand-in in [0, 1] built from atom count, rings, heteroatoms and degree."""
    n = graph.n_atoms
    if n == 0:
        return 0.0
    mean_degree = 2.0 * len(graph.bonds) / n
    return (
        0.4 * _gauss(n, 20, 8)
        + 0.3 * _gauss(graph.n_rings(), 2, 1.5)
        + 0.2 * min(max(heteroatom_fraction(graph), 0.0), 1.0)
        + 0.1 * _gauss(mean_degree, 2.2, 0.6)
    )


def descriptors(graph: MoleculeGraph) -> np.ndarray:
    """The four conditioning properties: surrogate score, heavy atoms, rings, heteroatom fraction."""
    return np.array(
        [surrogate_property(graph), float(graph.n_atoms), float(graph.n_rings()), heteroatom_fraction(graph)]
    )
