"""A reduced SELFIES-style grammar in which every token sequence is a valid molecule.

Tokens are bracketed strings: atoms ``[C]``, ``[=O]``, ``[#N]`` (prefix is the
requested bond order to the current atom), ``[Ring1]``, ``[Branch1]`` and the
index tokens ``[0]`` .. ``[15]``. Valence is enforced by clipping bond orders
during derivation and skipping tokens that cannot attach, so :func:`decode` is
total over the alphabet.
"""

from __future__ import annotations

import re
from typing import Iterable, Sequence

from .molecule import ELEMENTS, VALENCE, MoleculeGraph, canonical_form

MAX_ATOMS = 64
MAX_INDEX = 15
_PREFIX = {1: "", 2: "=", 3: "#"}

ATOM_TOKENS = tuple(f"[{_PREFIX[o]}{el}]" for el in ELEMENTS for o in (1, 2, 3))
RING = "[Ring1]"
BRANCH = "[Branch1]"
INDEX_TOKENS = tuple(f"[{i}]" for i in range(MAX_INDEX + 1))
ALPHABET = ATOM_TOKENS + (RING, BRANCH) + INDEX_TOKENS

_ATOM = {f"[{_PREFIX[o]}{el}]": (el, o) for el in ELEMENTS for o in (1, 2, 3)}
_INDEX = {tok: i for i, tok in enumerate(INDEX_TOKENS)}
_TOKEN_RE = re.compile(r"\[[^\[\]]*\]")


class EncodingError(ValueError):
    """The graph cannot be written in this dialect (too large, or index limits exceeded)."""


def token_kind(token: str) -> str:
    if token in _ATOM:
        return "atom"
    if token == RING:
        return "ring"
    if token == BRANCH:
        return "branch"
    if token in _INDEX:
        return "index"
    raise ValueError(f"unknown token {token!r}")


def parse_tokens(text: str) -> list[str]:
    """Split ``"[C][=O][Ring1][0]"`` into tokens; anything else is rejected."""
    tokens = _TOKEN_RE.findall(text)
    if "".join(tokens) != text:
        raise ValueError(f"malformed token text: {text!r}")
    for tok in tokens:
        token_kind(tok)
    return tokens


def format_tokens(tokens: Iterable[str]) -> str:
    return "".join(tokens)


def decode(tokens: Sequence[str]) -> MoleculeGraph:
    tokens = list(tokens)
    for tok in tokens:
        token_kind(tok)
    atoms: list[str] = []
    remaining: list[int] = []
    bonds: dict[tuple[int, int], int] = {}

    def add_bond(i: int, j: int, order: int) -> None:
        bonds[(min(i, j), max(i, j))] = order
        remaining[i] -= order
        remaining[j] -= order

    def derive(start: int, end: int, current: int | None) -> None:
        i = start
        while i < end:
            tok = tokens[i]
            if tok in _ATOM:
                element, requested = _ATOM[tok]
                if current is None:
                    atoms.append(element)
                    remaining.append(VALENCE[element])
                    current = 0
                elif remaining[current] > 0:
                    order = min(requested, remaining[current], VALENCE[element])
                    atoms.append(element)
                    remaining.append(VALENCE[element])
                    new = len(atoms) - 1
                    add_bond(current, new, order)
                    current = new
                i += 1
            elif tok == BRANCH or tok == RING:
                has_index = i + 1 < end and tokens[i + 1] in _INDEX
                if not has_index or current is None:
                    i += 1
                    continue
                n = _INDEX[tokens[i + 1]]
                if tok == BRANCH:
                    body_end = min(i + 2 + n + 1, end)
                    derive(i + 2, body_end, current)
                    i = body_end
                else:
                    target = current - (n + 1)
                    if (
                        target >= 0
                        and (target, current) not in bonds
                        and remaining[current] > 0
                        and remaining[target] > 0
                    ):
                        add_bond(target, current, 1)
                    i += 2
            else:
                i += 1

    derive(0, len(tokens), None)
    return MoleculeGraph(tuple(atoms), tuple((i, j, o) for (i, j), o in bonds.items()))


def decode_text(text: str) -> MoleculeGraph:
    return decode(parse_tokens(text))


# -- encoding ---------------------------------------------------------------

def _spanning_tree(graph: MoleculeGraph) -> tuple[set[tuple[int, int]], list[tuple[int, int]]]:
    """Maximum-order spanning tree (Kruskal); ring closures are the leftover edges."""
    parent = list(range(graph.n_atoms))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree, closures = set(), []
    for i, j, order in sorted(graph.bonds, key=lambda b: (-b[2], b[0], b[1])):
        ri, rj = find(i), find(j)
        if ri == rj:
            if order != 1:
                raise EncodingError("ring-closure bond of order > 1 is not expressible")
            closures.append((i, j))
        else:
            parent[ri] = rj
            tree.add((i, j))
    return tree, closures


def _emit(graph: MoleculeGraph, root: int, tree: set, closures: list) -> list[str] | None:
    n = graph.n_atoms
    children: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    ring_partners: list[list[int]] = [[] for _ in range(n)]
    for i, j in closures:
        ring_partners[i].append(j)
        ring_partners[j].append(i)
    seen = {root}
    stack = [root]
    while stack:
        v = stack.pop()
        for u, o in graph.adjacency[v]:
            if u not in seen and (min(u, v), max(u, v)) in tree:
                seen.add(u)
                children[v].append((u, o))
                stack.append(u)

    size = [1] * n

    def subtree_size(v: int) -> int:
        size[v] = 1 + sum(subtree_size(c) for c, _ in children[v])
        return size[v]

    subtree_size(root)
    position: dict[int, int] = {}

    def emit(v: int, bond_order: int) -> list[str] | None:
        toks = [f"[{_PREFIX[bond_order]}{graph.atoms[v]}]"]
        position[v] = len(position)
        for u in sorted(ring_partners[v]):
            if u in position:
                offset = position[v] - position[u] - 1
                if offset > MAX_INDEX:
                    return None
                toks += [RING, INDEX_TOKENS[offset]]
        kids = sorted(children[v], key=lambda c: (-size[c[0]], c[0]))
        main, side = (kids[0], sorted(kids[1:])) if kids else (None, [])
        for c, o in side:
            body = emit(c, o)
            if body is None or len(body) > MAX_INDEX + 1:
                return None
            toks += [BRANCH, INDEX_TOKENS[len(body) - 1]] + body
        if main is not None:
            rest = emit(*main)
            if rest is None:
                return None
            toks += rest
        return toks

    return emit(root, 1)


def encode(graph: MoleculeGraph) -> list[str]:
    """Canonical token sequence whose decoding is isomorphic to ``graph``.

    The graph is first put in canonical atom order, so isomorphic inputs give
    identical tokens. Roots are tried chain-ends first until every branch body
    and ring offset fits the 16-value index range.
    """
    if graph.n_atoms == 0:
        return []
    if graph.n_atoms > MAX_ATOMS:
        raise EncodingError(f"graph has {graph.n_atoms} atoms; limit is {MAX_ATOMS}")
    if not graph.is_valid():
        raise EncodingError("graph violates valence or is disconnected")
    g = canonical_form(graph)
    tree, closures = _spanning_tree(g)
    roots = sorted(range(g.n_atoms), key=lambda v: (g.degree(v) != 1, v))
    for root in roots:
        toks = _emit(g, root, tree, closures)
        if toks is not None:
            return toks
    raise EncodingError("no traversal fits the branch/ring index limits")


def encode_text(graph: MoleculeGraph) -> str:
    return format_tokens(encode(graph))
