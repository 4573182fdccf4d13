"""Join trees of scalar fields, persistence pairs and simplification.

All comparisons between vertices use the total order ``(f, vertex id)``,
which makes plateaus and equal minima deterministic.  Node ids are flat
grid indices of the critical vertex each node stands for.

Tree file format::

    # mtnn trees
    tree <source_id> <n>
    node <id> <kind> <f>          (n lines, kind in minimum|saddle|root)
    edge <child id> <parent id>   (n - 1 lines)
    pair <birth id> <death id>    (one line per leaf)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .scalarfield import ScalarField, neighbors, normalize_field

KINDS = ("minimum", "saddle", "root")
FILE_HEADER = "# mtnn trees"


class PersistencePair(NamedTuple):
    birth: int  # node position of the minimum
    death: int  # node position of the merging saddle (or root)
    persistence: float


class UnionFind:
    """Array-backed disjoint sets with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra


@dataclass(eq=False)
class MergeTree:
    """Critical-node join tree.

    Nodes are addressed by position ``0..n-1``; ``ids`` holds the grid vertex
    each node came from.  ``parent[i]`` is the position of the parent node or
    -1 for the root.
    """

    ids: np.ndarray
    f: np.ndarray
    kinds: list
    parent: np.ndarray
    pairs: list = field(default_factory=list)
    source_id: str = "tree"

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.f = np.asarray(self.f, dtype=np.float64)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.kinds = list(self.kinds)
        self._children = None

    @property
    def n(self) -> int:
        return int(self.ids.size)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent < 0)[0])

    @property
    def children(self) -> list[list[int]]:
        if self._children is None:
            ch: list[list[int]] = [[] for _ in range(self.n)]
            for c, p in enumerate(self.parent.tolist()):
                if p >= 0:
                    ch[p].append(c)
            self._children = ch
        return self._children

    def edges(self) -> list[tuple[int, int]]:
        """(child, parent) position pairs."""
        return [(c, int(p)) for c, p in enumerate(self.parent.tolist()) if p >= 0]

    def leaves(self) -> list[int]:
        return [i for i, ch in enumerate(self.children) if not ch]

    def key(self, i: int) -> tuple[float, int]:
        return (float(self.f[i]), int(self.ids[i]))

    def position(self, vertex_id: int) -> int:
        return int(np.flatnonzero(self.ids == vertex_id)[0])

    def permuted(self, perm: Sequence[int]) -> "MergeTree":
        """Same tree with node ``perm[k]`` moved to position ``k``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        parent = np.where(self.parent[perm] >= 0, inv[self.parent[perm]], -1)
        pairs = [PersistencePair(int(inv[b]), int(inv[d]), p) for b, d, p in self.pairs]
        return MergeTree(
            self.ids[perm],
            self.f[perm],
            [self.kinds[i] for i in perm],
            parent,
            pairs,
            self.source_id,
        )

    def __eq__(self, other):
        if not isinstance(other, MergeTree):
            return NotImplemented
        return (
            self.source_id == other.source_id
            and np.array_equal(self.ids, other.ids)
            and self.f.tobytes() == other.f.tobytes()
            and self.kinds == other.kinds
            and np.array_equal(self.parent, other.parent)
            and [tuple(p[:2]) for p in self.pairs] == [tuple(p[:2]) for p in other.pairs]
        )

    def __repr__(self):
        return f"MergeTree({self.source_id!r}, n={self.n}, pairs={len(self.pairs)})"


def _sorted_tree(vertex_f: dict, kind: dict, parent_of: dict, source_id: str) -> MergeTree:
    ids = sorted(kind)
    pos = {v: i for i, v in enumerate(ids)}
    parent = [pos[parent_of[v]] if v in parent_of else -1 for v in ids]
    t = MergeTree(ids, [vertex_f[v] for v in ids], [kind[v] for v in ids], parent, [], source_id)
    t.pairs = persistence_pairs(t)
    return t


def build_join_tree(field: ScalarField) -> MergeTree:
    """Critical join tree of the normalized field, with persistence pairs."""
    values = normalize_field(field).values
    n = values.size
    if values.max() == values.min():
        t = MergeTree([n - 1], [values[n - 1]], ["root"], [-1], [], field.id)
        t.pairs = persistence_pairs(t)
        return t

    order = np.lexsort((np.arange(n), values)).tolist()
    rank = [0] * n
    for r, v in enumerate(order):
        rank[v] = r
    adj = neighbors(field.dims)
    uf = UnionFind(n)
    head: dict[int, int] = {}  # component representative -> topmost node vertex
    kind: dict[int, str] = {}
    parent_of: dict[int, int] = {}

    for v in order:
        rv = rank[v]
        comps = []
        for u in adj[v]:
            if rank[u] < rv:
                c = uf.find(u)
                if c not in comps:
                    comps.append(c)
        if not comps:
            kind[v] = "minimum"
            head[v] = v
        elif len(comps) == 1:
            h = head.pop(comps[0])
            head[uf.union(comps[0], v)] = h
        else:
            kind[v] = "saddle"
            for c in comps:
                parent_of[head.pop(c)] = v
            r = v
            for c in comps:
                r = uf.union(r, c)
            head[r] = v

    last = order[-1]
    if last not in kind:
        parent_of[head[uf.find(last)]] = last
    kind[last] = "root"
    return _sorted_tree({v: float(values[v]) for v in kind}, kind, parent_of, field.id)


def persistence_pairs(t: MergeTree) -> list[PersistencePair]:
    """Elder-rule pairing; the global minimum pairs with the root."""
    order = sorted(range(t.n), key=t.key)
    survivor = [0] * t.n
    pairs = []
    for v in order:
        ch = t.children[v]
        if not ch:
            survivor[v] = v
        else:
            mins = sorted((survivor[c] for c in ch), key=t.key)
            survivor[v] = mins[0]
            for m in mins[1:]:
                pairs.append(PersistencePair(m, v, float(t.f[v] - t.f[m])))
    r = t.root
    g = survivor[r]
    pairs.append(PersistencePair(g, r, float(t.f[r] - t.f[g])))
    pairs.sort(key=lambda p: t.key(p.birth))
    return pairs


def global_pair(t: MergeTree) -> PersistencePair:
    """The pair born at the global minimum."""
    return min(t.pairs, key=lambda p: t.key(p.birth))


def simplify(t: MergeTree, tau: float) -> MergeTree:
    """Remove non-global pairs with persistence below ``tau``, lowest first."""
    if tau < 0:
        raise ConfigError(f"tau must be non-negative, got {tau}")
    while True:
        if not t.pairs:
            t.pairs = persistence_pairs(t)
        g = global_pair(t)
        cands = [p for p in t.pairs if p.persistence < tau and p.birth != g.birth]
        if not cands:
            return t
        victim = min(cands, key=lambda p: (p.persistence, t.key(p.birth)))
        t = _remove_leaf(t, victim.birth)


def _remove_leaf(t: MergeTree, leaf: int) -> MergeTree:
    parent = t.parent.tolist()
    alive = [True] * t.n
    alive[leaf] = False
    p = parent[leaf]
    remaining = [c for c in t.children[p] if c != leaf]
    if parent[p] >= 0 and len(remaining) == 1:
        alive[p] = False
        parent[remaining[0]] = parent[p]
    keep = [i for i in range(t.n) if alive[i]]
    pos = {old: new for new, old in enumerate(keep)}
    new_parent = [pos[parent[i]] if parent[i] >= 0 else -1 for i in keep]
    out = MergeTree(
        t.ids[keep], t.f[keep], [t.kinds[i] for i in keep], new_parent, [], t.source_id
    )
    out.pairs = persistence_pairs(out)
    return out


def node_features(t: MergeTree) -> np.ndarray:
    """(n, 1) column of normalized node values."""
    return t.f.reshape(-1, 1).copy()


def persistence_matrix(t: MergeTree) -> np.ndarray:
    """Symmetric |f(u) - f(v)| over tree edges plus persistence-pair entries."""
    E = np.zeros((t.n, t.n))
    for c, p in t.edges():
        E[c, p] = E[p, c] = abs(t.f[c] - t.f[p])
    for b, d, _ in t.pairs:
        if b != d and E[b, d] == 0.0 and t.parent[b] != d and t.parent[d] != b:
            E[b, d] = E[d, b] = abs(t.f[d] - t.f[b])
    return E


def trees_from_fields(fields: Iterable[ScalarField], tau: float) -> list[MergeTree]:
    return [simplify(build_join_tree(f), tau) for f in fields]


# --------------------------------------------------------------------------
# I/O


def save_trees(trees: Iterable[MergeTree], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FILE_HEADER + "\n")
        for t in trees:
            ids = t.ids.tolist()
            fh.write(f"tree {t.source_id} {t.n}\n")
            for i in range(t.n):
                fh.write(f"node {ids[i]} {t.kinds[i]} {float(t.f[i])!r}\n")
            for c, p in t.edges():
                fh.write(f"edge {ids[c]} {ids[p]}\n")
            for b, d, _ in t.pairs:
                fh.write(f"pair {ids[b]} {ids[d]}\n")


def load_trees(path) -> list[MergeTree]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != FILE_HEADER:
        raise ParseError(f"missing header {FILE_HEADER!r}", path, 1)
    trees: list[MergeTree] = []
    cur = None

    def finish(lineno):
        if cur is None:
            return
        src, n, ids, f, kinds, edges, pairs = cur
        if len(ids) != n:
            raise ParseError(f"tree {src}: expected {n} nodes, got {len(ids)}", path, lineno)
        pos = {v: i for i, v in enumerate(ids)}
        parent = [-1] * n
        try:
            for c, p in edges:
                parent[pos[c]] = pos[p]
            pp = [(pos[b], pos[d]) for b, d in pairs]
        except KeyError as e:
            raise ParseError(f"tree {src}: unknown node id {e}", path, lineno) from None
        if sum(1 for p in parent if p < 0) != 1:
            raise ParseError(f"tree {src}: expected exactly one root", path, lineno)
        fa = np.array(f)
        pp = [PersistencePair(b, d, float(fa[d] - fa[b])) for b, d in pp]
        trees.append(MergeTree(ids, fa, kinds, parent, pp, src))

    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "tree" and len(tok) == 3:
                finish(lineno)
                cur = (tok[1], int(tok[2]), [], [], [], [], [])
            elif cur is None:
                raise ParseError(f"record outside a tree: {line!r}", path, lineno)
            elif tok[0] == "node" and len(tok) == 4:
                if tok[2] not in KINDS:
                    raise ParseError(f"unknown node kind {tok[2]!r}", path, lineno)
                cur[2].append(int(tok[1]))
                cur[4].append(tok[2])
                cur[3].append(float(tok[3]))
            elif tok[0] == "edge" and len(tok) == 3:
                cur[5].append((int(tok[1]), int(tok[2])))
            elif tok[0] == "pair" and len(tok) == 3:
                cur[6].append((int(tok[1]), int(tok[2])))
            else:
                raise ParseError(f"unrecognized record {line!r}", path, lineno)
        except ValueError as e:
            if isinstance(e, ParseError):
                raise
            raise ParseError(f"bad number in {line!r}", path, lineno) from None
    finish(len(lines))
    return trees
