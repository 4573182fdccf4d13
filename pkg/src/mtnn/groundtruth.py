"""Labeled interleaving distance between merge trees and distance tables.

Labeling: every tree gets its nodes sorted by the canonical key
``(f, min f in subtree, subtree size, id)``.  For a pair of trees with
``a = max(n1, n2)`` labels, label ``i`` goes to the ``i``-th node of that
order and surplus labels (``i >= n``) go to the root.  The labeling of a tree
depends on the other tree only through ``a``, so the distance is symmetric.

Distance CSV format: first row holds the tree ids, then one row per tree
with the full raw matrix (``repr`` floats), then a line ``# norm <c>``.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .mergetree import MergeTree


@dataclass
class Labeling:
    label_count: int
    assignment: np.ndarray  # label index (0-based) -> node position


def canonical_order(t: MergeTree) -> list[int]:
    """Node positions sorted by the canonical labeling key."""
    if t.n == 0:
        raise ConfigError("empty tree")
    sub_min = t.f.copy()
    sub_size = np.ones(t.n, dtype=np.int64)
    for v in sorted(range(t.n), key=t.key):  # children precede parents
        p = t.parent[v]
        if p >= 0:
            sub_min[p] = min(sub_min[p], sub_min[v])
            sub_size[p] += sub_size[v]
    return sorted(
        range(t.n),
        key=lambda i: (t.f[i], sub_min[i], sub_size[i], t.ids[i]),
    )


def _labeling(t: MergeTree, a: int) -> Labeling:
    order = canonical_order(t)
    order += [t.root] * (a - t.n)
    return Labeling(a, np.array(order, dtype=np.int64))


def label_pair(t1: MergeTree, t2: MergeTree) -> tuple[Labeling, Labeling]:
    if t1.n == 0 or t2.n == 0:
        raise ConfigError("cannot label an empty tree")
    a = max(t1.n, t2.n)
    return _labeling(t1, a), _labeling(t2, a)


def lca_values(t: MergeTree) -> np.ndarray:
    """(n, n) matrix of f(LCA(u, v)) over all node positions."""
    parent = t.parent.tolist()
    ancestors = []
    for v in range(t.n):
        chain = [v]
        while parent[chain[-1]] >= 0:
            chain.append(parent[chain[-1]])
        ancestors.append(chain)
    out = np.empty((t.n, t.n))
    for u in range(t.n):
        up = set(ancestors[u])
        for v in range(u, t.n):
            w = next(x for x in ancestors[v] if x in up)
            out[u, v] = out[v, u] = t.f[w]
    return out


def lca_matrix(t: MergeTree, labeling: Labeling) -> np.ndarray:
    pi = np.asarray(labeling.assignment)
    if pi.size != labeling.label_count:
        raise ConfigError("labeling size does not match label count")
    if pi.size and (pi.min() < 0 or pi.max() >= t.n):
        raise ConfigError("label maps outside the tree")
    return lca_values(t)[np.ix_(pi, pi)]


def interleaving_distance(t1: MergeTree, t2: MergeTree) -> float:
    l1, l2 = label_pair(t1, t2)
    return float(np.max(np.abs(lca_matrix(t1, l1) - lca_matrix(t2, l2))))


# --------------------------------------------------------------------------
# persistence-aware edit costs for (birth, death) pairs


def _check_pair(p):
    b, d = p
    if d < b:
        raise ConfigError(f"death {d} below birth {b}")
    return float(b), float(d)


def relabel_cost(m, s) -> float:
    bm, dm = _check_pair(m)
    bs, ds = _check_pair(s)
    return min(max(abs(bm - bs), abs(dm - ds)), (abs(dm - bm) + abs(ds - bs)) / 2)


def delete_cost(m) -> float:
    b, d = _check_pair(m)
    return abs(d - b) / 2


def insert_cost(s) -> float:
    b, d = _check_pair(s)
    return abs(d - b) / 2


def edit_costs(m, s) -> float:
    """Relabel cost between two features given as (birth, death)."""
    return relabel_cost(m, s)


# --------------------------------------------------------------------------
# tables


@dataclass
class DistanceTable:
    ids: list
    raw: np.ndarray
    norm: float

    @property
    def normalized(self) -> np.ndarray:
        return self.raw / self.norm

    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.ids)}

    def __eq__(self, other):
        if not isinstance(other, DistanceTable):
            return NotImplemented
        return (
            list(self.ids) == list(other.ids)
            and self.raw.tobytes() == other.raw.tobytes()
            and self.norm == other.norm
        )


def norm_constant(raw: np.ndarray) -> float:
    n = raw.shape[0]
    off = raw[~np.eye(n, dtype=bool)]
    m = float(off.max()) if off.size else 0.0
    return m if m > 0 else 1.0


def _table_rows(args):
    trees, rows = args
    lcas = [lca_values(t) for t in trees]
    orders = [canonical_order(t) for t in trees]
    out = []
    for i in rows:
        row = np.zeros(len(trees))
        for j in range(i + 1, len(trees)):
            a = max(trees[i].n, trees[j].n)
            pi = orders[i] + [trees[i].root] * (a - trees[i].n)
            pj = orders[j] + [trees[j].root] * (a - trees[j].n)
            row[j] = np.max(np.abs(lcas[i][np.ix_(pi, pi)] - lcas[j][np.ix_(pj, pj)]))
        out.append((i, row))
    return out


def pairwise_table(trees: Sequence[MergeTree], workers: int = 1) -> DistanceTable:
    """All-pairs interleaving distances; output does not depend on ``workers``."""
    trees = list(trees)
    n = len(trees)
    if n < 2:
        raise ConfigError("pairwise_table needs at least 2 trees")
    chunks = [(trees, list(range(k, n, max(workers, 1)))) for k in range(max(workers, 1))]
    raw = np.zeros((n, n))
    if workers <= 1:
        results = [_table_rows(chunks[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_table_rows, chunks))
    for res in results:
        for i, row in res:
            raw[i, i + 1 :] = row[i + 1 :]
    raw = np.triu(raw, 1)
    raw = raw + raw.T
    return DistanceTable([t.source_id for t in trees], raw, norm_constant(raw))


def save_table(table: DistanceTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.ids)
        for row in table.raw.tolist():
            w.writerow([repr(float(x)) for x in row])
        fh.write(f"# norm {float(table.norm)!r}\n")


def load_table(path, ids: Sequence[str] | None = None) -> DistanceTable:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    norm = None
    body = []
    for k, line in enumerate(lines, start=1):
        if line.startswith("# norm"):
            try:
                norm = float(line.split()[2])
            except (IndexError, ValueError):
                raise ParseError(f"bad norm line {line!r}", path, k) from None
        elif line.strip():
            body.append((k, line))
    if not body:
        raise ParseError("empty distance table", path, 1)
    header = next(csv.reader([body[0][1]]))
    n = len(header)
    if n < 1 or header == [""]:
        raise ParseError("empty distance table", path, body[0][0])
    if len(body) - 1 != n:
        raise ParseError(f"expected {n} matrix rows, got {len(body) - 1}", path, body[-1][0])
    raw = np.empty((n, n))
    for r, (k, line) in enumerate(body[1:]):
        cells = next(csv.reader([line]))
        if len(cells) != n:
            raise ParseError(f"expected {n} columns, got {len(cells)}", path, k)
        try:
            raw[r] = [float(c) for c in cells]
        except ValueError:
            raise ParseError(f"bad number in row {r}", path, k) from None
    if norm is None:
        raise ParseError("missing '# norm' line", path, len(lines))
    if ids is not None and list(ids) != header:
        raise ParseError("table ids do not match the tree list", path, body[0][0])
    return DistanceTable(header, raw, norm)
