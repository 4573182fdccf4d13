"""Independent reference computations used by the test-suite."""

import networkx as nx
import numpy as np

from mtnn.scalarfield import grid_edges, normalize_field


def brute_force_join_tree(field):
    """Join tree by recomputing sub-level components after every sweep step.

    Returns ``(nodes, edges, pairs)`` as sets keyed by vertex id:
    nodes ``{(id, kind)}``, edges ``{(child, parent)}``, pairs ``{(birth, death)}``.
    """
    values = normalize_field(field).values
    n = values.size
    if values.max() == values.min():
        return {(n - 1, "root")}, set(), {(n - 1, n - 1)}
    order = sorted(range(n), key=lambda v: (values[v], v))
    key = {v: (values[v], v) for v in range(n)}
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(map(tuple, grid_edges(field.dims).tolist()))

    head = {}  # frozenset component -> topmost critical vertex
    kinds, edges, pairs = {}, set(), set()
    prev = []
    for r, v in enumerate(order):
        active = order[: r + 1]
        comps = [frozenset(c) for c in nx.connected_components(g.subgraph(active))]
        mine = next(c for c in comps if v in c)
        merged = [c for c in prev if c <= mine]
        if not merged:
            kinds[v] = "minimum"
            head[mine] = v
        elif len(merged) == 1:
            head[mine] = head[merged[0]]
        else:
            kinds[v] = "saddle"
            for c in merged:
                edges.add((head[c], v))
            elders = sorted(merged, key=lambda c: min(key[u] for u in c))
            for c in elders[1:]:
                pairs.add((min(c, key=key.__getitem__), v))
            head[mine] = v
        prev = comps
    last = order[-1]
    if last not in kinds:
        (whole,) = prev
        edges.add((head[whole], last))
    kinds[last] = "root"
    gmin = order[0]
    pairs.add((gmin, last))
    return set(kinds.items()), edges, pairs


def tree_as_sets(t):
    ids = t.ids.tolist()
    nodes = {(ids[i], t.kinds[i]) for i in range(t.n)}
    edges = {(ids[c], ids[p]) for c, p in t.edges()}
    pairs = {(ids[b], ids[d]) for b, d, _ in t.pairs}
    return nodes, edges, pairs


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f(x)
        flat[i] = o - h
        fm = f(x)
        flat[i] = o
        gf[i] = (fp - fm) / (2 * h)
    return g


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_score(t1, t2, params, config):
    """Per-pair forward pass written out formula by formula with loops.

    Independent of the batched implementation: no sparse pooling, no shared
    batch graph, explicit neighbor sums and an explicit histogram loop.
    """
    P = {k: np.asarray(v.data) for k, v in params.items()}
    if t2.source_id < t1.source_id:  # pair canonicalization
        t1, t2 = t2, t1

    def embed(t):
        n = t.n
        nbrs = [[] for _ in range(n)]
        for c, p in t.edges():
            nbrs[c].append(p)
            nbrs[p].append(c)
        H = t.f.reshape(-1, 1).astype(float)
        for l in range(len(config.layer_dims)):
            new = []
            for v in range(n):
                if config.encoder == "gin":
                    agg = (1 + P[f"gin{l}.eps"][0]) * H[v] + sum((H[u] for u in nbrs[v]), np.zeros(H.shape[1]))
                    hid = np.maximum(agg @ P[f"gin{l}.W1"] + P[f"gin{l}.b1"], 0)
                    out = hid @ P[f"gin{l}.W2"] + P[f"gin{l}.b2"]
                    if l < len(config.layer_dims) - 1:
                        out = np.maximum(out, 0)
                else:
                    dv = len(nbrs[v]) + 1
                    agg = H[v] / dv
                    for u in nbrs[v]:
                        agg = agg + H[u] / np.sqrt(dv * (len(nbrs[u]) + 1))
                    out = np.maximum(agg @ P[f"gcn{l}.W"] + P[f"gcn{l}.b"], 0)
                new.append(out)
            H = np.array(new)
        # context
        from mtnn.mergetree import persistence_matrix

        E = persistence_matrix(t)
        norm = E.sum()
        if config.attention == "topological" and norm > 0:
            w = np.array([E[v].sum() / norm for v in range(n)])
        else:
            w = np.ones(n)
        pooled = sum(w[v] * H[v] for v in range(n)) / n
        c = np.tanh(pooled @ P["att.Wc"])
        Hstar = sum(_sig(H[v] @ c) * H[v] for v in range(n))
        return H, Hstar

    H1, s1 = embed(t1)
    H2, s2 = embed(t2)
    K = config.ntn_k
    d = np.array(
        [
            s1 @ P["ntn.W"][k] @ s2 + P["ntn.V"][k] @ np.concatenate([s1, s2]) + P["ntn.b"][k]
            for k in range(K)
        ]
    )
    d = np.maximum(d, 0) if config.ntn_activation == "relu" else d
    N = max(len(H1), len(H2))
    A = np.zeros((N, H1.shape[1]))
    B = np.zeros((N, H2.shape[1]))
    A[: len(H1)] = H1
    B[: len(H2)] = H2
    hist = np.zeros(config.bins)
    for i in range(N):
        for j in range(N):
            s = _sig(A[i] @ B[j])
            hist[min(int(s * config.bins), config.bins - 1)] += 1
    hist /= N * N
    h = np.concatenate([d, hist])
    L = len(config.mlp_dims) - 1
    for l in range(L):
        h = h @ P[f"mlp{l}.W"] + P[f"mlp{l}.b"]
        if l < L - 1:
            h = np.maximum(h, 0)
    return float(_sig(h[0]))
