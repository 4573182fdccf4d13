"""Merge tree neural network: encoders, attention pooling, NTN and scoring.

A batch of trees is processed as one disconnected graph.  Per-tree sums and
means become products with constant sparse pooling matrices, so every layer
runs once per batch rather than once per tree.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .mergetree import MergeTree, node_features, persistence_matrix

ENCODERS = ("gin", "gcn")
ATTENTIONS = ("plain", "topological")
ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid, "tanh": ad.tanh}


@dataclass
class ModelConfig:
    encoder: str = "gin"
    attention: str = "topological"
    layer_dims: tuple = (64, 32, 16)
    ntn_k: int = 16
    bins: int = 16
    mlp_dims: tuple = (32, 16, 8, 1)
    ntn_activation: str = "relu"
    in_dim: int = 1

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.mlp_dims = tuple(int(d) for d in self.mlp_dims)
        self.validate()

    @property
    def embed_dim(self) -> int:
        return self.layer_dims[-1]

    def validate(self):
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.attention not in ATTENTIONS:
            raise ConfigError(f"attention must be one of {ATTENTIONS}, got {self.attention!r}")
        if self.ntn_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown NTN activation {self.ntn_activation!r}")
        if len(self.layer_dims) != 3 or min(self.layer_dims) <= 0:
            raise ConfigError(f"layer_dims must be 3 positive sizes, got {self.layer_dims}")
        if self.ntn_k <= 0 or self.bins <= 0:
            raise ConfigError("ntn_k and bins must be positive")
        if len(self.mlp_dims) < 2 or self.mlp_dims[0] != self.ntn_k + self.bins:
            raise ConfigError(
                f"mlp_dims must start with ntn_k + bins = {self.ntn_k + self.bins}"
            )
        if self.mlp_dims[-1] != 1:
            raise ConfigError("mlp head must end with a single output")

    def to_dict(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for k in ("encoder", "attention", "ntn_activation"):
            if k in d:
                kw[k] = d[k]
        for k in ("ntn_k", "bins", "in_dim"):
            if k in d:
                kw[k] = int(d[k])
        for k in ("layer_dims", "mlp_dims"):
            if k in d:
                v = d[k]
                kw[k] = tuple(int(x) for x in (v.split(",") if isinstance(v, str) else v))
        return cls(**kw)


# --------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _bias(rng, fan_in, size):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, biases uniform in +-1/sqrt(fan_in), GIN epsilons at 0.

    With one nonnegative input feature and zero biases the ReLU encoder would
    start positively homogeneous, every node embedding a multiple of a single
    direction; random biases avoid that starting point.
    """
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    d_in = config.in_dim
    for l, d_out in enumerate(config.layer_dims):
        if config.encoder == "gcn":
            p[f"gcn{l}.W"] = _glorot(rng, d_in, d_out, (d_in, d_out))
            p[f"gcn{l}.b"] = _bias(rng, d_in, d_out)
        else:
            p[f"gin{l}.W1"] = _glorot(rng, d_in, d_out, (d_in, d_out))
            p[f"gin{l}.b1"] = _bias(rng, d_in, d_out)
            p[f"gin{l}.W2"] = _glorot(rng, d_out, d_out, (d_out, d_out))
            p[f"gin{l}.b2"] = _bias(rng, d_out, d_out)
            p[f"gin{l}.eps"] = np.zeros(1)
        d_in = d_out
    m, K = config.embed_dim, config.ntn_k
    p["att.Wc"] = _glorot(rng, m, m, (m, m))
    p["ntn.W"] = _glorot(rng, m, m, (K, m, m))
    p["ntn.V"] = _glorot(rng, 2 * m, K, (K, 2 * m))
    p["ntn.b"] = _bias(rng, 2 * m, K)
    dims = config.mlp_dims
    for l in range(len(dims) - 1):
        p[f"mlp{l}.W"] = _glorot(rng, dims[l], dims[l + 1], (dims[l], dims[l + 1]))
        p[f"mlp{l}.b"] = _bias(rng, dims[l], dims[l + 1])
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def detached(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Copies of the parameters that record no graph (for inference)."""
    return {k: Tensor(v.data) for k, v in params.items()}


# --------------------------------------------------------------------------
# tree preprocessing and batching


@dataclass
class TreeData:
    """Static model inputs derived from one merge tree."""

    n: int
    x: np.ndarray  # (n, 1) node features
    edges: np.ndarray  # (E, 2) undirected tree edges by position
    topo_weight: np.ndarray  # (n,) incident persistence mass / Norm
    topo_fallback: bool  # Norm == 0, plain context is used instead

    @classmethod
    def from_tree(cls, t: MergeTree) -> "TreeData":
        E = persistence_matrix(t)
        total = E.sum()
        if total > 0:
            w = E.sum(axis=1) / total
            fallback = False
        else:
            w = np.ones(t.n)
            fallback = True
        edges = np.array(t.edges(), dtype=np.int64).reshape(-1, 2)
        return cls(t.n, node_features(t), edges, w, fallback)


def topological_weights(t: MergeTree) -> np.ndarray:
    return TreeData.from_tree(t).topo_weight


@dataclass
class GraphBatch:
    x: np.ndarray
    adj: sp.csr_matrix  # symmetric tree adjacency, no self loops
    sizes: np.ndarray
    graph_of: np.ndarray  # node -> graph index
    pool_sum: sp.csr_matrix  # (G, N) per-graph sum
    pool_plain: sp.csr_matrix  # (G, N) per-graph mean
    pool_topo: sp.csr_matrix  # (G, N) persistence-weighted mean
    _gcn: sp.csr_matrix | None = None

    @property
    def gcn_adj(self) -> sp.csr_matrix:
        """D^-1/2 (A + I) D^-1/2 with degrees counting the self loop."""
        if self._gcn is None:
            n = self.adj.shape[0]
            a = self.adj + sp.identity(n, format="csr")
            d = np.asarray(a.sum(axis=1)).ravel()
            inv = sp.diags(1.0 / np.sqrt(d))
            self._gcn = (inv @ a @ inv).tocsr()
        return self._gcn


def batch_trees(items: Sequence[TreeData]) -> GraphBatch:
    sizes = np.array([t.n for t in items], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    N, G = int(offsets[-1]), len(items)
    x = np.concatenate([t.x for t in items], axis=0)
    rows = [t.edges[:, 0] + o for t, o in zip(items, offsets)]
    cols = [t.edges[:, 1] + o for t, o in zip(items, offsets)]
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    src, dst = np.concatenate([r, c]), np.concatenate([c, r])
    order = np.lexsort((dst, src))
    indptr = np.zeros(N + 1, dtype=np.int32)
    np.cumsum(np.bincount(src, minlength=N), out=indptr[1:])
    adj = sp.csr_matrix((np.ones(src.size), dst[order].astype(np.int32), indptr), shape=(N, N))
    graph_of = np.repeat(np.arange(G), sizes)
    inv_size = 1.0 / sizes[graph_of]
    # row g of a pooling matrix covers the contiguous nodes of graph g
    cols_n = np.arange(N, dtype=np.int32)
    rows_g = offsets.astype(np.int32)

    def pooling(values):
        return sp.csr_matrix((values, cols_n, rows_g), shape=(G, N))

    pool_sum = pooling(np.ones(N))
    pool_plain = pooling(inv_size)
    w = np.concatenate([t.topo_weight for t in items])
    pool_topo = pooling(w * inv_size)
    return GraphBatch(x, adj, sizes, graph_of, pool_sum, pool_plain, pool_topo)


# --------------------------------------------------------------------------
# layers


def gcn_layer(H, A_norm, W, b) -> Tensor:
    """relu(sum over N(v) and v of h_u W / sqrt(d_v d_u) + b)."""
    return ad.relu(ad.spmm(A_norm, ad.matmul(H, W)) + b)


def gin_layer(H, adj, eps, W1, b1, W2, b2) -> Tensor:
    """MLP((1 + eps) h_v + sum over N(v) of h_u) with MLP = Linear, ReLU, Linear."""
    agg = H * (eps + 1.0) + ad.spmm(adj, H)
    return ad.matmul(ad.relu(ad.matmul(agg, W1) + b1), W2) + b2


def encode(params, config: ModelConfig, batch: GraphBatch) -> Tensor:
    H = Tensor(batch.x)
    last = len(config.layer_dims) - 1
    for l in range(len(config.layer_dims)):
        if config.encoder == "gcn":
            H = gcn_layer(H, batch.gcn_adj, params[f"gcn{l}.W"], params[f"gcn{l}.b"])
        else:
            H = gin_layer(
                H,
                batch.adj,
                params[f"gin{l}.eps"],
                params[f"gin{l}.W1"],
                params[f"gin{l}.b1"],
                params[f"gin{l}.W2"],
                params[f"gin{l}.b2"],
            )
            if l < last:
                H = ad.relu(H)
    return H


def global_context_plain(H, W_c, pool=None) -> Tensor:
    """tanh(mean_n h_n W_c); ``pool`` maps nodes to graphs (default: one graph)."""
    if pool is None:
        return ad.tanh(ad.matmul(ad.mean(H, axis=0, keepdims=True), W_c))
    return ad.tanh(ad.matmul(ad.spmm(pool, H), W_c))


def topo_context(H, W_c, E_hat: np.ndarray) -> Tensor:
    """Persistence-weighted global context of a single tree (1, m)."""
    n = H.shape[0]
    norm = E_hat.sum()
    if norm == 0:
        return global_context_plain(H, W_c)
    w = E_hat.sum(axis=1) / norm
    pool = (w / n).reshape(1, n)
    return ad.tanh(ad.matmul(ad.spmm(pool, H), W_c))


def attention_pool(H, c, graph_of=None, pool_sum=None):
    """Returns (reweighted node embeddings, tree embeddings, node attention).

    With ``graph_of``/``pool_sum`` omitted, all rows of ``H`` form one tree.
    """
    if graph_of is None:
        graph_of = np.zeros(H.shape[0], dtype=np.int64)
    c_nodes = ad.take(c, graph_of)
    att = ad.sigmoid(ad.sum(H * c_nodes, axis=1, keepdims=True))
    Hs = H * att
    if pool_sum is None:
        Hstar = ad.sum(Hs, axis=0, keepdims=True)
    else:
        Hstar = ad.spmm(pool_sum, Hs)
    return Hs, Hstar, att


def ntn(H1, H2, W_t, V_w, b_t, activation: str = "relu") -> Tensor:
    """act(H1^T W_t[k] H2 + V_w[k] . [H1, H2] + b_t[k]) for each k; rows are pairs."""
    lin = ad.matmul(ad.concat([H1, H2], axis=1), ad.transpose(V_w))
    return ACTIVATIONS[activation](ad.bilinear(H1, W_t, H2) + lin + b_t)


def node_histogram(H1: np.ndarray, H2: np.ndarray, bins: int) -> np.ndarray:
    """Normalized histogram of sigmoid(H1 H2^T) after zero-padding to equal size.

    Bins are [k/B, (k+1)/B); the value 1.0 lands in the last bin.  Plain
    numpy: no gradient flows through this feature.
    """
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    H1 = np.asarray(getattr(H1, "data", H1))
    H2 = np.asarray(getattr(H2, "data", H2))
    N = max(H1.shape[0], H2.shape[0])
    P1 = np.zeros((N, H1.shape[1]))
    P1[: H1.shape[0]] = H1
    P2 = np.zeros((N, H2.shape[1]))
    P2[: H2.shape[0]] = H2
    D = expit(P1 @ P2.T)
    idx = np.minimum((D * bins).astype(np.int64), bins - 1)
    return np.bincount(idx.ravel(), minlength=bins) / D.size


def batch_histograms(H: np.ndarray, batch: GraphBatch, left, right, bins: int) -> np.ndarray:
    """node_histogram for many pairs of graphs of one batch, vectorized."""
    sizes = batch.sizes
    nmax = int(sizes.max())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    m = H.shape[1]
    padded = np.zeros((sizes.size, nmax, m))
    local = np.arange(H.shape[0]) - offsets[batch.graph_of]
    padded[batch.graph_of, local] = H
    D = expit(np.matmul(padded[left], padded[right].transpose(0, 2, 1)))
    idx = np.minimum((D * bins).astype(np.int64), bins - 1)
    npair = np.maximum(sizes[left], sizes[right])
    rng_ = np.arange(nmax)
    valid = (rng_[None, :, None] < npair[:, None, None]) & (rng_[None, None, :] < npair[:, None, None])
    P = len(left)
    flat = (idx + bins * np.arange(P)[:, None, None])[valid]
    counts = np.bincount(flat, minlength=P * bins).reshape(P, bins)
    return counts / (npair.astype(np.float64) ** 2)[:, None]


def mlp_head(joint, params, n_layers: int) -> Tensor:
    h = joint
    for l in range(n_layers):
        h = ad.matmul(h, params[f"mlp{l}.W"]) + params[f"mlp{l}.b"]
        if l < n_layers - 1:
            h = ad.relu(h)
    return ad.sigmoid(h)


# --------------------------------------------------------------------------
# end to end


@dataclass
class PairForward:
    scores: Tensor  # (P, 1)
    H: Tensor  # node embeddings of the batch
    attention: Tensor  # (N, 1)
    batch: GraphBatch
    used: np.ndarray  # dataset tree index of each batch graph
    hist: np.ndarray  # (P, B) histogram features


def forward_pairs(params, config: ModelConfig, trees: Sequence[TreeData], pairs) -> PairForward:
    """Score pairs ``(i, j)`` of ``trees``; each distinct tree is encoded once.

    Pairs are canonicalized to ``i <= j`` first: the bilinear NTN term is not
    symmetric, so this makes the score of (i, j) equal that of (j, i).
    """
    pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    used, inv = np.unique(pairs, return_inverse=True)
    inv = inv.reshape(-1, 2)
    batch = batch_trees([trees[u] for u in used])
    H = encode(params, config, batch)
    pool = batch.pool_topo if config.attention == "topological" else batch.pool_plain
    if config.attention == "topological":
        fb = np.array([trees[u].topo_fallback for u in used])
        if fb.any():
            pool = sp.diags(~fb * 1.0) @ batch.pool_topo + sp.diags(fb * 1.0) @ batch.pool_plain
            pool = pool.tocsr()
    c = global_context_plain(H, params["att.Wc"], pool)
    _, Hstar, att = attention_pool(H, c, batch.graph_of, batch.pool_sum)
    H1 = ad.take(Hstar, inv[:, 0])
    H2 = ad.take(Hstar, inv[:, 1])
    d_tree = ntn(H1, H2, params["ntn.W"], params["ntn.V"], params["ntn.b"], config.ntn_activation)
    hist = batch_histograms(H.data, batch, inv[:, 0], inv[:, 1], config.bins)
    joint = ad.concat([d_tree, Tensor(hist)], axis=1)
    scores = mlp_head(joint, params, len(config.mlp_dims) - 1)
    return PairForward(scores, H, att, batch, used, hist)


def forward_pair(t1: MergeTree, t2: MergeTree, params, config: ModelConfig) -> float:
    """Score of one pair; the trees are ordered by source id, so the result is symmetric."""
    if t2.source_id < t1.source_id:
        t1, t2 = t2, t1
    data = [TreeData.from_tree(t1), TreeData.from_tree(t2)]
    return forward_pairs(detached(params), config, data, [[0, 1]]).scores.item()


def _predict_chunk(args):
    params, config, trees, pairs = args
    return forward_pairs(params, config, trees, pairs).scores.data[:, 0]


def predict(
    params, config: ModelConfig, trees: Sequence[TreeData], pairs, chunk: int = 1024, workers: int = 1
) -> np.ndarray:
    """Inference scores for many pairs, no gradient recording.

    Pairs are scored in fixed chunks of ``chunk`` pairs.  With ``workers > 1``
    the chunks go to a process pool and are reassembled in order, so the
    output is bitwise independent of ``workers``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    p = detached(params)
    jobs = [(p, config, trees, pairs[s : s + chunk]) for s in range(0, len(pairs), chunk)]
    if workers <= 1 or len(jobs) <= 1:
        parts = [_predict_chunk(j) for j in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_predict_chunk, jobs))
    return np.concatenate(parts) if parts else np.zeros(0)


def attention_weights(params, config: ModelConfig, t: MergeTree):
    """Per-node attention scalars and topological weights of one tree."""
    td = TreeData.from_tree(t)
    fwd = forward_pairs(detached(params), config, [td], [[0, 0]])
    return fwd.attention.data[:, 0].copy(), td.topo_weight.copy()
