"""Dataset pairing, training, evaluation, timing, MDS and attention export.

Report formats:

* EvalReport: ``key value`` lines, residuals in a CSV ``i,j,target,pred,residual``.
* MDS: CSV ``id,x,y,mean_dist``.
* Attention export: CSV ``tree,node,f,att,weight``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .groundtruth import DistanceTable, interleaving_distance
from .mergetree import MergeTree
from .model import ModelConfig, TreeData, attention_weights, forward_pairs, init_params, predict

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data


def split_trees(trees: Sequence, seed: int, train_fraction: float = 0.8):
    """Seeded shuffled split; returns sorted (train indices, test indices)."""
    n = len(trees)
    if n < 5:
        raise ConfigError(f"need at least 5 trees to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class PairDataset:
    trees: list
    split: np.ndarray  # per tree: "train" or "test"
    train_pairs: np.ndarray  # (P, 2) tree indices with i < j
    train_targets: np.ndarray
    test_pairs: np.ndarray
    test_targets: np.ndarray
    norm: float  # raw distance that maps to target 1.0
    _data: list | None = field(default=None, repr=False)

    @property
    def tree_data(self) -> list[TreeData]:
        if self._data is None:
            self._data = [TreeData.from_tree(t) for t in self.trees]
        return self._data


def _within(idx) -> np.ndarray:
    idx = np.sort(np.asarray(idx, dtype=np.int64))
    iu = np.triu_indices(idx.size, 1)
    return np.stack([idx[iu[0]], idx[iu[1]]], axis=1).reshape(-1, 2)


def _raw(table: DistanceTable, trees, pairs) -> np.ndarray:
    pos = table.index()
    try:
        rows = [pos[trees[i].source_id] for i in pairs[:, 0]]
        cols = [pos[trees[j].source_id] for j in pairs[:, 1]]
    except KeyError as e:
        raise ConfigError(f"distance table has no entry for tree {e}") from None
    return table.raw[rows, cols]


def make_pairs(
    trees: Sequence[MergeTree],
    table: DistanceTable,
    train_idx,
    test_idx=(),
    norm: float | None = None,
    max_train_pairs: int | None = None,
    seed: int = 0,
) -> PairDataset:
    """All unordered within-split pairs with normalized targets.

    Trees are expected in id order so that ``i < j`` also orders pairs by
    tree id.  Targets are raw distances divided by ``norm`` (default: the
    largest train-train distance) and clipped to [0, 1].
    """
    trees = list(trees)
    split = np.array(["test"] * len(trees), dtype=object)
    split[np.asarray(train_idx, dtype=np.int64)] = "train"
    train_pairs = _within(train_idx)
    test_pairs = _within(test_idx)
    if norm is None:
        if len(train_pairs) == 0:
            raise ConfigError("no train pairs to derive the normalization from")
        norm = float(_raw(table, trees, train_pairs).max())
        norm = norm if norm > 0 else 1.0
    if max_train_pairs is not None and len(train_pairs) > max_train_pairs:
        pick = np.random.default_rng(seed).choice(len(train_pairs), max_train_pairs, replace=False)
        train_pairs = train_pairs[np.sort(pick)]
    return PairDataset(
        trees,
        split,
        train_pairs,
        np.clip(_raw(table, trees, train_pairs) / norm, 0.0, 1.0),
        test_pairs,
        np.clip(_raw(table, trees, test_pairs) / norm, 0.0, 1.0),
        float(norm),
    )


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.001
    weight_decay: float = 0.0005
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_dir: str | None = None
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")


def checkpoint_config(tconfig: TrainConfig, norm: float, extra: dict | None = None) -> dict:
    out = dict(tconfig.model.to_dict())
    out.update(
        epochs=str(tconfig.epochs),
        batch_size=str(tconfig.batch_size),
        lr=repr(tconfig.lr),
        weight_decay=repr(tconfig.weight_decay),
        seed=str(tconfig.seed),
        target_norm=repr(float(norm)),
    )
    out.update(extra or {})
    return out


def train(dataset: PairDataset, tconfig: TrainConfig, params=None, callback=None):
    """Minimize the pair MSE with Adam; returns (params, per-epoch mean loss)."""
    pairs, targets = dataset.train_pairs, dataset.train_targets
    if len(pairs) == 0:
        raise ConfigError("no training pairs")
    cfg = tconfig.model
    if params is None:
        params = init_params(cfg, tconfig.seed)
    state = ad.AdamState(lr=tconfig.lr, weight_decay=tconfig.weight_decay)
    data = dataset.tree_data
    losses: list[float] = []
    for epoch in range(tconfig.epochs):
        order = np.random.default_rng([tconfig.seed, epoch]).permutation(len(pairs))
        sq_err = np.empty(len(pairs))
        for s in range(0, len(order), tconfig.batch_size):
            idx = order[s : s + tconfig.batch_size]
            fwd = forward_pairs(params, cfg, data, pairs[idx])
            err = ad.square(fwd.scores - targets[idx].reshape(-1, 1))
            loss = ad.mean(err)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {s // tconfig.batch_size}"
                )
            for p in params.values():
                p.grad = None
            loss.backward()
            ad.adam_step(params, {k: p.grad for k, p in params.items()}, state)
            sq_err[idx] = err.data[:, 0]
        # summed in pair order, so the value does not depend on the shuffle
        losses.append(float(sq_err.mean()))
        log.info("epoch %d loss %.6g", epoch + 1, losses[-1])
        if callback is not None:
            callback(epoch, losses[-1], params)
        if tconfig.checkpoint_dir and (
            (epoch + 1) % tconfig.checkpoint_every == 0 or epoch + 1 == tconfig.epochs
        ):
            path = Path(tconfig.checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt"
            path.parent.mkdir(parents=True, exist_ok=True)
            ad.save_checkpoint(path, params, checkpoint_config(tconfig, dataset.norm), state)
    return params, losses


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mse: float
    pairs: np.ndarray
    targets: np.ndarray
    predictions: np.ndarray
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def mse_scaled(self) -> float:
        return self.mse * 1000.0

    @property
    def residuals(self) -> np.ndarray:
        return self.predictions - self.targets


def evaluate_pairs(params, config: ModelConfig, tree_data, pairs, targets, echo=None, workers: int = 1) -> EvalReport:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    targets = np.asarray(targets, dtype=np.float64)
    t0 = time.perf_counter()
    pred = predict(params, config, tree_data, pairs, workers=workers) if len(pairs) else np.zeros(0)
    elapsed = time.perf_counter() - t0
    mse = float(np.mean((pred - targets) ** 2)) if len(pairs) else float("nan")
    return EvalReport(mse, pairs, targets, pred, {"model_seconds": elapsed}, dict(echo or {}))


def evaluate(
    params, config: ModelConfig, dataset: PairDataset, split: str = "test", echo=None, workers: int = 1
) -> EvalReport:
    if split == "test":
        pairs, targets = dataset.test_pairs, dataset.test_targets
    elif split == "train":
        pairs, targets = dataset.train_pairs, dataset.train_targets
    else:
        raise ConfigError(f"unknown split {split!r}")
    if len(pairs) == 0:
        raise ConfigError(f"no {split} pairs to evaluate")
    return evaluate_pairs(params, config, dataset.tree_data, pairs, targets, echo, workers)


def save_report(report: EvalReport, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mse {report.mse!r}\n")
        fh.write(f"mse_scaled {report.mse_scaled!r}\n")
        fh.write(f"n_pairs {len(report.pairs)}\n")
        for k, v in report.timings.items():
            fh.write(f"{k} {v!r}\n")
        for k, v in report.config.items():
            fh.write(f"config.{k} {v}\n")
    with open(path.with_suffix(".residuals.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "target", "pred", "residual"])
        for (i, j), t, p in zip(report.pairs.tolist(), report.targets, report.predictions):
            w.writerow([i, j, repr(float(t)), repr(float(p)), repr(float(p - t))])


@dataclass
class BenchReport:
    n_pairs: int
    exact_seconds: float
    model_seconds: float
    pairs: np.ndarray

    @property
    def speedup(self) -> float:
        return self.exact_seconds / max(self.model_seconds, 1e-12)

    @property
    def exact_us_per_pair(self) -> float:
        return 1e6 * self.exact_seconds / self.n_pairs

    @property
    def model_us_per_pair(self) -> float:
        return 1e6 * self.model_seconds / self.n_pairs

    def as_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "exact_seconds": self.exact_seconds,
            "model_seconds": self.model_seconds,
            "speedup": self.speedup,
            "exact_us_per_pair": self.exact_us_per_pair,
            "model_us_per_pair": self.model_us_per_pair,
        }


def sample_pairs(n_trees: int, n_pairs: int, seed: int) -> np.ndarray:
    """Distinct unordered pairs (i < j), drawn without replacement."""
    total = n_trees * (n_trees - 1) // 2
    if n_pairs > total:
        raise ConfigError(f"only {total} distinct pairs available, {n_pairs} requested")
    allp = _within(np.arange(n_trees))
    pick = np.random.default_rng(seed).choice(total, n_pairs, replace=False)
    return allp[np.sort(pick)]


def _exact_chunk(args):
    trees, pairs = args
    return [interleaving_distance(trees[i], trees[j]) for i, j in pairs]


def _time_exact(trees, pairs, workers: int) -> float:
    t0 = time.perf_counter()
    if workers <= 1:
        _exact_chunk((trees, pairs.tolist()))
    else:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [(trees, c.tolist()) for c in np.array_split(pairs, workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_exact_chunk, chunks))
    return time.perf_counter() - t0


def _time_model(params, config, trees, pairs, workers: int) -> float:
    t0 = time.perf_counter()
    data = [TreeData.from_tree(t) for t in trees]
    predict(params, config, data, pairs, workers=workers)
    return time.perf_counter() - t0


def benchmark(
    params,
    config: ModelConfig,
    trees: Sequence[MergeTree],
    n_pairs: int,
    seed: int = 0,
    workers: int = 1,
    repeats: int = 3,
) -> BenchReport:
    """Time exact distances and model inference on the same pair sample.

    Both methods get the same number of worker processes (default: both run
    in this thread).  Model time includes building its inputs from the
    trees; each distinct tree is encoded once per chunk.  Each method is
    timed ``repeats`` times and the fastest run is kept, which discards
    one-off warm-up costs and scheduler noise alike for both.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    pairs = sample_pairs(len(trees), n_pairs, seed)
    exact = min(_time_exact(trees, pairs, workers) for _ in range(repeats))
    model = min(_time_model(params, config, trees, pairs, workers) for _ in range(repeats))
    return BenchReport(len(pairs), exact, model, pairs)


# --------------------------------------------------------------------------
# MDS


def jacobi_eigh(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors as columns), eigenvalues descending.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))  # direct; subtracting the diagonal mass cancels
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # asymptotic form; theta**2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def mds(D: np.ndarray, dims: int = 2):
    """Classical MDS; returns (n x dims coordinates, mean distance to other points)."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if n < 3:
        raise ConfigError("MDS needs at least 3 points")
    J = np.eye(n) - np.ones((n, n)) / n
    B = -0.5 * J @ (D**2) @ J
    B = 0.5 * (B + B.T)
    w, V = jacobi_eigh(B)
    # eigenvalues within round-off of zero carry no geometry; their square
    # roots (~1e-8 for 1e-16) would otherwise show up as spurious coordinates
    floor = n * np.finfo(np.float64).eps * max(float(np.abs(w).max()), 0.0)
    lam = np.where(w[:dims] > floor, w[:dims], 0.0)
    coords = V[:, :dims] * np.sqrt(lam)
    mean_dist = D.sum(axis=1) / (n - 1)
    return coords, mean_dist


def write_mds(ids, coords, mean_dist, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "mean_dist"])
        for k, (x, y), m in zip(ids, coords[:, :2].tolist(), mean_dist.tolist()):
            w.writerow([k, repr(x), repr(y), repr(m)])


def predicted_matrix(params, config: ModelConfig, trees: Sequence[MergeTree]) -> np.ndarray:
    """Symmetric matrix of model scores over all pairs (zero diagonal)."""
    n = len(trees)
    pairs = _within(np.arange(n))
    out = np.zeros((n, n))
    if len(pairs):
        s = predict(params, config, [TreeData.from_tree(t) for t in trees], pairs)
        out[pairs[:, 0], pairs[:, 1]] = s
        out[pairs[:, 1], pairs[:, 0]] = s
    return out


# --------------------------------------------------------------------------
# attention export


def export_attention(params, config: ModelConfig, trees: Sequence[MergeTree], out=None) -> list[tuple]:
    """Rows ``(tree, node id, f, attention, topological weight)`` for each node."""
    rows = []
    for t in trees:
        att, weight = attention_weights(params, config, t)
        for k in range(t.n):
            rows.append((t.source_id, int(t.ids[k]), float(t.f[k]), float(att[k]), float(weight[k])))
    if out is not None:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tree", "node", "f", "att", "weight"])
            for r in rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4])])
    return rows
