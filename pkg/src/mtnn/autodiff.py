"""Small reverse-mode autodiff over float64 numpy arrays, plus Adam.

Every op returns a new :class:`Tensor`.  When any input requires a gradient
the result remembers its inputs and a backward rule; :meth:`Tensor.backward`
walks that recorded graph once in reverse topological order.  The graph is
released afterwards, so calling ``backward`` twice on the same loss raises.

Broadcasting follows numpy; gradients are summed back to the input shape.

Checkpoint format (text)::

    # mtnn checkpoint
    config <key> <value>
    param <name> <d0> [<d1> ...]
    <space separated values>
    adam <step> <lr> <beta1> <beta2> <eps> <weight_decay>
    adam_m <name> <d0> ...
    <values>
    adam_v <name> <d0> ...
    <values>
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ParseError


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(_wrap(o)))

    def __rsub__(self, o):
        return add(_wrap(o), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, o):
        if np.isscalar(o):
            return scale(self, o)
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if not np.isscalar(o):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return take(self, idx)

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _elementwise(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# op catalog


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _record(
        _elementwise("add", np.add, a, b),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _record(
        _elementwise("mul", np.multiply, a, b),
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, s: float) -> Tensor:
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def spmm(A, x) -> Tensor:
    """Constant (sparse or dense) matrix times tensor; no gradient for ``A``."""
    x = _wrap(x)
    if A.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {A.shape} by {x.shape}")
    # transposed lazily: inference never needs it
    return _record(np.asarray(A @ x.data), (x,), lambda g: (np.asarray(A.T @ g),), "spmm")


def transpose(a) -> Tensor:
    return _record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _record(data, (a,), lambda g: (g.reshape(old),), "reshape")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
            for k in range(len(tensors))
        )

    return _record(data, tensors, rule, "concat")


def relu(a) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    s = expit(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def square(a) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


power2 = square


def take(a, idx) -> Tensor:
    """Index/slice ``a`` like numpy; repeated indices accumulate gradient."""
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), rule, "take")


def pad_rows(a, n: int) -> Tensor:
    """Append zero rows so that ``a`` has ``n`` rows."""
    rows = a.shape[0]
    if n < rows:
        raise ShapeError(f"pad_rows: cannot pad {a.shape} down to {n} rows")
    data = np.zeros((n,) + a.shape[1:])
    data[:rows] = a.data
    return _record(data, (a,), lambda g: (g[:rows],), "pad")


def bilinear(x, W, y) -> Tensor:
    """``out[p, k] = x[p] @ W[k] @ y[p]`` for x, y (P, m) and W (K, m, m)."""
    x, W, y = _wrap(x), _wrap(W), _wrap(y)
    if (
        x.data.ndim != 2
        or y.shape != x.shape
        or W.data.ndim != 3
        or W.shape[1:] != (x.shape[1], x.shape[1])
    ):
        raise ShapeError(f"bilinear: shapes {x.shape}, {W.shape}, {y.shape}")
    xd, Wd, yd = x.data, W.data, y.data
    P, m = xd.shape
    K = Wd.shape[0]
    # contractions routed through matmul: xW[p, k, b] = sum_a x[p, a] W[k, a, b]
    xW = (xd @ Wd.transpose(1, 0, 2).reshape(m, K * m)).reshape(P, K, m)
    out = np.matmul(xW, yd[:, :, None])[:, :, 0]

    def rule(g):
        gx = gW = gy = None
        if x.requires_grad:
            # Wy[p, k, a] = sum_b W[k, a, b] y[p, b]
            Wy = (yd @ Wd.transpose(2, 0, 1).reshape(m, K * m)).reshape(P, K, m)
            gx = np.matmul(g[:, None, :], Wy)[:, 0, :]
        if W.requires_grad:
            gx_pk = (g[:, :, None] * xd[:, None, :]).reshape(P, K * m)
            gW = (gx_pk.T @ yd).reshape(K, m, m)
        if y.requires_grad:
            gy = np.matmul(g[:, None, :], xW)[:, 0, :]
        return gx, gW, gy

    return _record(out, (x, W, y), rule, "bilinear")


# --------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    rel_err: list  # per input, array shaped like the input
    kinks: list  # per input, bool mask of coordinates judged non-differentiable
    checked: int
    tol: float

    @property
    def n_kinks(self) -> int:
        return int(np.sum([k.sum() for k in self.kinks]))

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor] | Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` is re-evaluated after perturbing ``inputs`` in place.  The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.  A coordinate
    whose forward and backward one-sided differences disagree by more than
    ``kink_tol * max(|n|, floor)`` sits on a kink; it is flagged and left out
    of ``max_rel_err``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for x in inputs:
        x.grad = None
    out = f()
    backward(out)
    base = out.item()
    rel_errs, kinks = [], []
    worst = 0.0
    for x in inputs:
        analytic = np.zeros(x.shape) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        rel = np.zeros(flat.size)
        kink = np.zeros(flat.size, dtype=bool)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            one_sided_gap = abs((fp - base) - (base - fm)) / h
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(num), floor)
            rel[i] = abs(a - num) / denom
            if one_sided_gap > kink_tol * max(abs(num), floor):
                kink[i] = True
            elif rel[i] > worst:
                worst = rel[i]
        rel_errs.append(rel.reshape(x.shape))
        kinks.append(kink.reshape(x.shape))
    checked = int(np.sum([(~k).sum() for k in kinks]))
    return GradCheckReport(float(worst), rel_errs, kinks, checked, tol)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam; weight decay is added to the gradient (L2)."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} for param {name} {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} for param {name} {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_HEADER = "# mtnn checkpoint"


def _fmt(a: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in a.reshape(-1).tolist())


def save_checkpoint(path, params: Mapping[str, Tensor], config: Mapping[str, str] = (), adam: AdamState | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        for k, v in dict(config).items():
            fh.write(f"config {k} {v}\n")
        for name, p in params.items():
            fh.write(f"param {name} {' '.join(str(d) for d in p.shape)}\n{_fmt(p.data)}\n")
        if adam is not None:
            fh.write(
                f"adam {adam.step} {adam.lr!r} {adam.beta1!r} {adam.beta2!r} "
                f"{adam.eps!r} {adam.weight_decay!r}\n"
            )
            for tag, store in (("adam_m", adam.m), ("adam_v", adam.v)):
                for name, arr in store.items():
                    fh.write(f"{tag} {name} {' '.join(str(d) for d in arr.shape)}\n{_fmt(arr)}\n")


def load_checkpoint(path):
    """Returns ``(params, config, adam_state_or_None)``."""
    path = Path(path)
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ParseError("not a checkpoint file", path, 1)
    params: dict[str, Tensor] = {}
    config: dict[str, str] = {}
    adam = None
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        tok = line.split(" ")
        try:
            if tok[0] == "config" and len(tok) >= 3:
                config[tok[1]] = " ".join(tok[2:])
            elif tok[0] in ("param", "adam_m", "adam_v") and len(tok) >= 2:
                shape = tuple(int(d) for d in tok[2:])
                if i + 1 >= len(lines):
                    raise ParseError(f"missing values for {tok[1]}", path, i + 1)
                vals = [float(x) for x in lines[i + 1].split()]
                n = int(np.prod(shape)) if shape else 1
                if len(vals) != n:
                    raise ParseError(f"{tok[1]}: expected {n} values, got {len(vals)}", path, i + 2)
                arr = np.array(vals, dtype=np.float64).reshape(shape)
                if tok[0] == "param":
                    params[tok[1]] = Tensor(arr, requires_grad=True)
                elif adam is None:
                    raise ParseError("moment buffer before adam line", path, i + 1)
                else:
                    (adam.m if tok[0] == "adam_m" else adam.v)[tok[1]] = arr
                i += 1
            elif tok[0] == "adam" and len(tok) == 7:
                adam = AdamState(
                    lr=float(tok[2]),
                    beta1=float(tok[3]),
                    beta2=float(tok[4]),
                    eps=float(tok[5]),
                    weight_decay=float(tok[6]),
                    step=int(tok[1]),
                )
            else:
                raise ParseError(f"unrecognized line {line!r}", path, i + 1)
        except ValueError as e:
            if isinstance(e, ParseError):
                raise
            raise ParseError(f"bad number in {line!r}", path, i + 1) from None
        i += 1
    return params, config, adam
