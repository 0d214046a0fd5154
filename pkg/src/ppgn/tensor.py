"""Minimal reverse-mode autodiff over numpy arrays.

Only the handful of ops the two networks and the baselines need. A ``Tensor``
records its parents and a closure that pushes its gradient back to them;
``backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

CKPT_FORMAT = "ppgn-ckpt-v1"


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def _accum(self, g):
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite input")
    return Tensor(arr)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from scalar ``root``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for t in reversed(order):
        if t.backward_fn is not None and t.grad is not None:
            t.backward_fn(t.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- ops ----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` 2-D; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            A2 = a.data.reshape(-1, a.shape[-1])
            b._accum(A2.T @ g.reshape(-1, g.shape[-1]))

    return Tensor(a.data @ b.data, (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor(out, (a, b), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def back(g):
        a._accum(g * on)

    return Tensor(np.where(on, a.data, 0.0), (a,), back)


def concat_cols(a, b) -> Tensor:
    """Concatenate along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_cols: leading shapes differ, {a.shape} vs {b.shape}")
    k = a.shape[-1]

    def back(g):
        a._accum(g[..., :k])
        b._accum(g[..., k:])

    return Tensor(np.concatenate([a.data, b.data], axis=-1), (a, b), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def back(g):
        a._accum(g.reshape(old))

    return Tensor(a.data.reshape(shape), (a,), back)


def propagate(P, h) -> Tensor:
    """Left-multiply the node axis of ``h`` (shape (..., n, d)) by a constant
    n x n operator ``P`` (dense or scipy sparse)."""
    h = as_tensor(h)
    n = h.shape[-2]
    if P.shape != (n, n):
        raise ShapeError(f"propagate: operator {P.shape} vs node axis {n}")
    sparse = sp.issparse(P)
    PT = P.T.tocsr() if sparse else P.T

    def apply(M, x):
        if x.ndim == 2:
            return M @ x
        if sparse:
            xt = np.moveaxis(x, -2, 0)
            flat = M @ xt.reshape(n, -1)
            return np.moveaxis(flat.reshape(xt.shape), 0, -2)
        return np.matmul(M, x)

    def back(g):
        h._accum(apply(PT, g))

    return Tensor(apply(P, h.data), (h,), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def back(g):
        a._accum(g * c)

    return Tensor(a.data * c, (a,), back)


def sum_squares(ts: Iterable[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in ts]

    def back(g):
        for t in ts:
            t._accum(2.0 * g * t.data)

    return Tensor(sum(float(np.sum(t.data * t.data)) for t in ts), tuple(ts), back)


def softmax(f: np.ndarray) -> np.ndarray:
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, targets, rows=None) -> tuple[Tensor, np.ndarray]:
    """Mean cross entropy of softmax(logits) against integer targets.

    ``rows`` restricts the loss to a subset of rows (the labelled samples);
    the other rows get zero gradient. Returns the loss and the probabilities.
    """
    logits = as_tensor(logits)
    f = logits.data
    single = f.ndim == 1
    if single:
        f = f[None, :]
    targets = np.atleast_1d(np.asarray(targets, dtype=int))
    rows = np.arange(f.shape[0]) if rows is None else np.asarray(rows, dtype=int)
    if len(rows) == 0:
        raise ValueError("softmax_xent: empty batch")
    if len(targets) != len(rows):
        raise ShapeError(f"softmax_xent: {len(targets)} targets for {len(rows)} rows")
    shift = f - f.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - logz
    probs = np.exp(logp)
    loss = -float(np.mean(logp[rows, targets]))
    if not np.isfinite(loss):
        raise NumericError("cross entropy is not finite")

    def back(g):
        d = np.zeros_like(f)
        d[rows] = probs[rows]
        d[rows, targets] -= 1.0
        d *= g / len(rows)
        logits._accum(d[0] if single else d)

    return Tensor(loss, (logits,), back), (probs[0] if single else probs)


# -- parameters & optimisation -------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


class ParamStore:
    """Named parameters with gradient buffers and Adam moments."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}
        for k, v in (params or {}).items():
            self.add(k, v)

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=float)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.t[name] = 0

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def collect(self, leaves: dict[str, Tensor]) -> None:
        for k, t in leaves.items():
            self.grads[k] = np.zeros_like(self.params[k]) if t.grad is None else t.grad

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for k in self.params:
            other.params[k] = self.params[k].copy()
            other.grads[k] = self.grads[k].copy()
            other.m[k] = self.m[k].copy()
            other.v[k] = self.v[k].copy()
            other.t[k] = self.t[k]
        return other

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def value_and_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor], store: ParamStore) -> float:
    leaves = store.leaves()
    loss = loss_fn(leaves)
    backward(loss)
    store.collect(leaves)
    return float(loss.data)


def adam_step(store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, names=None) -> None:
    """Bias-corrected Adam on ``names`` (default all); others are untouched."""
    for k in store.params if names is None else names:
        g = store.grads[k]
        store.t[k] += 1
        t = store.t[k]
        store.m[k] = beta1 * store.m[k] + (1 - beta1) * g
        store.v[k] = beta2 * store.v[k] + (1 - beta2) * g * g
        m_hat = store.m[k] / (1 - beta1 ** t)
        v_hat = store.v[k] / (1 - beta2 ** t)
        store.params[k] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(loss_fn, store: ParamStore, h: float = 1e-5, max_coords: int = 30,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    At most ``max_coords`` coordinates are sampled per parameter. Relative
    error is |a - n| / max(|a|, |n|, 1e-7).
    """
    rng = rng or np.random.default_rng(0)
    value_and_grad(loss_fn, store)
    worst = 0.0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        analytic = store.grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn(store.leaves()).data)
            flat[i] = old - h
            down = float(loss_fn(store.leaves()).data)
            flat[i] = old
            num = (up - down) / (2 * h)
            err = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-7)
            worst = max(worst, err)
    return worst


# -- checkpoints ---------------------------------------------------------------


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": a.reshape(-1).tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["values"], dtype=float).reshape(d["shape"])


def store_to_dict(store: ParamStore) -> dict:
    return {
        "params": {k: _arr(v) for k, v in store.params.items()},
        "adam": {k: {"m": _arr(store.m[k]), "v": _arr(store.v[k]), "t": store.t[k]} for k in store.params},
    }


def store_from_dict(d: dict) -> ParamStore:
    store = ParamStore({k: _unarr(v) for k, v in d["params"].items()})
    for k, st in d.get("adam", {}).items():
        store.m[k] = _unarr(st["m"])
        store.v[k] = _unarr(st["v"])
        store.t[k] = int(st["t"])
    return store


def save_checkpoint(path: str | Path, stores: dict[str, ParamStore], extra: dict | None = None,
                    rng: np.random.Generator | None = None) -> None:
    doc = {"format": CKPT_FORMAT, "stores": {k: store_to_dict(s) for k, s in stores.items()}}
    if rng is not None:
        doc["rng"] = rng.bit_generator.state
    doc["extra"] = extra or {}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, ParamStore], dict, np.random.Generator | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a {CKPT_FORMAT} checkpoint")
    rng = None
    if "rng" in doc:
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng"]
    return {k: store_from_dict(v) for k, v in doc["stores"].items()}, doc.get("extra", {}), rng
