"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy arrays wrapped in `Tensor` nodes.  Operations build an
acyclic graph; `backward` runs one reverse topological sweep and adds
gradients into every reachable tensor whose `requires_grad` flag is set.
Gradients accumulate across sweeps; callers zero them between optimizer
steps (see `zero_grads`).

Activations are laid out one row per sequence position, shape (s, width).
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A node in the autodiff graph: an array, its gradient, and its origin."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None  # lazily allocated
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or self._op or "const"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data, parents: tuple[Tensor, ...], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    # the only broadcast we allow is a (1, n) row (bias) against (m, n)
    for row, full in ((a, b), (b, a)):
        if row.data.ndim == 2 and full.data.ndim == 2 \
                and row.shape[0] == 1 and row.shape[1] == full.shape[1]:
            return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)

    def backward_fn(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(g, b.data.shape))

    return _result(a.data + b.data, (a, b), "add", backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)

    def backward_fn(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), "sub", backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)

    def backward_fn(g):
        _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), "mul", backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), "scale", backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward_fn)


def transpose(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), "transpose", backward_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def backward_fn(g):
        _accumulate(a, g * y * (1.0 - y))

    return _result(y, (a,), "sigmoid", backward_fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - y * y))

    return _result(y, (a,), "tanh", backward_fn)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def backward_fn(g):
        _accumulate(a, g * (a.data > 0.0))

    return _result(y, (a,), "relu", backward_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: no parts")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row mismatch {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[:, lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), "concat_cols", backward_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: no parts")
    cols = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ShapeError(f"concat_rows: column mismatch {[p.shape for p in parts]}")
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi, :])

    return _result(np.concatenate([p.data for p in parts], axis=0),
                   tuple(parts), "concat_rows", backward_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop, :] = g
            _accumulate(a, full)

    return _result(a.data[start:stop, :].copy(), (a,), "slice_rows", backward_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accumulate(a, full)

    return _result(a.data[:, start:stop].copy(), (a,), "slice_cols", backward_fn)


def embedding_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_rows: ids must be a flat sequence, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_rows: id out of range for table with {table.shape[0]} rows")

    def backward_fn(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accumulate(table, full)

    return _result(table.data[idx], (table,), "embedding_rows", backward_fn)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _result(y, (a,), "softmax_rows", backward_fn)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """1-D convolution over rows with zero "same" padding.

    x is (s, c_in), kernel (w, c_in, c_out), bias (1, c_out); output is
    (s, c_out).  For even widths the extra pad row goes on the left.
    """
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: expected 2-D input and 3-D kernel, got {x.shape}, {kernel.shape}")
    w, c_in, c_out = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input width {x.shape[1]} != kernel c_in {c_in}")
    if bias.shape != (1, c_out):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != (1, {c_out})")
    s = x.shape[0]
    left = w // 2
    padded = np.zeros((s + w - 1, c_in))
    padded[left:left + s, :] = x.data
    out = np.tile(bias.data, (s, 1))
    for k in range(w):
        out += padded[k:k + s, :] @ kernel.data[k]

    def backward_fn(g):
        if x.requires_grad:
            dpad = np.zeros_like(padded)
            for k in range(w):
                dpad[k:k + s, :] += g @ kernel.data[k].T
            _accumulate(x, dpad[left:left + s, :])
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for k in range(w):
                dk[k] = padded[k:k + s, :].T @ g
            _accumulate(kernel, dk)
        _accumulate(bias, g.sum(axis=0, keepdims=True))

    return _result(out, (x, kernel, bias), "conv1d", backward_fn)


@dataclass
class NormState:
    """Running statistics for batch normalization, updated in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, momentum: float = 0.9, eps: float = 1e-5) -> "NormState":
        return cls(np.zeros(width), np.ones(width), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mask, state: NormState,
               mode: str = "train") -> Tensor:
    """Column-wise normalization over the valid (masked-in) rows.

    Train mode uses the current batch's statistics and folds them into the
    running averages; infer mode uses the running averages.  With fewer than
    two valid rows in train mode the running statistics are used instead and
    a warning is logged.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    if x.data.ndim != 2 or gamma.shape != (1, x.shape[1]) or beta.shape != (1, x.shape[1]):
        raise ShapeError(f"batch_norm: shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    valid = np.ones(x.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != (x.shape[0],):
        raise ShapeError(f"batch_norm: mask length {valid.shape} != rows {x.shape[0]}")
    m = int(valid.sum())

    use_batch = mode == "train" and m >= 2
    if mode == "train" and not use_batch:
        log.warning("batch_norm: %d valid row(s) in train mode; using running statistics", m)
    if use_batch:
        rows = x.data[valid]
        mean = rows.mean(axis=0)
        var = rows.var(axis=0)
        mom = state.momentum
        state.running_mean[:] = mom * state.running_mean + (1.0 - mom) * mean
        state.running_var[:] = mom * state.running_var + (1.0 - mom) * var
    else:
        mean = state.running_mean.copy()
        var = state.running_var.copy()

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def backward_fn(g):
        _accumulate(gamma, (g * xhat).sum(axis=0, keepdims=True))
        _accumulate(beta, g.sum(axis=0, keepdims=True))
        if not x.requires_grad:
            return
        gh = g * gamma.data
        if use_batch:
            s1 = gh.sum(axis=0)
            s2 = (gh * xhat).sum(axis=0)
            dx = gh * inv_std - valid[:, None] * (inv_std / m) * (s1 + xhat * s2)
        else:
            dx = gh * inv_std
        _accumulate(x, dx)

    return _result(out, (x, gamma, beta), "batch_norm", backward_fn)


def cross_entropy_masked(logits: Tensor, gold: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over the masked-in rows.

    Returns a scalar tensor; an all-masked-out input gives 0 with zero
    gradient.
    """
    s, n_classes = logits.shape
    gold = np.asarray(gold, dtype=np.intp)
    valid = np.asarray(mask, dtype=bool)
    if gold.shape != (s,) or valid.shape != (s,):
        raise ShapeError(f"cross_entropy_masked: got {s} rows, {gold.shape[0]} labels, "
                         f"{valid.shape[0]} mask entries")
    if gold.size and (gold.min() < 0 or gold.max() >= n_classes):
        raise ValueError(f"cross_entropy_masked: class index outside 0..{n_classes - 1}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    m = int(valid.sum())
    if m == 0:
        return _result(np.zeros(()), (logits,), "cross_entropy_masked", lambda g: None)
    picked = logp[np.arange(s), gold]
    loss = -picked[valid].mean()

    def backward_fn(g):
        probs = np.exp(logp)
        probs[np.arange(s), gold] -= 1.0
        probs[~valid, :] = 0.0
        _accumulate(logits, probs * (float(g) / m))

    return _result(np.asarray(loss), (logits,), "cross_entropy_masked", backward_fn)


def sum_all(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum()), (a,), "sum_all", backward_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return _result(np.asarray(a.data.mean()), (a,), "mean_all", backward_fn)


def backward(loss: Tensor) -> None:
    """Reverse topological sweep from a scalar loss node."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: expected a scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-4, tol: float = 1e-3,
               analytic_scale: float = 1.0) -> GradCheckReport:
    """Compare analytic gradients of f() against central finite differences.

    Relative error per entry is |a - n| / max(1, |a| + |n|).  f must be a
    deterministic closure over `params`; it is re-evaluated with each entry
    perturbed by +/- h.  `analytic_scale` deliberately corrupts the analytic
    side and exists to verify that the checker itself catches bad gradients.
    """
    zero_grads(params)
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad * analytic_scale
                for p in params]
    zero_grads(params)

    per_param: dict[str, float] = {}
    worst = 0.0
    for i, (p, a) in enumerate(zip(params, analytic)):
        name = p.name or f"param{i}"
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f().item()
            flat[j] = orig - h
            down = f().item()
            flat[j] = orig
            num_flat[j] = (up - down) / (2.0 * h)
        denom = np.maximum(1.0, np.abs(a) + np.abs(numeric))
        rel = float((np.abs(a - numeric) / denom).max()) if flat.size else 0.0
        per_param[name] = rel
        worst = max(worst, rel)
    return GradCheckReport(worst, per_param, tol)


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class Rng:
    """Counter-based splitmix64 generator; equal seeds give bitwise-equal
    sequences on every platform."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def _block(self, n: int) -> np.ndarray:
        ks = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            z = self._seed + ks * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def next_u64(self) -> int:
        return int(self._block(1)[0])

    def random(self) -> float:
        """Uniform float64 in [0, 1)."""
        return float(self._block(1)[0] >> np.uint64(11)) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def uniform_array(self, shape: tuple[int, ...], lo: float, hi: float) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = (self._block(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return (lo + (hi - lo) * u).reshape(shape)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError(f"randint: empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]

    def weighted_choice(self, items: Sequence, weights: Sequence[float]):
        total = float(sum(weights))
        if total <= 0:
            raise ValueError("weighted_choice: weights must sum to a positive value")
        r = self.random() * total
        acc = 0.0
        for item, w in zip(items, weights):
            acc += w
            if r < acc:
                return item
        return items[-1]

    def shuffle(self, xs: list) -> None:
        for i in range(len(xs) - 1, 0, -1):
            j = self.randint(0, i)
            xs[i], xs[j] = xs[j], xs[i]


def tensors_to_obj(named: Mapping[str, "Tensor | np.ndarray"]) -> dict:
    """Flat JSON-ready mapping name -> {shape, values} (row-major floats)."""
    obj = {}
    for name, t in named.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        obj[name] = {"shape": list(arr.shape), "values": arr.ravel().tolist()}
    return obj


def tensors_from_obj(obj: Mapping) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in obj.items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"tensor {name!r}: {values.size} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, named: Mapping[str, "Tensor | np.ndarray"]) -> None:
    """Write a flat name -> {shape, values} JSON document (lossless floats)."""
    atomic_write_text(path, json.dumps(tensors_to_obj(named)))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        return tensors_from_obj(json.load(fh))
