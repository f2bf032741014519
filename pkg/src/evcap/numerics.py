"""Minimal reverse-mode autodiff over dense numpy arrays.

Every primitive computes its forward value eagerly and records a backward
rule on the output node; ``backward`` replays the recorded graph in reverse
creation order (the creation counter doubles as a tape). Parameters and
activations are float32 by default; reductions (sums, norms, bias folds)
accumulate in float64 before casting back. ``grad_check`` promotes
parameters to float64 so central differences are compared at full
precision against the same backward rules the float32 path uses.

Non-finite values are an error surface: each primitive raises
``NumericError`` the moment a NaN/Inf appears instead of letting it
propagate silently.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

REAL = np.float32

# Set False to skip per-op finite checks (hot loops that were already
# validated); never affects results, only failure latency.
FINITE_CHECKS = True

_ids = itertools.count()


class Tensor:
    """A node in the recorded computation graph.

    ``data`` is always a contiguous float ndarray. Leaves created with
    ``requires_grad=True`` receive accumulated gradients in ``grad`` after
    ``backward``; interior nodes keep transient gradients only while a
    backward pass is running.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(REAL)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf."""
    if loss.data.size != 1:
        raise DimensionError("backward expects a scalar loss")
    # Reverse creation order is a topological order: parents always
    # precede children on the tape.
    seen = {loss._id}
    nodes = [loss]
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda n: n._id, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
        if node._parents:
            node.grad = None  # free interior gradients as we go


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _reduce_to(g: np.ndarray, shape: tuple, dtype) -> np.ndarray:
    """Fold a gradient back onto a size-1 broadcast operand."""
    return np.asarray(g.sum(dtype=np.float64), dtype=dtype).reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D matrix product with gradients for both operands."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp, "matmul")


def _binary(kind: str, a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(
            f"{kind} supports exact-shape or scalar broadcast only, got {a.shape} and {b.shape}"
        )
    if kind == "add":
        out = a.data + b.data
    elif kind == "sub":
        out = a.data - b.data
    elif kind == "mul":
        out = a.data * b.data
    else:
        raise ParameterError(f"unknown binary op {kind!r}")

    def vjp(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        else:
            ga, gb = g * b.data, g * a.data
        if a.data.size == 1 and g.size != 1:
            ga = _reduce_to(ga, a.shape, a.dtype)
        if b.data.size == 1 and g.size != 1:
            gb = _reduce_to(gb, b.shape, b.dtype)
        return ga, gb

    return _node(out, (a, b), vjp, kind)


def add(a, b) -> Tensor:
    return _binary("add", a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), vjp, "sigmoid")


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), vjp, "tanh")


def exp(x) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):  # non-finite output raises NumericError below
        out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (x,), vjp, "exp")


_POINTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_POINTWISE_BINARY = {"add": add, "mul": mul, "sub": sub}


def pointwise(op_kind: str, *operands) -> Tensor:
    """Dispatch an elementwise op by name: sigmoid, tanh, add, mul, sub."""
    if op_kind in _POINTWISE_UNARY:
        if len(operands) != 1:
            raise ParameterError(f"{op_kind} takes exactly one operand")
        return _POINTWISE_UNARY[op_kind](*operands)
    if op_kind in _POINTWISE_BINARY:
        if len(operands) != 2:
            raise ParameterError(f"{op_kind} takes exactly two operands")
        return _POINTWISE_BINARY[op_kind](*operands)
    raise ParameterError(f"unknown pointwise op {op_kind!r}")


def add_bias(a, b) -> Tensor:
    """Row-broadcast bias add: (n, k) + (1, k)."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.shape != (1, a.shape[1]):
        raise DimensionError(f"add_bias expects (n,k) and (1,k), got {a.shape} and {b.shape}")
    out = a.data + b.data

    def vjp(g):
        gb = np.asarray(g.sum(axis=0, keepdims=True, dtype=np.float64), dtype=b.dtype)
        return g, gb

    return _node(out, (a, b), vjp, "add_bias")


def softmax_rows(a, temperature: float) -> Tensor:
    """Row-wise softmax of a/temperature, stabilized by row-max subtraction."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError("softmax_rows expects a 2-D array")
    z = a.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    out = np.asarray(e / denom, dtype=a.dtype)

    def vjp(g):
        dot = np.sum(g * out, axis=1, keepdims=True, dtype=np.float64)
        return (np.asarray(out * (g - dot), dtype=a.dtype) / temperature,)

    return _node(out, (a,), vjp, "softmax_rows")


def _offdiag_parts(a: Tensor, temperature: float, op: str):
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    n, m = a.data.shape if a.data.ndim == 2 else (0, -1)
    if n != m or n < 2:
        raise DimensionError(f"{op} expects a square matrix with n >= 2, got {a.shape}")
    z = a.data / temperature
    eye = np.eye(n, dtype=bool)
    zm = np.where(eye, -np.inf, z)
    row_max = zm.max(axis=1, keepdims=True)
    e = np.exp(zm - row_max)  # exact 0.0 on the diagonal
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    return z, e, denom, row_max


def offdiag_softmax_rows(a, temperature: float) -> Tensor:
    """Row-wise softmax of a/temperature with the diagonal excluded.

    Output rows sum to 1 over the off-diagonal entries; the diagonal is 0.
    """
    a = _lift(a)
    _, e, denom, _ = _offdiag_parts(a, temperature, "offdiag_softmax_rows")
    out = np.asarray(e / denom, dtype=a.dtype)

    def vjp(g):
        dot = np.sum(g * out, axis=1, keepdims=True, dtype=np.float64)
        return (np.asarray(out * (g - dot), dtype=a.dtype) / temperature,)

    return _node(out, (a,), vjp, "offdiag_softmax_rows")


def offdiag_logsumexp_rows(a, temperature: float) -> Tensor:
    """Per-row log-sum-exp of a/temperature over the off-diagonal entries, (n, 1)."""
    a = _lift(a)
    _, e, denom, row_max = _offdiag_parts(a, temperature, "offdiag_logsumexp_rows")
    out = np.asarray(row_max + np.log(denom), dtype=a.dtype)
    w = np.asarray(e / denom, dtype=a.dtype)

    def vjp(g):
        return (g * w / temperature,)

    return _node(out, (a,), vjp, "offdiag_logsumexp_rows")


def offdiag_nll_pairs(a, pairs: np.ndarray, temperature: float) -> Tensor:
    """Per-row negative log-likelihood of a designated positive column under
    the off-diagonal softmax of a/temperature, returned as (n, 1).

    Computing log-sum-exp of the positive-shifted row avoids the float32
    cancellation of evaluating lse and the positive logit separately.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    a = _lift(a)
    n, m = a.data.shape if a.data.ndim == 2 else (0, -1)
    pairs = np.asarray(pairs, dtype=np.intp)
    if n != m or n < 2:
        raise DimensionError(f"offdiag_nll_pairs expects a square matrix, got {a.shape}")
    if pairs.shape != (n,) or np.any(pairs < 0) or np.any(pairs >= n):
        raise DimensionError("pairs must hold one in-range column per row")
    idx = np.arange(n)
    if np.any(pairs == idx):
        raise ParameterError("a row's positive may not be itself")
    z = a.data.astype(np.float64) / temperature
    shifted = z - z[idx, pairs][:, None]
    eye = np.eye(n, dtype=bool)
    shifted = np.where(eye, -np.inf, shifted)
    row_max = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - row_max)
    denom = e.sum(axis=1, keepdims=True)
    out = np.asarray(row_max + np.log(denom), dtype=a.dtype)
    w = e / denom  # softmax over j != i, shift-invariant

    def vjp(g):
        gw = w.copy()
        gw[idx, pairs] -= 1.0
        return (np.asarray(gw * (g.astype(np.float64) / temperature), dtype=a.dtype),)

    return _node(out, (a,), vjp, "offdiag_nll_pairs")


def gather_pairs(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select a[rows[k], cols[k]] for each k, returned as a (k, 1) column."""
    a = _lift(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise DimensionError("gather_pairs expects a 2-D array and matching 1-D index vectors")
    out = a.data[rows, cols].reshape(-1, 1)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g[:, 0])
        return (ga,)

    return _node(out, (a,), vjp, "gather_pairs")


def l2_normalize_rows(a, floor: float = 1e-8) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm <= floor divide by floor."""
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError("l2_normalize_rows expects a 2-D array")
    sq = np.sum(a.data.astype(np.float64) ** 2, axis=1, keepdims=True)
    norms = np.sqrt(sq)
    m = np.maximum(norms, floor)
    out = np.asarray(a.data / m, dtype=a.dtype)

    def vjp(g):
        live = (norms > floor).astype(np.float64)
        dot = np.sum(g.astype(np.float64) * a.data, axis=1, keepdims=True)
        ga = g / m - a.data * (dot * live / m**3)
        return (np.asarray(ga, dtype=a.dtype),)

    return _node(out, (a,), vjp, "l2_normalize_rows")


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D array")
    out = np.ascontiguousarray(a.data.T)

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _node(out, (a,), vjp, "transpose")


def concat_cols(parts: Sequence) -> Tensor:
    """Concatenate 2-D blocks with equal row counts along columns."""
    ts = [_lift(p) for p in parts]
    if not ts:
        raise DimensionError("concat_cols needs at least one block")
    rows = ts[0].shape[0]
    for t in ts:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise DimensionError("concat_cols blocks must be 2-D with equal row counts")
    widths = [t.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in ts], axis=1)

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(ts)))

    return _node(out, tuple(ts), vjp, "concat_cols")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(f"bad column slice [{start}:{stop}] of {a.shape}")
    out = np.ascontiguousarray(a.data[:, start:stop])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _node(out, (a,), vjp, "slice_cols")


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise DimensionError(f"bad row slice [{start}:{stop}] of {a.shape}")
    out = np.ascontiguousarray(a.data[start:stop])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _node(out, (a,), vjp, "slice_rows")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(np.ascontiguousarray(out), (a,), vjp, "reshape")


def sum_all(a) -> Tensor:
    """Sum of all entries as a (1, 1) tensor; accumulates in float64."""
    a = _lift(a)
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype).reshape(1, 1)

    def vjp(g):
        return (np.full(a.shape, g.reshape(-1)[0], dtype=a.dtype),)

    return _node(out, (a,), vjp, "sum_all")


def mean_all(a) -> Tensor:
    """Mean of all entries as a (1, 1) tensor; accumulates in float64."""
    a = _lift(a)
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype).reshape(1, 1)

    def vjp(g):
        return (np.full(a.shape, g.reshape(-1)[0] / n, dtype=a.dtype),)

    return _node(out, (a,), vjp, "mean_all")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    model_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model_fn`` maps a dict of named parameter tensors to a scalar loss.
    Parameters are promoted to float64 so both sides of the comparison run
    at full precision through the same forward/backward code.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise ParameterError(f"epsilon must lie in [1e-5, 1e-2], got {epsilon}")
    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    loss = model_fn(leaves)
    if loss.data.size != 1:
        raise DimensionError("model_fn must return a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericError("model_fn produced a non-finite loss")
    backward(loss)
    analytic = {
        k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base[k]))
        for k in base
    }

    def eval_loss(values: Mapping[str, np.ndarray]) -> float:
        return model_fn({k: Tensor(v) for k, v in values.items()}).item()

    worst = 0.0
    for name, arr in base.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = eval_loss(base)
            flat[j] = orig - epsilon
            down = eval_loss(base)
            flat[j] = orig
            nflat[j] = (up - down) / (2.0 * epsilon)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
