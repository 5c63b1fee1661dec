"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 by default, float32 selectable) and every
primitive records itself on the active tape when any input requires a
gradient.  Without an active tape the primitives run as plain numpy calls,
which is the inference fast path.  Elementwise binary ops demand exactly
matching shapes; the only implicit broadcast is scalar-times-tensor.  Every
op output is checked for NaN/Inf and raises `NonFiniteError` on violation.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "matvec",
    "outer",
    "slice_last",
    "slice_axis0",
    "concat_last",
    "sum_all",
    "sum_last",
    "log",
    "exp",
    "softmax",
    "sigmoid",
    "relu",
    "softplus",
    "layer_norm",
    "clamp_min",
    "add_rowvec",
    "gather_rows",
    "repeat_last",
    "tile_leading",
    "reshape",
    "copy_tensor",
    "stop_gradient",
    "finite_diff_check",
]

_node_ids = itertools.count()

DTYPES = {"f64": np.float64, "f32": np.float32}

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """A dense array with an id for tape bookkeeping.

    `data` is treated as immutable once the tensor participates in any op;
    nothing in this module writes to it in place.
    """

    __slots__ = ("data", "requires_grad", "node_id", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if not _all_finite(arr):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar used mainly by tests; the model code calls the
    # module-level primitives directly.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


_CURRENT_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive ops, replayed in reverse by `backward`.

    Use as a context manager; ops executed inside record themselves when any
    input requires a gradient.  A tape is single-threaded; run one tape per
    concurrent evaluation.
    """

    def __init__(self):
        # each record: (output id, input ids, vjp(g) -> per-input grads)
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._watched: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        global _CURRENT_TAPE
        if _CURRENT_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _CURRENT_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _CURRENT_TAPE
        _CURRENT_TAPE = None
        return False

    def watch(self, tensor: Tensor) -> None:
        """Register a leaf so `backward` reports a gradient for it."""
        if not tensor.is_leaf:
            raise ValueError("only leaf tensors can be watched")
        tensor.requires_grad = True
        self._watched[tensor.node_id] = tensor

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss.

        Returns a map node_id -> gradient tensor covering every watched leaf;
        leaves unreachable from the loss get exact zeros.
        """
        if loss.data.ndim != 0:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if not self._records:
            raise RuntimeError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones((), dtype=loss.data.dtype)
        }
        for out_id, input_ids, vjp in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for node_id, piece in zip(input_ids, vjp(g)):
                if piece is None:
                    continue
                acc = grads.get(node_id)
                grads[node_id] = piece if acc is None else acc + piece
        result: dict[int, Tensor] = {}
        for node_id, leaf in self._watched.items():
            g = grads.get(node_id)
            if g is None:
                g = np.zeros_like(leaf.data)
            if g.shape != leaf.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match leaf {leaf.data.shape}"
                )
            result[node_id] = Tensor(g)
        return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(arr: np.ndarray) -> bool:
    # cheap single-pass screen: the sum is non-finite whenever any element
    # is; a non-finite sum from benign overflow is re-examined elementwise
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return True
    return bool(np.all(np.isfinite(arr)))


def _finish(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, guard finiteness, and record on the active tape."""
    if not _all_finite(out):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.node_id = next(_node_ids)
    result.requires_grad = False
    result.is_leaf = True
    tape = _CURRENT_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.is_leaf = False
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                tape._watched.setdefault(t.node_id, t)
        tape._records.append(
            (result.node_id, tuple(t.node_id for t in inputs), vjp)
        )
    return result


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a scalar (0-d or python float)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 0 and b.data.ndim != 0:
        _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if ad.ndim == 0 and g.ndim != 0:
            ga = ga.sum()
        if bd.ndim == 0 and g.ndim != 0:
            gb = gb.sum()
        return ga, gb

    return _finish("mul", ad * bd, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python-float constant (not differentiated through c)."""
    a = _as_tensor(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    ad, bd = a.data, b.data
    return _finish(
        "matmul",
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T, ad.T @ g),
    )


def matvec(a, v) -> Tensor:
    """Stacked matrix-vector product: (..., m, n) x (..., n) -> (..., m)."""
    a, v = _as_tensor(a), _as_tensor(v)
    if (
        a.data.ndim < 2
        or a.data.shape[:-2] != v.data.shape[:-1]
        or a.data.shape[-1] != v.data.shape[-1]
    ):
        raise ShapeError(
            f"matvec: incompatible shapes {a.data.shape} and {v.data.shape}"
        )
    ad, vd = a.data, v.data

    def vjp(g):
        ga = g[..., :, None] * vd[..., None, :]
        gv = np.matmul(np.swapaxes(ad, -1, -2), g[..., None])[..., 0]
        return ga, gv

    return _finish("matvec", np.matmul(ad, vd[..., None])[..., 0], (a, v), vjp)


def outer(u, v) -> Tensor:
    """Stacked outer product: (..., m) x (..., n) -> (..., m, n)."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.shape[:-1] != v.data.shape[:-1]:
        raise ShapeError(
            f"outer: leading shapes {u.data.shape} and {v.data.shape} differ"
        )
    ud, vd = u.data, v.data

    def vjp(g):
        gu = np.matmul(g, vd[..., None])[..., 0]
        gv = np.matmul(np.swapaxes(g, -1, -2), ud[..., None])[..., 0]
        return gu, gv

    return _finish("outer", ud[..., :, None] * vd[..., None, :], (u, v), vjp)


# ---------------------------------------------------------------------------
# shape ops


def slice_last(a, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    a = _as_tensor(a)
    n = a.data.shape[-1]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for {n}")
    ad = a.data

    def vjp(g):
        full = np.zeros_like(ad)
        full[..., start:stop] = g
        return (full,)

    return _finish("slice_last", ad[..., start:stop].copy(), (a,), vjp)


def slice_axis0(a, start: int, stop: int) -> Tensor:
    """Slice along the first axis (row slice)."""
    a = _as_tensor(a)
    n = a.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_axis0: [{start}:{stop}] out of range for {n}")
    ad = a.data

    def vjp(g):
        full = np.zeros_like(ad)
        full[start:stop] = g
        return (full,)

    return _finish("slice_axis0", ad[start:stop].copy(), (a,), vjp)


def concat_last(parts: Iterable) -> Tensor:
    """Concatenate along the last axis."""
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat_last: empty input list")
    lead = ts[0].data.shape[:-1]
    for t in ts:
        if t.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading shapes differ, {t.data.shape[:-1]} vs {lead}"
            )
    widths = [t.data.shape[-1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            g[..., offsets[i]: offsets[i + 1]] for i in range(len(widths))
        )

    return _finish(
        "concat_last",
        np.concatenate([t.data for t in ts], axis=-1),
        tuple(ts),
        vjp,
    )


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    return _finish(
        "reshape",
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(old),),
    )


def repeat_last(a, n: int) -> Tensor:
    """Explicitly tile a trailing singleton axis: (..., 1) -> (..., n)."""
    a = _as_tensor(a)
    if a.data.shape[-1] != 1:
        raise ShapeError(f"repeat_last: last axis must be 1, got {a.data.shape}")
    return _finish(
        "repeat_last",
        np.repeat(a.data, n, axis=-1),
        (a,),
        lambda g: (g.sum(axis=-1, keepdims=True),),
    )


def tile_leading(a, n: int) -> Tensor:
    """Prepend an axis of length n by tiling: (...) -> (n, ...)."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    return _finish("tile_leading", out, (a,), lambda g: (g.sum(axis=0),))


def copy_tensor(a) -> Tensor:
    """Identity with fresh storage; gradients pass through unchanged."""
    a = _as_tensor(a)
    return _finish("copy", a.data.copy(), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _finish(
        "sum_all",
        ad.sum(),
        (a,),
        lambda g: (np.broadcast_to(g, ad.shape).copy(),),
    )


def sum_last(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _finish(
        "sum_last",
        ad.sum(axis=-1),
        (a,),
        lambda g: (np.broadcast_to(g[..., None], ad.shape).copy(),),
    )


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _finish("log", out, (a,), lambda g: (g / ad,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is zero where the floor binds."""
    a = _as_tensor(a)
    ad = a.data
    mask = ad > floor
    return _finish(
        "clamp_min",
        np.maximum(ad, floor),
        (a,),
        lambda g: (g * mask,),
    )


def softmax(a) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _finish("softmax", out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))
    # keep the output in the open interval (0, 1) even for huge inputs
    tiny = np.nextafter(a.data.dtype.type(0), a.data.dtype.type(1))
    high = np.nextafter(a.data.dtype.type(1), a.data.dtype.type(0))
    out = np.clip(out, tiny, high)
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    mask = ad > 0
    return _finish("relu", np.maximum(ad, 0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), the smooth rectifier used for gradient checking."""
    a = _as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype)
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-ad))
    return _finish("softplus", out, (a,), lambda g: (g * sig,))


def layer_norm(x, gain, bias) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({n},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else (g * xhat)
        dbias = g.sum(axis=lead) if lead else g
        gh = g * gd
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        dx = (gh - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _finish("layer_norm", out, (x, gain, bias), vjp)


def add_rowvec(a, b) -> Tensor:
    """Add a (n,) vector to every row of (..., n); the fused bias add."""
    a, b = _as_tensor(a), _as_tensor(b)
    n = a.data.shape[-1]
    if b.data.shape != (n,):
        raise ShapeError(
            f"add_rowvec: bias shape {b.data.shape} does not match last axis {n}"
        )

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        return g, (g.sum(axis=lead) if lead else g)

    return _finish("add_rowvec", a.data + b.data, (a, b), vjp)


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-D table by integer index; grads scatter-add back."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.data.shape}")
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table with "
            f"{table.data.shape[0]} rows"
        )
    td = table.data

    def vjp(g):
        full = np.zeros_like(td)
        np.add.at(full, idx, g)
        return (full,)

    return _finish("gather_rows", td[idx].copy(), (table,), vjp)


def stop_gradient(x) -> Tensor:
    """Forward identity whose backward contribution is zero."""
    x = _as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.node_id = next(_node_ids)
    out.requires_grad = False
    out.is_leaf = True
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of f against central finite differences.

    `f` must rebuild its computation from `params` on every call.  Returns
    the worst |analytic - numeric| / max(1, |numeric|) over all parameter
    components.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        for p in params.values():
            tape.watch(p)
        loss = f(params)
        grads = tape.backward(loss)
    worst = 0.0
    for name, p in params.items():
        analytic = grads[p.node_id].data.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(params).data)
            flat[i] = orig - eps
            f_minus = float(f(params).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
