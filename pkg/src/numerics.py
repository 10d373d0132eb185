"""
Dense tensors and tape-based reverse-mode differentiation over numpy.

Every operator accepts optional leading batch axes; matrix operators act on the
last two axes. While a ComputationTape is active on the current thread, each
operator whose inputs require gradients records an adjoint on it.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import Config
from src.errors import ContractError, DimensionError, IsolatedVertexError, NonFiniteError

DEFAULT_DTYPE = np.dtype(Config.FLOAT_DTYPE)


class Tensor:
    """Immutable n-dimensional array of reals."""
    __slots__ = ('_data', 'requires_grad', 'name')
    __array_ufunc__ = None  # numpy scalars defer to our operators

    def __init__(self, data, requires_grad: bool = False, name: str = None):
        arr = np.array(data, dtype=DEFAULT_DTYPE)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> 'Tensor':
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DEFAULT_DTYPE)
        if arr.flags.writeable:
            arr.flags.writeable = False
        out._data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}.")
        return float(self._data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A learnable tensor. Its value is replaced (never mutated) by the optimizer between batches."""
    __slots__ = ()

    def __init__(self, data, name: str = None):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, value) -> None:
        arr = np.array(value, dtype=DEFAULT_DTYPE)
        if arr.shape != self._data.shape:
            raise DimensionError(f"Cannot assign shape {arr.shape} to parameter {self.name} of shape {self.shape}.")
        arr.flags.writeable = False
        self._data = arr


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    adjoint: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional['ComputationTape']:
    tapes = _stack()
    return tapes[-1] if tapes else None


class ComputationTape:
    """
    Ordered record of primitive operations. Use as a context manager; a tape
    belongs to the thread that entered it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)


class no_grad:
    """Suspends recording on the current thread (inference and finite differences)."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


def _emit(value: np.ndarray, op: str, inputs: Tuple[Tensor, ...], adjoint) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, needs)
    if needs:
        tape.records.append(_Record(op, out, inputs, adjoint))
    return out


def backward(tape: ComputationTape, loss: Tensor,
             params: Union[Mapping[str, Tensor], Sequence[Tensor]]) -> Dict:
    """
    Replay adjoints in reverse recording order.

    Returns d(loss)/d(p) for every requested parameter, keyed like `params`
    (names for a mapping, positions for a sequence). Parameters the loss does
    not depend on get exact zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}.")

    adj = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = adj.get(id(rec.output))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            adj[key] = adj[key] + gi if key in adj else gi

    items = params.items() if isinstance(params, Mapping) else enumerate(params)
    grads = {}
    for key, p in items:
        g = adj.get(id(p))
        grads[key] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DEFAULT_DTYPE).reshape(p.shape)
    return grads


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform.") from None


def check_finite(t: Union[Tensor, np.ndarray], label: str) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"Non-finite values in {label}.")


# ---------------------------------------------------------------------------
# Elementwise and structural operators
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, 'add', (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, 'sub', (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')
    ad, bd = a.data, b.data
    return _emit(ad * bd, 'mul', (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, 'scale', (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform.")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not conform.") from None
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(ad @ bd, 'matmul', (a, b), adjoint)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenation [a || b || ...]; along columns by default."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat: nothing to concatenate.")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform on axis {axis}.")
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit(np.concatenate([t.data for t in ts], axis=ax), 'concat', ts,
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("stack: nothing to stack.")
    for t in ts:
        if t.shape != ts[0].shape:
            raise DimensionError(f"stack: shapes {ts[0].shape} and {t.shape} differ.")
    ax = axis % (ts[0].ndim + 1)
    return _emit(np.stack([t.data for t in ts], axis=ax), 'stack', ts,
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))


def transpose(a, axes: Sequence[int] = None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need at least 2 axes, got shape {a.shape}.")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), 'transpose', (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}.") from None
    return _emit(value, 'reshape', (a,), lambda g: (g.reshape(original),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    original = a.shape

    def adjoint(g):
        ga = np.zeros(original, dtype=g.dtype)
        np.add.at(ga, key, g)
        return (ga,)

    return _emit(a.data[key], 'getitem', (a,), adjoint)


def detach(a) -> Tensor:
    """Same values, no gradient path."""
    a = as_tensor(a)
    return Tensor._wrap(a.data, False)


def total(a) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    a = as_tensor(a)
    original = a.shape
    return _emit(np.asarray(a.data.sum()), 'sum', (a,),
                 lambda g: (np.broadcast_to(g, original).copy(),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _emit(np.abs(a.data), 'abs', (a,), lambda g: (g * sign,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(y, 'sigmoid', (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, 'tanh', (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """x for x > 0, slope * x for x <= 0. The derivative at exactly 0 is `slope`."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}.")
    a = as_tensor(a)
    d = np.where(a.data > 0, 1.0, slope)
    return _emit(a.data * d, 'leaky_relu', (a,), lambda g: (g * d,))


# ---------------------------------------------------------------------------
# Neighbor-support operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SupportIndex:
    """
    Edge lists of an N x N boolean support, row-major, with a column grouping.

    Every row and every column must be nonempty; neighbor sets that contain
    the vertex itself always satisfy this.
    """
    mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    row_starts: np.ndarray
    col_order: np.ndarray
    col_starts: np.ndarray

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    @property
    def nnz(self) -> int:
        return len(self.rows)

    @classmethod
    def from_mask(cls, mask) -> 'SupportIndex':
        mask = np.array(mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise DimensionError(f"Support must be square, got shape {mask.shape}.")
        empty_rows = np.flatnonzero(~mask.any(axis=1))
        empty_cols = np.flatnonzero(~mask.any(axis=0))
        if len(empty_rows) or len(empty_cols):
            raise IsolatedVertexError(
                f"Support has empty rows {empty_rows.tolist()} / columns {empty_cols.tolist()}; "
                f"add self-loops before propagating.")
        n = mask.shape[0]
        rows, cols = np.nonzero(mask)
        col_order = np.argsort(cols, kind='stable')
        mask.flags.writeable = False
        return cls(
            mask=mask,
            rows=rows,
            cols=cols,
            row_starts=np.searchsorted(rows, np.arange(n)),
            col_order=col_order,
            col_starts=np.searchsorted(cols[col_order], np.arange(n)),
        )


def masked_row_softmax(scores, support) -> Tensor:
    """
    Softmax of each row over its support (last axis); exactly zero elsewhere.

    `support` is a boolean N x N mask or a SupportIndex. Uses max-subtraction,
    so adding a constant to the in-support scores of a row changes nothing.
    """
    scores = as_tensor(scores)
    mask = support.mask if isinstance(support, SupportIndex) else np.asarray(support, dtype=bool)
    if scores.shape[-2:] != mask.shape:
        raise DimensionError(f"masked_row_softmax: scores {scores.shape} vs support {mask.shape}.")
    empty = np.flatnonzero(~mask.any(axis=-1))
    if len(empty):
        raise IsolatedVertexError(f"Rows {empty.tolist()} have an empty support.")

    s = np.where(mask, scores.data, -np.inf)
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) is exactly 0 off support
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, 'masked_row_softmax', (scores,), adjoint)


def propagate(a, x, support: SupportIndex) -> Tensor:
    """
    One diffusion hop over neighbor lists: out[i] = sum_{j in NB(i)} a[i, j] * x[j].

    `a` is (..., N, N) and only read on the support; `x` is (..., N, K).
    Cost is O(nnz * K) per batch element.
    """
    a, x = as_tensor(a), as_tensor(x)
    n = support.n
    if a.shape[-2:] != (n, n) or x.ndim < 2 or x.shape[-2] != n:
        raise DimensionError(f"propagate: matrix {a.shape}, signal {x.shape}, support {n}x{n}.")
    rows, cols = support.rows, support.cols
    ad, xd = a.data, x.data
    w = ad[..., rows, cols]
    x_cols = xd[..., cols, :]
    out = np.add.reduceat(w[..., None] * x_cols, support.row_starts, axis=-2)

    def adjoint(g):
        g_rows = g[..., rows, :]
        batch = np.broadcast_shapes(ad.shape[:-2], g.shape[:-2])
        ga = np.zeros(batch + (n, n), dtype=g.dtype)
        ga[..., rows, cols] = (g_rows * x_cols).sum(axis=-1)
        contrib = (w[..., None] * g_rows)[..., support.col_order, :]
        gx = np.add.reduceat(contrib, support.col_starts, axis=-2)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gx, xd.shape)

    return _emit(out, 'propagate', (a, x), adjoint)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Mapping[str, Parameter], step: float = 1e-6,
                            max_coords: int = None, seed: int = 0, floor: float = 1e-4) -> float:
    """
    Compare backward() against central differences (f(p+h) - f(p-h)) / 2h.

    `f` rebuilds the scalar loss from the current parameter values. Returns the
    worst |analytic - numeric| / max(|analytic|, |numeric|, floor) over the
    checked coordinates (all of them, or `max_coords` sampled per parameter).
    Points where f has a kink (LeakyReLU or |x| at exactly 0) are not
    differentiable and must be avoided by the caller.
    """
    with ComputationTape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        base = p.numpy()
        flat_count = base.size
        coords = np.arange(flat_count)
        if max_coords is not None and flat_count > max_coords:
            coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
        for c in coords:
            idx = np.unravel_index(c, base.shape)
            bumped = base.copy()
            with no_grad():
                bumped[idx] = base[idx] + step
                p.assign(bumped)
                up = f().item()
                bumped[idx] = base[idx] - step
                p.assign(bumped)
                down = f().item()
            p.assign(base)
            numeric = (up - down) / (2.0 * step)
            exact = float(analytic[name][idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if err > worst:
                worst = err
                logging.debug(f"[GRADCHECK] {name}{idx}: analytic={exact:.6e} numeric={numeric:.6e} err={err:.2e}")
    return worst
