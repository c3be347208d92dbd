"""Reverse-mode automatic differentiation on rank-<=2 numpy arrays.

A Tensor wraps a 2-D float array, its gradient, and a link to the tape:
every op records a backward closure over its parents, and backward() runs
the closures in reverse topological order, accumulating gradients over
fan-out.  float32 is the working precision; building graphs from float64
arrays keeps everything in float64, which is what gradcheck uses.

The recurrent workhorse is gru_sequence, a single tape node that runs a
whole GRU pass in plain numpy and backpropagates through time by hand;
gru_cell is the equivalent one-step composition of primitives and doubles
as its correctness oracle.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True
_CHECK_FINITE = False


class AutodiffError(RuntimeError):
    pass


class ShapeMismatch(AutodiffError):
    pass


class IndexOutOfRange(AutodiffError):
    pass


class NonPositiveTemperature(AutodiffError):
    pass


class NonScalarLoss(AutodiffError):
    pass


class NonFiniteTensor(AutodiffError):
    pass


class no_grad:
    """Context manager that disables tape construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def set_check_finite(flag: bool) -> None:
    """Debug mode: raise NonFiniteTensor whenever an op produces NaN/Inf."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=None):
        if type(data) is np.ndarray and data.ndim == 2 and data.dtype.kind == "f" \
                and dtype is None:
            arr = data  # hot path: op results are always fresh 2-D float arrays
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE)
            arr = np.atleast_2d(arr)
            if arr.ndim > 2:
                raise ShapeMismatch(f"rank {arr.ndim} tensor; only rank <= 2 supported")
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteTensor("non-finite values in tensor")
        self.data = arr
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # light operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def backward(self):
        backward(self)


def _node(data, parents, back) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        out._parents = tuple(parents)
        out._backward = back
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum(keepdims=True).reshape(1, 1)
    if shape[0] == 1 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise ShapeMismatch(f"cannot reduce {g.shape} to {shape}")


def _broadcastable(sa, sb) -> bool:
    if sa == sb or sa == (1, 1) or sb == (1, 1):
        return True
    return sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"add {a.shape} vs {b.shape}")
    out = _node(a.data + b.data, (a, b), None)

    def back():
        _accum(a, _reduce_to(out.grad, a.shape))
        _accum(b, _reduce_to(out.grad, b.shape))

    out._backward = back if _GRAD_ENABLED else None
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"sub {a.shape} vs {b.shape}")
    out = _node(a.data - b.data, (a, b), None)

    def back():
        _accum(a, _reduce_to(out.grad, a.shape))
        _accum(b, _reduce_to(-out.grad, b.shape))

    out._backward = back if _GRAD_ENABLED else None
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"mul {a.shape} vs {b.shape}")
    out = _node(a.data * b.data, (a, b), None)

    def back():
        _accum(a, _reduce_to(out.grad * b.data, a.shape))
        _accum(b, _reduce_to(out.grad * a.data, b.shape))

    out._backward = back if _GRAD_ENABLED else None
    return out


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = _node(a.data * s, (a,), None)

    def back():
        _accum(a, out.grad * s)

    out._backward = back if _GRAD_ENABLED else None
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    out = _node(a.data @ b.data, (a, b), None)

    def back():
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    out._backward = back if _GRAD_ENABLED else None
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(a.data.T.copy(), (a,), None)

    def back():
        _accum(a, out.grad.T)

    out._backward = back if _GRAD_ENABLED else None
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = _node(y, (a,), None)

    def back():
        _accum(a, out.grad * (1.0 - y * y))

    out._backward = back if _GRAD_ENABLED else None
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # clipping keeps exp in range; sigmoid saturates well before +-60
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    out = _node(y, (a,), None)

    def back():
        _accum(a, out.grad * y * (1.0 - y))

    out._backward = back if _GRAD_ENABLED else None
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = _node(np.where(mask, a.data, 0.0), (a,), None)

    def back():
        _accum(a, out.grad * mask)

    out._backward = back if _GRAD_ENABLED else None
    return out


def concat_rows(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat_rows of nothing")
    if len({p.shape[1] for p in parts}) != 1:
        raise ShapeMismatch("concat_rows width mismatch")
    out = _node(np.vstack([p.data for p in parts]), parts, None)

    def back():
        r = 0
        for p in parts:
            _accum(p, out.grad[r:r + p.shape[0]])
            r += p.shape[0]

    out._backward = back if _GRAD_ENABLED else None
    return out


def concat_cols(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat_cols of nothing")
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeMismatch("concat_cols height mismatch")
    out = _node(np.hstack([p.data for p in parts]), parts, None)

    def back():
        c = 0
        for p in parts:
            _accum(p, out.grad[:, c:c + p.shape[1]])
            c += p.shape[1]

    out._backward = back if _GRAD_ENABLED else None
    return out


def gather_rows(table, ids) -> Tensor:
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexOutOfRange(f"row ids outside [0, {table.shape[0]})")
    out = _node(table.data[idx], (table,), None)

    def back():
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        _accum(table, g)

    out._backward = back if _GRAD_ENABLED else None
    return out


def repeat_rows(row, m: int) -> Tensor:
    row = _as_tensor(row)
    if row.shape[0] != 1:
        raise ShapeMismatch(f"repeat_rows needs a (1, n) row, got {row.shape}")
    out = _node(np.repeat(row.data, m, axis=0), (row,), None)

    def back():
        _accum(row, out.grad.sum(axis=0, keepdims=True))

    out._backward = back if _GRAD_ENABLED else None
    return out


def slice_rows(a, i0: int, i1: int) -> Tensor:
    a = _as_tensor(a)
    if not 0 <= i0 <= i1 <= a.shape[0]:
        raise IndexOutOfRange(f"rows [{i0}:{i1}] of {a.shape}")
    out = _node(a.data[i0:i1].copy(), (a,), None)

    def back():
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[i0:i1] += out.grad

    out._backward = back if _GRAD_ENABLED else None
    return out


def slice_cols(a, j0: int, j1: int) -> Tensor:
    a = _as_tensor(a)
    if not 0 <= j0 <= j1 <= a.shape[1]:
        raise IndexOutOfRange(f"cols [{j0}:{j1}] of {a.shape}")
    out = _node(a.data[:, j0:j1].copy(), (a,), None)

    def back():
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[:, j0:j1] += out.grad

    out._backward = back if _GRAD_ENABLED else None
    return out


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(a.data.sum().reshape(1, 1), (a,), None)

    def back():
        _accum(a, np.full_like(a.data, out.grad[0, 0]))

    out._backward = back if _GRAD_ENABLED else None
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    y = _softmax(a.data)
    out = _node(y, (a,), None)

    def back():
        g = out.grad
        _accum(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    out._backward = back if _GRAD_ENABLED else None
    return out


def log_softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = _node(ls, (a,), None)

    def back():
        g = out.grad
        _accum(a, g - np.exp(ls) * g.sum(axis=1, keepdims=True))

    out._backward = back if _GRAD_ENABLED else None
    return out


def cross_entropy(logits, targets, ignore_id=None) -> Tensor:
    """Mean negative log-softmax over the non-ignored rows.

    With every row ignored (or no rows at all) the loss is a constant 0
    with no gradient, so degenerate batches stay harmless.
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.size != logits.shape[0]:
        raise ShapeMismatch(f"{tgt.size} targets for {logits.shape[0]} rows")
    keep = np.ones(tgt.size, dtype=bool) if ignore_id is None else tgt != ignore_id
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        return Tensor(np.zeros((1, 1), dtype=logits.dtype))
    if tgt[kept].min() < 0 or tgt[kept].max() >= logits.shape[1]:
        raise IndexOutOfRange("target id outside logit width")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -ls[kept, tgt[kept]].mean()
    out = _node(np.array([[loss]], dtype=logits.dtype), (logits,), None)

    def back():
        g = np.zeros_like(logits.data)
        sm = np.exp(ls[kept])
        sm[np.arange(kept.size), tgt[kept]] -= 1.0
        g[kept] = sm / kept.size
        _accum(logits, g * out.grad[0, 0])

    out._backward = back if _GRAD_ENABLED else None
    return out


def gumbel_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """Standard Gumbel samples -log(-log u), u ~ U(0,1), clipped for safety."""
    u = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float, noise=None) -> Tensor:
    """softmax((logits + noise) / tau) for a (1, n) logits row.

    Soft relaxation only: the output stays a full probability row and is
    differentiable w.r.t. the logits.  Pass noise=None (or zeros) for the
    deterministic limit used in tests.
    """
    logits = _as_tensor(logits)
    if logits.shape[0] != 1:
        raise ShapeMismatch(f"gumbel_softmax expects a (1, n) row, got {logits.shape}")
    if not tau > 0:
        raise NonPositiveTemperature(f"tau = {tau}")
    if noise is None:
        noise_arr = np.zeros_like(logits.data)
    else:
        noise_arr = np.asarray(noise, dtype=logits.dtype).reshape(1, -1)
        if noise_arr.shape != logits.shape:
            raise ShapeMismatch(f"noise {noise_arr.shape} vs logits {logits.shape}")
    y = _softmax((logits.data + noise_arr) / tau)
    out = _node(y, (logits,), None)

    def back():
        g = out.grad
        _accum(logits, y * (g - (g * y).sum(axis=1, keepdims=True)) / tau)

    out._backward = back if _GRAD_ENABLED else None
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from a scalar loss."""
    if loss.shape != (1, 1):
        raise NonScalarLoss(f"loss has shape {loss.shape}")
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# --------------------------------------------------------------------------
# GRU: composed single step and fused full sequence
# --------------------------------------------------------------------------

class GruParams:
    """Packed GRU weights, gate order [update | reset | candidate]."""

    def __init__(self, W: Tensor, U: Tensor, b: Tensor):
        d3 = W.shape[1]
        if d3 % 3 or U.shape != (d3 // 3, d3) or b.shape != (1, d3):
            raise ShapeMismatch("inconsistent GRU parameter shapes")
        self.W = W
        self.U = U
        self.b = b

    @property
    def d_h(self) -> int:
        return self.U.shape[0]


def init_gru(params: "ParameterSet", prefix: str, d_in: int, d_h: int,
             rng: np.random.Generator) -> GruParams:
    """Register freshly initialized GRU weights under `prefix` and pack them."""
    W = params.add(f"{prefix}.W", (d_in, 3 * d_h), rng)
    U = params.add(f"{prefix}.U", (d_h, 3 * d_h), rng)
    b = params.zeros(f"{prefix}.b", (1, 3 * d_h))
    return GruParams(W, U, b)


def gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One GRU step from primitives: h' = (1-z) * h + z * candidate.

    The reset gate multiplies the recurrent term after the matmul
    (candidate = tanh(Wx + r * Uh + b) column block), and the update gate
    z weights the candidate.
    """
    d = p.d_h
    if x.shape[0] != 1 or h.shape != (1, d) or x.shape[1] != p.W.shape[0]:
        raise ShapeMismatch(f"gru_cell x{x.shape} h{h.shape}")
    xw = matmul(x, p.W)
    hu = matmul(h, p.U)
    z = sigmoid(add(add(slice_cols(xw, 0, d), slice_cols(hu, 0, d)),
                    slice_cols(p.b, 0, d)))
    r = sigmoid(add(add(slice_cols(xw, d, 2 * d), slice_cols(hu, d, 2 * d)),
                    slice_cols(p.b, d, 2 * d)))
    cand = tanh(add(add(slice_cols(xw, 2 * d, 3 * d),
                        mul(r, slice_cols(hu, 2 * d, 3 * d))),
                    slice_cols(p.b, 2 * d, 3 * d)))
    one = Tensor(np.ones((1, 1), dtype=x.dtype))
    return add(mul(sub(one, z), h), mul(z, cand))


@njit(cache=True)
def _gru_fwd_kernel(XWb, Ud, h0row, one):
    T = XWb.shape[0]
    d = Ud.shape[0]
    H = np.empty((T, d), dtype=XWb.dtype)
    Z = np.empty((T, d), dtype=XWb.dtype)
    R = np.empty((T, d), dtype=XWb.dtype)
    C = np.empty((T, d), dtype=XWb.dtype)
    HU = np.empty((T, 3 * d), dtype=XWb.dtype)
    h = h0row.copy()
    for t in range(T):
        hu = h @ Ud
        HU[t] = hu
        z = one / (one + np.exp(-(XWb[t, :d] + hu[:d])))
        r = one / (one + np.exp(-(XWb[t, d:2 * d] + hu[d:2 * d])))
        c = np.tanh(XWb[t, 2 * d:] + r * hu[2 * d:])
        h = (one - z) * h + z * c
        H[t] = h
        Z[t] = z
        R[t] = r
        C[t] = c
    return H, Z, R, C, HU


@njit(cache=True)
def _gru_fwd_nograd_kernel(XWb, Ud, h0row, one):
    T = XWb.shape[0]
    d = Ud.shape[0]
    H = np.empty((T, d), dtype=XWb.dtype)
    h = h0row.copy()
    for t in range(T):
        hu = h @ Ud
        z = one / (one + np.exp(-(XWb[t, :d] + hu[:d])))
        r = one / (one + np.exp(-(XWb[t, d:2 * d] + hu[d:2 * d])))
        c = np.tanh(XWb[t, 2 * d:] + r * hu[2 * d:])
        h = (one - z) * h + z * c
        H[t] = h
    return H


@njit(cache=True)
def _gru_bwd_kernel(g, H, Z, R, C, HU, h0row, Ud, one):
    T, d = H.shape
    UdT = Ud.T.copy()
    dXW = np.empty((T, 3 * d), dtype=g.dtype)
    dHU = np.empty((T, 3 * d), dtype=g.dtype)
    dh = np.zeros(d, dtype=g.dtype)
    for t in range(T - 1, -1, -1):
        if t > 0:
            hprev = H[t - 1]
        else:
            hprev = h0row
        z = Z[t]
        r = R[t]
        c = C[t]
        dht = g[t] + dh
        dz = dht * (c - hprev)
        dc = dht * z
        dcpre = dc * (one - c * c)
        hu_c = HU[t, 2 * d:]
        dr = dcpre * hu_c
        daz = dz * z * (one - z)
        dar = dr * r * (one - r)
        dXW[t, :d] = daz
        dXW[t, d:2 * d] = dar
        dXW[t, 2 * d:] = dcpre
        dHU[t, :d] = daz
        dHU[t, d:2 * d] = dar
        dHU[t, 2 * d:] = dcpre * r
        dh = dht * (one - z) + dHU[t] @ UdT
    return dXW, dHU, dh


def gru_sequence(X: Tensor, h0: Tensor, p: GruParams) -> Tensor:
    """Full GRU pass over X's rows as one tape node with hand-rolled BPTT.

    Equivalent to folding gru_cell over the rows of X (the test suite pins
    that equivalence) but far cheaper: the time loops run as compiled
    kernels, which is what makes the desk-scale training runs affordable.
    """
    d = p.d_h
    T = X.shape[0]
    if X.shape[1] != p.W.shape[0] or h0.shape != (1, d):
        raise ShapeMismatch(f"gru_sequence X{X.shape} h0{h0.shape}")
    Wd, Ud = p.W.data, p.U.data
    XWb = X.data @ Wd + p.b.data
    one = XWb.dtype.type(1.0)
    Ud = Ud.astype(XWb.dtype, copy=False)
    h0row = h0.data[0].astype(XWb.dtype, copy=False)
    if not _GRAD_ENABLED:
        return Tensor(_gru_fwd_nograd_kernel(XWb, Ud, h0row, one))
    H, Z, R, C, HU = _gru_fwd_kernel(XWb, Ud, h0row, one)
    out = _node(H, (X, h0, p.W, p.U, p.b), None)

    def back():
        g = out.grad.astype(XWb.dtype, copy=False)
        dXW, dHU, dh = _gru_bwd_kernel(g, H, Z, R, C, HU, h0row, Ud, one)
        hprev_rows = np.vstack((h0.data, H[:-1]))
        _accum(X, dXW @ Wd.T)
        _accum(h0, dh.reshape(1, d))
        _accum(p.W, X.data.T @ dXW)
        _accum(p.U, hprev_rows.T @ dHU)
        _accum(p.b, dXW.sum(axis=0, keepdims=True))

    out._backward = back
    return out


def additive_attention_rows(queries: Tensor, keys: Tensor, keys_proj: Tensor,
                            U: Tensor, v: Tensor, b: Tensor) -> Tensor:
    """Additive attention contexts for a batch of query rows, fused.

    Per query row q: m = tanh(keys_proj + qU + b); scores = m v; the
    context row is the score-softmax-weighted sum of the keys.  keys_proj
    is keys @ W precomputed once (itself on the tape, so W still trains).
    """
    k, d = queries.shape
    T = keys.shape[0]
    if keys_proj.shape != keys.shape or U.shape[0] != d or v.shape[1] != 1:
        raise ShapeMismatch("inconsistent attention shapes")
    Kd, KW, vd = keys.data, keys_proj.data, v.data[:, 0]
    Qp = queries.data @ U.data + b.data
    C = np.empty((k, Kd.shape[1]), dtype=Kd.dtype)
    Ms = np.empty((k, T, KW.shape[1]), dtype=Kd.dtype)
    A = np.empty((k, T), dtype=Kd.dtype)
    for i in range(k):
        m = np.tanh(KW + Qp[i])
        sc = m @ vd
        sc -= sc.max()
        e = np.exp(sc)
        a = e / e.sum()
        C[i] = a @ Kd
        if _GRAD_ENABLED:
            Ms[i] = m
            A[i] = a
    if not _GRAD_ENABLED:
        return Tensor(C)
    out = _node(C, (queries, keys, keys_proj, U, v, b), None)

    def back():
        g = out.grad
        dKW = np.zeros_like(KW)
        dkeys = np.zeros_like(Kd)
        dv = np.zeros_like(vd)
        dQp = np.empty_like(Qp)
        for i in range(k):
            a, m = A[i], Ms[i]
            da = g[i] @ Kd.T
            dkeys += np.outer(a, g[i])
            dsc = a * (da - (da * a).sum())
            dm = np.outer(dsc, vd)
            dv += m.T @ dsc
            dmpre = dm * (1.0 - m * m)
            dKW += dmpre
            dQp[i] = dmpre.sum(axis=0)
        _accum(queries, dQp @ U.data.T)
        _accum(keys, dkeys)
        _accum(keys_proj, dKW)
        _accum(U, queries.data.T @ dQp)
        _accum(v, (dv).reshape(-1, 1))
        _accum(b, dQp.sum(axis=0, keepdims=True))

    out._backward = back
    return out


# --------------------------------------------------------------------------
# Parameters and optimizer
# --------------------------------------------------------------------------

class ParameterSet:
    """Named parameter tensors with stable iteration order.

    Initialization draws from the generator in add() call order, which is
    what makes whole runs reproducible from a single seed.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape, rng: np.random.Generator, scale=None) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter {name!r}")
        s = scale if scale is not None else 1.0 / np.sqrt(max(1, shape[0]))
        data = ((rng.random(shape) * 2.0 - 1.0) * s).astype(self.dtype)
        t = Tensor(data)
        self._params[name] = t
        return t

    def zeros(self, name: str, shape) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter {name!r}")
        t = Tensor(np.zeros(shape, dtype=self.dtype))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            t.data = snap[k].astype(self.dtype, copy=True)


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: ParameterSet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape for {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        self.params.zero_grad()


def gradcheck(fn, inputs, h: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    fn rebuilds a scalar-valued graph from the given tensors each call; it
    may also close over them (module parameters work fine), since the
    checker perturbs coordinates in place and restores them.  Use float64
    tensors for meaningful precision.  Relative error per coordinate is
    |a - n| / max(1e-8, |a|, |n|).
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = fn(*inputs).item()
            t.data[idx] = orig - h
            fm = fn(*inputs).item()
            t.data[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(a[idx] - numeric) / max(1e-8, abs(a[idx]), abs(numeric))
            worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------
# Flat binary serialization (checkpoint blob format)
# --------------------------------------------------------------------------

def manifest_entries(params: ParameterSet) -> list[dict]:
    """Per-parameter {name, shape, offset} with byte offsets into the blob."""
    entries = []
    offset = 0
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.data.size * 4
    return entries


def params_to_blob(params: ParameterSet) -> bytes:
    return b"".join(t.data.astype("<f4").tobytes() for t in params.tensors())


def params_from_blob(params: ParameterSet, blob: bytes) -> None:
    offset = 0
    for name, t in params.items():
        nbytes = t.data.size * 4
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"blob truncated at parameter {name!r}")
        t.data = np.frombuffer(chunk, dtype="<f4").reshape(t.shape).astype(params.dtype)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{len(blob) - offset} trailing bytes in blob")
