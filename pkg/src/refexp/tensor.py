"""Minimal reverse-mode autodiff on numpy arrays.

A :class:`Tensor` wraps a float32 ndarray. While a :class:`Tape` is active,
every op appends a record (output, inputs, backward rule) in execution order,
so the record list is topologically sorted by construction. ``backward`` walks
the records in reverse and accumulates ``.grad`` arrays on every tensor that
the loss reaches. Outside a tape, ops just compute (inference mode).

float64 is supported only so the finite-difference oracle in the tests can
evaluate forwards at full precision; model state is always float32.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class ContractViolation(RuntimeError):
    """An op precondition was broken by the caller."""


_TAPES: list["Tape"] = []


class _Record:
    __slots__ = ("out", "inputs", "backward", "tape")

    def __init__(self, out, inputs, backward, tape):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered op records for one forward pass (define-by-run)."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.records)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Shaped float array plus an optional link into the active tape."""

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data), dtype=dtype)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # thin operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None:
        rec = _Record(out, inputs, backward_fn, tape)
        out.node = rec
        tape.records.append(rec)
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = False):
    """Add g into t.grad. own=True promises g is a freshly allocated array of
    the right dtype that the caller will not reuse, so it can be adopted
    without a defensive copy."""
    if t.grad is None:
        if own and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _const(value, like: Tensor) -> np.ndarray:
    return np.asarray(value, dtype=like.data.dtype)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """a + b. Shapes must match exactly, or b is a last-dim bias or a scalar."""
    if not isinstance(b, Tensor):
        out = Tensor(a.data + _const(b, a), dtype=a.data.dtype)

        def bw(g):
            _accum(a, g)

        return _record(out, (a,), bw)

    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape and b.shape[0] == a.shape[-1]):
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=a.data.dtype)

    def bw(g):
        _accum(a, g)
        _accum(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, dtype=a.data.dtype)

    def bw(g):
        _accum(a, -g, own=True)

    return _record(out, (a,), bw)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -b)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a python scalar or a same-shape tensor."""
    if not isinstance(b, Tensor):
        c = _const(b, a)
        out = Tensor(a.data * c, dtype=a.data.dtype)

        def bw(g):
            _accum(a, g * c, own=True)

        return _record(out, (a,), bw)

    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, dtype=a.data.dtype)

    def bw(g):
        _accum(a, g * b.data, own=True)
        _accum(b, g * a.data, own=True)

    return _record(out, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}")
    out = Tensor(a.data / b.data, dtype=a.data.dtype)

    def bw(g):
        _accum(a, g / b.data, own=True)
        _accum(b, -g * a.data / (b.data * b.data), own=True)

    return _record(out, (a, b), bw)


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), dtype=a.data.dtype)
    sign = np.sign(a.data)

    def bw(g):
        _accum(a, g * sign, own=True)

    return _record(out, (a,), bw)


def _minmax(a: Tensor, b, take_max: bool) -> Tensor:
    fn = np.maximum if take_max else np.minimum
    if not isinstance(b, Tensor):
        c = _const(b, a)
        out = Tensor(fn(a.data, c), dtype=a.data.dtype)
        mask = (a.data >= c) if take_max else (a.data <= c)

        def bw(g):
            _accum(a, g * mask, own=True)

        return _record(out, (a,), bw)

    if a.shape != b.shape:
        raise ShapeMismatch(f"{'maximum' if take_max else 'minimum'}: {a.shape} vs {b.shape}")
    out = Tensor(fn(a.data, b.data), dtype=a.data.dtype)
    # ties route the full gradient to the first operand
    mask = (a.data >= b.data) if take_max else (a.data <= b.data)

    def bw(g):
        _accum(a, g * mask, own=True)
        _accum(b, g * ~mask, own=True)

    return _record(out, (a, b), bw)


def maximum(a: Tensor, b) -> Tensor:
    return _minmax(a, b, take_max=True)


def minimum(a: Tensor, b) -> Tensor:
    return _minmax(a, b, take_max=False)


def concat_last(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ContractViolation("concat_last: empty input list")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatch(f"concat_last: {parts[0].shape} vs {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1), dtype=parts[0].data.dtype)
    widths = [p.shape[-1] for p in parts]

    def bw(g):
        off = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., off:off + w])
            off += w

    return _record(out, tuple(parts), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.data.dtype)
    old = a.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes), dtype=a.data.dtype)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _record(out, (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy(), dtype=a.data.dtype)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))

    return _record(out, (a,), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    if a.data.ndim != 2:
        raise ShapeMismatch(f"gather_rows expects 2-D input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], dtype=a.data.dtype)

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    return _record(out, (a,), bw)


def select_last(a: Tensor, i: int) -> Tensor:
    """a[..., i], keeping the leading axes."""
    out = Tensor(a.data[..., i], dtype=a.data.dtype)

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[..., i] = g
        _accum(a, acc)

    return _record(out, (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; ids is an integer ndarray."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractViolation("embedding ids must be integers")
    out = Tensor(table.data[ids], dtype=table.data.dtype)

    def bw(g):
        # scatter-add via a one-hot product; much faster than np.add.at here
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, table.shape[0]), dtype=table.data.dtype)
        onehot[np.arange(flat.size), flat] = 1.0
        _accum(table, onehot.T @ g.reshape(-1, table.shape[-1]), own=True)

    return _record(out, (table,), bw)


def dropout(a: Tensor, p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; disabled (identity) at the default p=0."""
    if p == 0.0:
        return a
    if rng is None:
        raise ContractViolation("dropout with p > 0 requires an rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = Tensor(a.data * keep, dtype=a.data.dtype)

    def bw(g):
        _accum(a, g * keep)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading batch axes follow numpy."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.data.dtype)

    def bw(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), own=True)
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape), own=True)

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, overflow-safe on both tails."""
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, dtype=a.data.dtype)

    def bw(g):
        _accum(a, g * (y * (1.0 - y)), own=True)

    return _record(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = Tensor(0.5 * x * (1.0 + t), dtype=a.data.dtype)

    def bw(g):
        du = _GELU_C * (1.0 + (3 * 0.044715) * x2)
        d = 0.5 * (1.0 + t) + (0.5 * x) * ((1.0 - t * t) * du)
        _accum(a, g * d, own=True)

    return _record(out, (a,), bw)


def softmax_lastaxis(a: Tensor) -> Tensor:
    """Rows over the last axis sum to 1; stabilized by max subtraction."""
    if a.shape[-1] < 1:
        raise ContractViolation("softmax over an empty axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, dtype=a.data.dtype)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot), own=True)

    return _record(out, (a,), bw)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-9) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    The row max is subtracted before taking moments, so a constant row
    cancels exactly and normalizes to exact zeros (eps guards the div).
    """
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine {gamma.shape}/{beta.shape} vs last dim {d}")
    xs = a.data - a.data.max(axis=-1, keepdims=True)
    xc = xs - xs.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.data.dtype))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, dtype=a.data.dtype)

    def bw(g):
        gh = g * gamma.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gh - m1 - xhat * m2), own=True)
        red = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=red), own=True)
        _accum(beta, g.sum(axis=red), own=True)

    return _record(out, (a, gamma, beta), bw)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def sum_(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), dtype=a.data.dtype)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), bw)


def mean_(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean(), dtype=a.data.dtype)

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.shape).copy())

    return _record(out, (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean softmax cross-entropy over rows whose target != ignore_index."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    live = targets != ignore_index
    n = int(live.sum())
    if n == 0:
        raise ContractViolation("cross_entropy: every target is ignore_index")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    safe_t = np.where(live, targets, 0)
    picked = x[np.arange(x.shape[0]), safe_t]
    loss = float(((lse - picked) * live).sum() / n)
    out = Tensor(np.asarray(loss, dtype=x.dtype), dtype=x.dtype)

    def bw(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(x.shape[0]), safe_t] -= 1.0
        p[~live] = 0.0
        scale = float(np.asarray(g).reshape(())) / n
        _accum(logits, scale * p.astype(x.dtype), own=True)

    return _record(out, (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw scores (numerically stable form)."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeMismatch(f"bce_with_logits: {logits.shape} vs targets {t.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(loss.mean(), dtype=x.dtype), dtype=x.dtype)
    n = x.size

    def bw(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        scale = float(np.asarray(g).reshape(())) / n
        _accum(logits, scale * (s - t).astype(x.dtype), own=True)

    return _record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor the scalar loss reaches.

    Gradients accumulate into existing ``.grad`` arrays, so callers clear
    parameter grads between steps (``AdamW.clear_grads``).
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node.tape is not tape:
        raise ContractViolation("loss is not a product of the given tape")
    # stale grads on intermediates from an aborted pass would corrupt sums
    for rec in tape.records:
        rec.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        if rec.out.grad is not None:
            rec.backward(rec.out.grad)


# ---------------------------------------------------------------------------
# optimizer: adaptive moments with decoupled weight decay
# ---------------------------------------------------------------------------

def optimizer_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                   step_index: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                   weight_decay: float = 0.0) -> None:
    """One AdamW update, in place on param/m/v. step_index starts at 1."""
    if step_index < 1:
        raise ContractViolation("step_index must be >= 1")
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** step_index)
    vhat = v / (1.0 - b2 ** step_index)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)


class AdamW:
    """Holds (m, v) state per named parameter; skips params the loss missed."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None):
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            optimizer_step(p.data, p.grad, self.m[name], self.v[name],
                           self.step_count, lr, self.betas, self.eps, self.weight_decay)

    def clear_grads(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        for name in self.params:
            self.m[name] = arrays[f"adam_m/{name}"].copy()
            self.v[name] = arrays[f"adam_v/{name}"].copy()
        self.step_count = step_count


# ---------------------------------------------------------------------------
# finite-difference gate
# ---------------------------------------------------------------------------

def finite_difference_grads(fn, inputs: list[np.ndarray], step: float = 1e-4) -> list[np.ndarray]:
    """Central differences of a scalar function, evaluated in float64.

    ``fn`` maps a list of float64 Tensors to a scalar Tensor; it is called
    with perturbed copies, two evaluations per input element.
    """
    grads = []
    for k, base in enumerate(inputs):
        base64 = base.astype(np.float64)
        g = np.zeros_like(base64)
        flat = base64.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _eval64(fn, inputs, k, base64)
            flat[i] = orig - step
            lo = _eval64(fn, inputs, k, base64)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def _eval64(fn, inputs, k, replaced):
    args = []
    for j, arr in enumerate(inputs):
        src = replaced if j == k else arr.astype(np.float64)
        args.append(Tensor(src.copy(), dtype=np.float64))
    return float(fn(args).data.reshape(()))


def gradcheck(fn, inputs: list[np.ndarray], step: float = 1e-4, tol: float = 1e-4) -> float:
    """Compare the tape gradient (float32 path) against the float64 oracle.

    Error per input tensor is max|analytic - fd| normalized by the largest
    finite-difference magnitude in that tensor (floored at 1e-6 so exactly
    zero gradients compare cleanly). Returns the worst error; raises if it
    exceeds tol.
    """
    tensors = [Tensor(arr.astype(np.float32)) for arr in inputs]
    with Tape() as tape:
        loss = fn(tensors)
    backward(loss, tape)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = finite_difference_grads(fn, inputs, step=step)
    worst = 0.0
    for an, fd in zip(analytic, numeric):
        denom = max(float(np.abs(fd).max(initial=0.0)), 1e-6)
        err = float(np.abs(an.astype(np.float64) - fd).max(initial=0.0)) / denom
        worst = max(worst, err)
    if worst > tol:
        raise AssertionError(f"gradcheck failed: relative error {worst:.3e} > {tol:.1e}")
    return worst
