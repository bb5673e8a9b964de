"""Dense float64 tensors with a reverse-mode gradient tape and Adam.

The model is small enough that everything runs at float64, which keeps the
finite-difference gradient checks tight. Operations record their local
gradient closures on the active :class:`Tape`; ``Tape.backward`` replays the
records in reverse order (recording order is already topological).
"""

from __future__ import annotations

import numpy as np

from .errors import KTGraphError


class ShapeError(KTGraphError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(KTGraphError):
    """A NaN or Inf appeared in a tensor value."""


class TapeError(KTGraphError):
    """Backward misuse: non-scalar loss or a second backward on one tape."""


class MissingGradError(KTGraphError):
    """An optimizer step was requested for a parameter without a gradient."""


class OracleError(KTGraphError):
    """gradient_check was handed a non-deterministic function."""


class Tensor:
    """A contiguous float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g)  # copy: g may alias another buffer
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data):
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


_ALLOCATOR_TUNED = False


def tune_allocator():
    """Keep freed large blocks in the heap instead of returning them to the OS.

    Training churns through many MB-sized arrays per step; with glibc's
    default mmap threshold each one costs a fresh page-fault round trip,
    which dominates runtime on small VMs. No-op where mallopt is missing.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of one forward pass, consumed by a single backward.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self._records = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Populate grads of every requires_grad ancestor of ``loss``.

        The records are replayed in exact reverse recording order. A constant
        loss (nothing recorded) is a no-op rather than an error; calling
        backward twice on the same tape is an error.
        """
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward")
        self.consumed = True
        loss.accumulate_grad(np.ones_like(loss.data))
        for pull in reversed(self._records):
            pull()


def _record(out, pull):
    """Attach a local-gradient closure to the active tape, if any."""
    tape = _ACTIVE_TAPE
    if tape is not None and out.requires_grad and not tape.consumed:
        tape._records.append(pull)


def _grad_of(t):
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def pull():
        g = _grad_of(out)
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, pull)
    return out


def add(a, b):
    """Elementwise sum; also supports the bias form [m,n] + [n]."""
    bias_add = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    if not bias_add and a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def pull():
        g = _grad_of(out)
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0) if bias_add else g)

    _record(out, pull)
    return out


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def pull():
        g = _grad_of(out)
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    _record(out, pull)
    return out


def mul(a, b):
    """Elementwise (Hadamard) product of equal-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def pull():
        g = _grad_of(out)
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    _record(out, pull)
    return out


def scale(a, c):
    """Multiply by a python float constant."""
    c = float(c)
    out = Tensor(a.data * c, requires_grad=a.requires_grad)

    def pull():
        if a.requires_grad:
            a.accumulate_grad(_grad_of(out) * c)

    _record(out, pull)
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    mask = x.data > 0.0  # relu'(0) defined as 0

    def pull():
        if x.requires_grad:
            x.accumulate_grad(_grad_of(out) * mask)

    _record(out, pull)
    return out


def sigmoid(x):
    # stable both directions: exp of a non-positive argument only
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s, requires_grad=x.requires_grad)

    def pull():
        if x.requires_grad:
            x.accumulate_grad(_grad_of(out) * s * (1.0 - s))

    _record(out, pull)
    return out


def tanh(x):
    t = np.tanh(x.data)
    out = Tensor(t, requires_grad=x.requires_grad)

    def pull():
        if x.requires_grad:
            x.accumulate_grad(_grad_of(out) * (1.0 - t * t))

    _record(out, pull)
    return out


_ELEMENTWISE = {
    "relu": (relu, 1),
    "sigmoid": (sigmoid, 1),
    "tanh": (tanh, 1),
    "add": (add, 2),
    "mul": (mul, 2),
    "sub": (sub, 2),
}


def elementwise(tag, *operands):
    """Dispatch an elementwise op by tag: relu, sigmoid, tanh, add, mul, sub."""
    try:
        fn, arity = _ELEMENTWISE[tag]
    except KeyError:
        raise ShapeError(f"unknown elementwise op tag: {tag!r}") from None
    if len(operands) != arity:
        raise ShapeError(f"{tag} expects {arity} operand(s), got {len(operands)}")
    return fn(*operands)


def concat_cols(tensors):
    """Concatenate 2-D tensors with equal row counts along columns."""
    rows = {t.data.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.data.ndim != 2 for t in tensors):
        raise ShapeError(f"concat_cols needs 2-D tensors with equal rows, got "
                         f"{[t.data.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1),
                 requires_grad=any(t.requires_grad for t in tensors))
    widths = [t.data.shape[1] for t in tensors]

    def pull():
        g = _grad_of(out)
        offset = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                t.accumulate_grad(g[:, offset:offset + w])
            offset += w

    _record(out, pull)
    return out


def take_rows(x, indices, assume_unique=False):
    """Gather rows of a 2-D tensor; used for embedding lookup and step slicing.

    ``assume_unique`` lets the backward scatter use plain fancy indexing,
    which is much faster than the duplicate-safe ``np.add.at``.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got shape {x.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"row index out of range for shape {x.data.shape}")
    out = Tensor(x.data[idx], requires_grad=x.requires_grad)

    def pull():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            if assume_unique:
                x.grad[idx] += _grad_of(out)
            else:
                np.add.at(x.grad, idx, _grad_of(out))

    _record(out, pull)
    return out


def total_sum(x):
    out = Tensor(np.asarray(x.data.sum()), requires_grad=x.requires_grad)

    def pull():
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, _grad_of(out).item()))

    _record(out, pull)
    return out


def mean(x):
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean()), requires_grad=x.requires_grad)

    def pull():
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, _grad_of(out).item() / n))

    _record(out, pull)
    return out


def dropout(x, rate, rng):
    """Inverted dropout; the caller only invokes this in training mode."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    factor = keep / (1.0 - rate)
    out = Tensor(x.data * factor, requires_grad=x.requires_grad)

    def pull():
        if x.requires_grad:
            x.accumulate_grad(_grad_of(out) * factor)

    _record(out, pull)
    return out


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy in stable logit form.

    ``labels`` is a constant {0,1} array of the same size as ``logits``.
    Stable form: max(x,0) - x*r + log1p(exp(-|x|)).
    """
    r = np.asarray(labels, dtype=np.float64).reshape(logits.data.shape)
    if not np.all((r == 0.0) | (r == 1.0)):
        raise ShapeError("labels must be binary")
    x = logits.data
    losses = np.maximum(x, 0.0) - x * r + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = Tensor(np.asarray(losses.mean()), requires_grad=logits.requires_grad)

    def pull():
        if logits.requires_grad:
            p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            logits.accumulate_grad(_grad_of(out).item() * (p - r) / n)

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# parameters and the optimizer
# ---------------------------------------------------------------------------

class Parameter:
    """A trainable tensor plus Adam moment buffers."""

    __slots__ = ("name", "value", "adam_m", "adam_v", "step_count")

    def __init__(self, name, data):
        self.name = name
        self.value = Tensor(data, requires_grad=True)
        self.adam_m = Tensor(np.zeros_like(self.value.data))
        self.adam_v = Tensor(np.zeros_like(self.value.data))
        self.step_count = 0

    @property
    def shape(self):
        return self.value.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def adam_step(params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Apply one decoupled-weight-decay Adam update and clear gradients.

    Decay multiplies values by (1 - lr*weight_decay) before the moment
    update, so gradients stay clean for finite-difference checks.
    """
    beta1, beta2 = betas
    for p in params:
        if p.value.grad is None:
            raise MissingGradError(f"parameter {p.name!r} has no gradient")
        g = p.value.grad
        if weight_decay != 0.0:
            p.value.data *= 1.0 - lr * weight_decay
        p.step_count += 1
        t = p.step_count
        p.adam_m.data *= beta1
        p.adam_m.data += (1.0 - beta1) * g
        p.adam_v.data *= beta2
        p.adam_v.data += (1.0 - beta2) * g * g
        m_hat = p.adam_m.data / (1.0 - beta1 ** t)
        v_hat = p.adam_v.data / (1.0 - beta2 ** t)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.value.zero_grad()


def zero_grads(params):
    for p in params:
        p.value.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def gradient_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``x``; the error
    per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("h must be positive")

    def run():
        out = f(x)
        if out.data.size != 1:
            raise TapeError("gradient_check needs a scalar-valued function")
        return out

    y1 = run().data.copy()
    y2 = run().data.copy()
    if not np.array_equal(y1, y2):
        raise OracleError("function is not deterministic: two evaluations disagree")

    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    try:
        with Tape() as tape:
            out = run()
        tape.backward(out)
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad = was
        x.zero_grad()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = run().data.item()
        flat[i] = orig - h
        f_minus = run().data.item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
