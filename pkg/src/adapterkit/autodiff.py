"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is exactly what the transformer encoder and the adapter
training loop need: matrix products, bias adds, four activations, row
softmax, layer normalization, embedding lookup, first-position pooling,
column slicing/concatenation for attention heads, and two losses.

Gradients are recorded on an explicit :class:`Tape`. A primitive appends a
record only while a tape is active *and* at least one input is tracked
(requires gradient, or was itself produced on the active tape), so plain
inference never pays for bookkeeping. Records are appended in execution
order, which makes the tape topologically sorted by construction; the
backward pass is a single reverse sweep that visits each record once.

Conventions:

- everything is float64; NaN/Inf out of any primitive raises immediately
- layer_norm maps a row with variance below epsilon to all-zero normalized
  values, i.e. the output is beta on that row (no division blowup)
- gelu is the exact Gaussian-CDF form ``x * Phi(x)``, so gelu'(0) = 0.5
- swish is ``x * sigmoid(x)``
"""

import numpy as np
from scipy.special import erf

from .errors import GradientError, NonFiniteError, ShapeMismatchError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array, optionally marked as a trainable leaf."""

    __slots__ = ("data", "requires_grad", "_tape", "_producer")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._producer = None

    @property
    def shape(self):
        return self.data.shape

    def is_leaf(self):
        return self._producer is None

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._producer is not None:
            flags.append(f"from {self._producer.kind}")
        suffix = f" ({', '.join(flags)})" if flags else ""
        return f"Tensor(shape={self.shape}{suffix})"


def tensor(data, requires_grad=False):
    """Build a leaf tensor from array-like data."""
    return Tensor(data, requires_grad=requires_grad)


class TapeRecord:
    """One primitive application: kind, inputs, output, backward rule.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per
    input; saved intermediates live in the closure.
    """

    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications, used as a context manager."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must nest"
        return False


_ACTIVE_TAPES = []


def _active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _tracked(t, tape):
    return t.requires_grad or t._tape is tape


def _finish(kind, inputs, out_data, backward_fn):
    """Wrap a primitive result: finiteness check plus optional recording."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out._tape = None
    out._producer = None
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        rec = TapeRecord(kind, tuple(inputs), out, backward_fn)
        tape.records.append(rec)
        out._tape = tape
        out._producer = rec
    return out


def _require_rank(kind, t, rank):
    if t.data.ndim != rank:
        raise ShapeMismatchError(f"{kind}: expected rank-{rank} operand, got shape {t.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    _require_rank("matmul", a, 2)
    _require_rank("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    out = a_data @ b_data

    def backward_fn(g):
        return [g @ b_data.T, a_data.T @ g]

    return _finish("matmul", [a, b], out, backward_fn)


def transpose(x):
    _require_rank("transpose", x, 2)

    def backward_fn(g):
        return [np.ascontiguousarray(g.T)]

    return _finish("transpose", [x], np.ascontiguousarray(x.data.T), backward_fn)


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} + {b.shape}")

    def backward_fn(g):
        return [g, g]

    return _finish("add", [a, b], a.data + b.data, backward_fn)


def add_bias(x, bias):
    """Add a length-n bias vector to every row of an m-by-n tensor."""
    _require_rank("add_bias", x, 2)
    _require_rank("add_bias", bias, 1)
    if x.shape[1] != bias.shape[0]:
        raise ShapeMismatchError(f"add_bias: {x.shape} + {bias.shape}")

    def backward_fn(g):
        return [g, g.sum(axis=0)]

    return _finish("add_bias", [x, bias], x.data + bias.data, backward_fn)


def scale(x, factor):
    """Multiply by a python float."""
    factor = float(factor)
    if not np.isfinite(factor):
        raise NonFiniteError("scale: factor must be finite")

    def backward_fn(g):
        return [factor * g]

    return _finish("scale", [x], factor * x.data, backward_fn)


def relu(x):
    mask = x.data > 0.0

    def backward_fn(g):
        return [g * mask]

    return _finish("relu", [x], np.where(mask, x.data, 0.0), backward_fn)


def gelu(x):
    """Exact-CDF gelu: x * Phi(x) with Phi the standard normal CDF."""
    x_data = x.data
    cdf = 0.5 * (1.0 + erf(x_data * _INV_SQRT2))

    def backward_fn(g):
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT_2PI
        return [g * (cdf + x_data * pdf)]

    return _finish("gelu", [x], x_data * cdf, backward_fn)


def swish(x):
    x_data = x.data
    sig = 1.0 / (1.0 + np.exp(-x_data))

    def backward_fn(g):
        return [g * (sig + x_data * sig * (1.0 - sig))]

    return _finish("swish", [x], x_data * sig, backward_fn)


def tanh(x):
    t = np.tanh(x.data)

    def backward_fn(g):
        return [g * (1.0 - t * t)]

    return _finish("tanh", [x], t, backward_fn)


def softmax_rows(x):
    """Row-wise softmax of a rank-2 tensor (stable, shifted by the row max)."""
    _require_rank("softmax_rows", x, 2)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return [y * (g - dot)]

    return _finish("softmax_rows", [x], y, backward_fn)


def layer_norm(x, gamma, beta, epsilon):
    """Normalize each row over its features, then scale and shift.

    Rows whose variance falls below epsilon normalize to zero, so the
    output on such rows is exactly beta.
    """
    _require_rank("layer_norm", x, 2)
    _require_rank("layer_norm", gamma, 1)
    _require_rank("layer_norm", beta, 1)
    epsilon = float(epsilon)
    if epsilon <= 0.0:
        raise ValueError("layer_norm: epsilon must be > 0")
    n = x.shape[1]
    if gamma.shape[0] != n or beta.shape[0] != n:
        raise ShapeMismatchError(
            f"layer_norm: x {x.shape} with gamma {gamma.shape}, beta {beta.shape}"
        )
    x_data = x.data
    mean = x_data.mean(axis=1, keepdims=True)
    var = x_data.var(axis=1, keepdims=True)
    live = var >= epsilon
    inv_std = np.where(live, 1.0 / np.sqrt(var + epsilon), 0.0)
    x_hat = (x_data - mean) * inv_std  # zero on constant (dead) rows
    out = x_hat * gamma.data + beta.data
    gamma_data = gamma.data

    def backward_fn(g):
        dx_hat = g * gamma_data
        # per-row: dx = inv_std * (dx_hat - mean(dx_hat) - x_hat * mean(dx_hat * x_hat))
        m1 = dx_hat.mean(axis=1, keepdims=True)
        m2 = (dx_hat * x_hat).mean(axis=1, keepdims=True)
        dx = inv_std * (dx_hat - m1 - x_hat * m2)
        dgamma = (g * x_hat).sum(axis=0)
        dbeta = g.sum(axis=0)
        return [dx, dgamma, dbeta]

    return _finish("layer_norm", [x, gamma, beta], out, backward_fn)


def embedding_lookup(table, ids):
    """Gather rows of a vocab-by-dim table by integer id."""
    _require_rank("embedding_lookup", table, 2)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatchError(f"embedding_lookup: ids must be a flat sequence, got shape {idx.shape}")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise ShapeMismatchError(f"embedding_lookup: id {bad} out of range [0, {vocab})")
    n_rows, dim = table.shape

    def backward_fn(g):
        dtable = np.zeros((n_rows, dim))
        np.add.at(dtable, idx, g)
        return [dtable]

    return _finish("embedding_lookup", [table], table.data[idx], backward_fn)


def mean_pool_first(x):
    """Pool a seq-by-h tensor to a single vector: the first position's row."""
    _require_rank("mean_pool_first", x, 2)
    rows, cols = x.shape

    def backward_fn(g):
        dx = np.zeros((rows, cols))
        dx[0] = g
        return [dx]

    return _finish("mean_pool_first", [x], x.data[0].copy(), backward_fn)


def slice_cols(x, start, stop):
    """Contiguous column slice x[:, start:stop] of a rank-2 tensor."""
    _require_rank("slice_cols", x, 2)
    rows, cols = x.shape
    if not (0 <= start < stop <= cols):
        raise ShapeMismatchError(f"slice_cols: [{start}:{stop}] out of range for shape {x.shape}")

    def backward_fn(g):
        dx = np.zeros((rows, cols))
        dx[:, start:stop] = g
        return [dx]

    return _finish("slice_cols", [x], np.ascontiguousarray(x.data[:, start:stop]), backward_fn)


def concat_cols(parts):
    """Concatenate rank-2 tensors along columns."""
    parts = list(parts)
    if not parts:
        raise ShapeMismatchError("concat_cols: need at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        _require_rank("concat_cols", p, 2)
        if p.shape[0] != rows:
            raise ShapeMismatchError(
                f"concat_cols: row counts differ: {[p.shape for p in parts]}"
            )
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        return [np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) for i in range(len(widths))]

    return _finish("concat_cols", parts, np.concatenate([p.data for p in parts], axis=1), backward_fn)


def stack_rows(parts):
    """Stack rank-1 tensors of equal length into a rank-2 tensor."""
    parts = list(parts)
    if not parts:
        raise ShapeMismatchError("stack_rows: need at least one part")
    width = parts[0].shape[0]
    for p in parts:
        _require_rank("stack_rows", p, 1)
        if p.shape[0] != width:
            raise ShapeMismatchError(f"stack_rows: lengths differ: {[p.shape for p in parts]}")

    def backward_fn(g):
        return [g[i].copy() for i in range(len(parts))]

    return _finish("stack_rows", parts, np.stack([p.data for p in parts]), backward_fn)


def sum_all(x):
    """Sum of all elements, as a scalar (shape ()) tensor."""
    in_shape = x.shape

    def backward_fn(g):
        return [np.full(in_shape, float(g))]

    return _finish("sum_all", [x], np.asarray(x.data.sum()), backward_fn)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of rank-2 logits against integer labels."""
    _require_rank("cross_entropy", logits, 2)
    y = np.asarray(labels, dtype=np.intp)
    n, classes = logits.shape
    if y.shape != (n,):
        raise ShapeMismatchError(f"cross_entropy: logits {logits.shape} with labels shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ShapeMismatchError(f"cross_entropy: label out of range [0, {classes})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), y].mean()

    def backward_fn(g):
        probs = np.exp(log_probs)
        probs[np.arange(n), y] -= 1.0
        return [float(g) / n * probs]

    return _finish("cross_entropy", [logits], np.asarray(loss), backward_fn)


def mean_squared_error(pred, target):
    """Mean squared error against a constant target array."""
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeMismatchError(f"mean_squared_error: {pred.shape} vs {t.shape}")
    diff = pred.data - t

    def backward_fn(g):
        return [float(g) * 2.0 / diff.size * diff]

    return _finish("mean_squared_error", [pred], np.asarray((diff * diff).mean()), backward_fn)


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "swish": swish, "tanh": tanh}

_PRIMITIVES = {
    "matmul": matmul,
    "transpose": transpose,
    "add": add,
    "add_bias": add_bias,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "swish": swish,
    "tanh": tanh,
    "softmax_rows": softmax_rows,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "mean_pool_first": mean_pool_first,
    "slice_cols": slice_cols,
    "concat_cols": concat_cols,
    "stack_rows": stack_rows,
    "sum_all": sum_all,
    "cross_entropy": cross_entropy,
    "mean_squared_error": mean_squared_error,
}


def activation(name, x):
    """Apply one of the named activations: relu, gelu, swish, tanh."""
    try:
        fn = _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; valid: {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def apply_primitive(kind, *args, **kwargs):
    """Dispatch a primitive by kind name (the generic entry point)."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; valid: {sorted(_PRIMITIVES)}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Reverse sweep from a scalar loss; returns {leaf tensor: gradient}.

    Only leaves with ``requires_grad`` appear in the result. Raises
    :class:`GradientError` for a non-scalar or detached loss.
    """
    if loss.shape != ():
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._producer is None:
        raise GradientError("loss is detached from any tape")
    grads = {id(loss): np.asarray(1.0)}
    leaf_grads = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        input_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None or not _tracked(t, tape):
                continue
            if t._producer is not None and t._tape is tape:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            elif t.requires_grad:
                if t in leaf_grads:
                    leaf_grads[t] = leaf_grads[t] + gi
                else:
                    leaf_grads[t] = gi
    return leaf_grads


def finite_difference_check(f, x, h=1e-5):
    """Max relative error between the autodiff gradient of f at x and
    central finite differences with step h.

    f must map one tensor to a scalar tensor and be deterministic (two
    evaluations at x must agree bitwise). The relative error at each
    coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    h = float(h)
    if not (0.0 < h <= 1e-2):
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")

    def eval_plain(arr):
        out = f(Tensor(arr))
        if out.shape != ():
            raise GradientError(f"f must return a scalar, got shape {out.shape}")
        return float(out.data)

    base = x.data.copy()
    first = eval_plain(base)
    second = eval_plain(base)
    if first != second:
        raise GradientError("f is not deterministic: two evaluations at x disagree")

    probe = Tensor(base, requires_grad=True)
    with Tape():
        out = f(probe)
        if out.shape != ():
            raise GradientError(f"f must return a scalar, got shape {out.shape}")
        if out._producer is None:
            g_ad = np.zeros_like(base)  # constant f: gradient is identically zero
        else:
            g_ad = backward(out).get(probe, np.zeros_like(base))

    g_fd = np.zeros_like(base)
    flat = g_fd.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        up = eval_plain(bumped.reshape(base.shape))
        bumped[i] -= 2.0 * h
        down = eval_plain(bumped.reshape(base.shape))
        flat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if base.size else 0.0
