"""Dense fp32 arrays with reverse-mode gradients.

A Tensor wraps a numpy array and, while grad mode is on, remembers the op
that produced it. backward() replays the recorded ops in reverse
topological order exactly once each. detach() is the stop-gradient
marker: nothing upstream of it ever receives a gradient contribution.

Arrays are float32 by default; float64 is allowed so the finite-difference
checker can run in shadow precision. Mixing dtypes in one op is an error.
"""

from __future__ import annotations

import threading
import warnings

import numpy as np

from gram.errors import ConfigError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()

# Finiteness asserts on every op output; off by default for speed.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (thread-local)."""

    def __enter__(self):
        self.prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self.prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Stop-gradient marker: same values, no history."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _check_finite(arr, op_name):
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op_name}")


def _same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ConfigError(f"dtype mismatch: {t.data.dtype} vs {dt}")
    return dt


def _make(data, parents, backward, op_name):
    _check_finite(data, op_name)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Gradients are never mutated in place, so sharing buffers is safe.
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss. Populates .grad on every
    requires_grad node reachable through recorded ops."""
    if loss.data.size != 1:
        raise ConfigError("backward expects a scalar loss")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a trailing-axes broadcast of a (e.g. a bias)."""
    _same_dtype(a, b)
    out = a.data + b.data
    if out.shape != a.data.shape:
        raise ConfigError(f"add broadcast must preserve left shape, got {a.data.shape} + {b.data.shape}")

    def bwd(g):
        _accum(a, g)
        if b.data.shape == g.shape:
            _accum(b, g)
        else:
            extra = g.ndim - b.data.ndim
            axes = tuple(range(extra)) + tuple(
                i + extra for i, n in enumerate(b.data.shape) if n == 1 and g.shape[i + extra] != 1
            )
            _accum(b, g.sum(axis=axes).reshape(b.data.shape))

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ConfigError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ConfigError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = a.data * s

    def bwd(g):
        _accum(a, g * s)

    return _make(out, (a,), bwd, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make(out, (a,), bwd, "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, g * mask)

    return _make(out, (a,), bwd, "clamp")


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bwd(g):
        _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out, (a,), bwd, "silu")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd, "sigmoid")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """x[..., Din] @ w[Din, Dout]; leading axes of x are flattened for BLAS."""
    _same_dtype(x, w)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ConfigError(f"matmul shapes {x.data.shape} @ {w.data.shape} do not conform")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = (x2 @ w.data).reshape(lead + (w.data.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, w.data.shape[1])
        _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        _accum(w, x2.T @ g2)

    return _make(out, (x, w), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with b[Dout]."""
    _same_dtype(x, w, b)
    if b.data.shape != (w.data.shape[1],):
        raise ConfigError(f"bias shape {b.data.shape} does not match output dim {w.data.shape[1]}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = (x2 @ w.data + b.data).reshape(lead + (w.data.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, w.data.shape[1])
        _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        _accum(w, x2.T @ g2)
        _accum(b, g2.sum(axis=0))

    return _make(out, (x, w, b), bwd, "linear")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: a[..., M, K] @ b[..., K, N] with equal leading axes."""
    _same_dtype(a, b)
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ConfigError(f"bmm shapes {a.data.shape} @ {b.data.shape} do not conform")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), bwd, "bmm")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(out, (a,), bwd, "transpose")


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != b.data.ndim:
        raise ConfigError(f"concat rank mismatch: {a.data.shape} / {b.data.shape}")
    ax = axis % a.data.ndim
    if a.data.shape[:ax] + a.data.shape[ax + 1:] != b.data.shape[:ax] + b.data.shape[ax + 1:]:
        raise ConfigError(f"concat shapes {a.data.shape} / {b.data.shape} disagree off axis {axis}")
    na = a.data.shape[ax]
    out = np.concatenate([a.data, b.data], axis=ax)
    sel_a = tuple([slice(None)] * ax + [slice(0, na)])
    sel_b = tuple([slice(None)] * ax + [slice(na, None)])

    def bwd(g):
        _accum(a, np.ascontiguousarray(g[sel_a]))
        _accum(b, np.ascontiguousarray(g[sel_b]))

    return _make(out, (a, b), bwd, "concat")


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    return concat(a, b, axis=-1)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out, (a,), bwd, "slice_axis")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ConfigError(f"embedding ids out of range [0, {table.data.shape[0]})")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accum(table, gt)

    return _make(out, (table,), bwd, "embedding")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain."""
    _same_dtype(x, gain)
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        raise ConfigError(f"rms_norm gain shape {gain.data.shape} does not match feature dim {d}")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True) + x.data.dtype.type(eps)
    inv = 1.0 / np.sqrt(ms)
    xhat = x.data * inv
    out = xhat * gain.data

    def bwd(g):
        gg = g * gain.data
        dot = np.sum(gg * x.data, axis=-1, keepdims=True)
        _accum(x, inv * (gg - x.data * (dot * (inv * inv) / d)))
        _accum(gain, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))

    return _make(out, (x, gain), bwd, "rms_norm")


def softmax_last(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, (x,), bwd, "softmax_last")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position transform on x[..., P, Hd] with half-split pairing;
    cos/sin have shape [P, Hd//2]."""
    hd = x.data.shape[-1]
    half = hd // 2
    if cos.shape != (x.data.shape[-2], half):
        raise ConfigError(f"rope table shape {cos.shape} does not match input {x.data.shape}")
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :half], g[..., half:]
        _accum(x, np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1))

    return _make(out, (x,), bwd, "rope")


def gaussian_reparam(mu: Tensor, log_var: Tensor, rng) -> Tensor:
    """mu + exp(0.5*log_var) * n with n drawn from rng; gradient flows to mu
    and log_var only, never into the draw."""
    _same_dtype(mu, log_var)
    if mu.data.shape != log_var.data.shape:
        raise ConfigError(f"gaussian_reparam shape mismatch {mu.data.shape} vs {log_var.data.shape}")
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_var.data))):
        raise NumericError("gaussian_reparam requires finite inputs")
    eps = rng.normal(mu.data.shape, dtype=mu.data.dtype)
    std = np.exp(0.5 * log_var.data)
    out = mu.data + std * eps

    def bwd(g):
        _accum(mu, g)
        _accum(log_var, g * (0.5 * std * eps))

    return _make(out, (mu, log_var), bwd, "gaussian_reparam")


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = 0) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not
    ignore_index. Returns 0 (with a warning) when every position is ignored."""
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ConfigError(f"target shape {targets.shape} does not match logits {logits.data.shape}")
    v = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ConfigError(f"targets out of range [0, {v})")
    mask = targets != ignore_index
    n_valid = int(mask.sum())
    if n_valid == 0:
        warnings.warn("softmax_cross_entropy: all positions ignored, loss defined as 0")
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * mask).sum() / n_valid, dtype=logits.data.dtype)

    def bwd(g):
        probs = np.exp(logp)
        flat = probs.reshape(-1, v)
        np.subtract.at(flat, (np.arange(flat.shape[0]), targets.reshape(-1)), 1.0)
        probs *= mask[..., None]
        _accum(logits, probs * (g / n_valid))

    return _make(out, (logits,), bwd, "softmax_cross_entropy")


def sum_last(a: Tensor) -> Tensor:
    out = a.data.sum(axis=-1)

    def bwd(g):
        _accum(a, np.broadcast_to(g[..., None], a.data.shape))

    return _make(out, (a,), bwd, "sum_last")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _make(out, (a,), bwd, "mean_all")


def graft(value: Tensor, surrogate: Tensor) -> Tensor:
    """Forward value of `value`, gradient of `surrogate`.

    The two must be the same shape. Used where an objective's value and its
    gradient path are deliberately different (e.g. gradient reweighting that
    must not perturb the reported value)."""
    if value.data.shape != surrogate.data.shape:
        raise ConfigError("graft requires matching shapes")

    def bwd(g):
        _accum(surrogate, g)

    return _make(value.data, (surrogate,), bwd, "graft")
