"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the rest of the package needs are implemented, all on
64-bit reals. Forward results are recorded on the active tape whenever an
input requires gradients; ``backward`` replays the records in exact reverse
order and leaves dLoss/dLeaf on every leaf tensor.

Reductions that feed the prototype math (``masked_sum``) accumulate in
strict row-major pixel order so they match a per-pixel loop bitwise; the
remaining ops use ordinary numpy kernels, which are deterministic but make
no ordering promise beyond that.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigError,
    DegenerateBatchError,
    NumericalError,
    ShapeError,
    UnsupportedOp,
)

IGNORE_LABEL = 255


class Tensor:
    """n-dimensional float64 array with an optional gradient slot.

    Tensors are treated as immutable once produced by an op; the trainer is
    the only writer and only between steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeRecord:
    """One recorded op: kind, tensor inputs, output, and its pullback."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]]


_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of ops for one forward pass; single-threaded by contract."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ConfigError("nested tapes are not supported")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = None


def _record(kind, inputs, out, backward) -> Tensor:
    tape = _active_tape()
    tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
    if tape is not None and any(t.requires_grad for t in tensor_inputs):
        out.requires_grad = True
        tape.records.append(TapeRecord(kind, tensor_inputs, out, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf onto every leaf with requires_grad; clears the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for tensor, contribution in rec.backward(g):
            if not tensor.requires_grad:
                continue
            held = grads.get(id(tensor))
            grads[id(tensor)] = contribution if held is None else held + contribution
    produced = {id(rec.output) for rec in tape.records}
    assigned: set[int] = set()
    for rec in tape.records:
        for tensor in rec.inputs:
            key = id(tensor)
            if tensor.requires_grad and key not in produced and key not in assigned:
                assigned.add(key)
                g = grads.get(key)
                tensor.grad = np.zeros_like(tensor.data) if g is None else g.copy()
    tape.records.clear()


# ---------------------------------------------------------------------------
# op kinds
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def back(g):
        return [(a, g), (b, g)]

    return _record("add", (a, b), out, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be a one-element tensor (broadcast)."""
    if a.shape != b.shape and b.data.size != 1:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def back(g):
        if b.data.size == 1 and a.shape != b.shape:
            gb = np.array(np.sum(g * a.data)).reshape(b.shape)
            return [(a, g * b.data), (b, gb)]
        return [(a, g * b.data), (b, g * a.data)]

    return _record("mul", (a, b), out, back)


def scale(a: Tensor, alpha: float, beta: float = 0.0) -> Tensor:
    """alpha * a + beta with python-scalar coefficients."""
    out = Tensor(a.data * alpha + beta)

    def back(g):
        return [(a, g * alpha)]

    return _record("scale", (a,), out, back)


def div_scalar(a: Tensor, denom: float) -> Tensor:
    """a / denom as a true division, so pooled means match loop oracles bitwise."""
    if denom == 0.0:
        raise NumericalError("division by zero")
    out = Tensor(a.data / denom)

    def back(g):
        return [(a, g / denom)]

    return _record("div_scalar", (a,), out, back)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def back(g):
        return [(a, g * (a.data > 0.0))]

    return _record("relu", (a,), out, back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    y = np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(y)

    def back(g):
        return [(a, g * y * (1.0 - y))]

    return _record("sigmoid", (a,), out, back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w^T x + b for a vector x: x (n,), w (n, m), b (m,)."""
    if x.data.ndim != 1 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("linear expects x (n,), w (n, m), b (m,)")
    n, m = w.shape
    if x.shape != (n,) or b.shape != (m,):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def back(g):
        return [(x, w.data @ g), (w, np.outer(x.data, g)), (b, g)]

    return _record("linear", (x, w, b), out, back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: {a.shape} vs {b.shape}")
    out = Tensor(np.dot(a.data, b.data))

    def back(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _record("dot", (a, b), out, back)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    bd = b.data.T if transpose_b else b.data
    if a.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: {a.shape} vs {b.shape} (transpose_b={transpose_b})")
    out = Tensor(a.data @ bd)

    def back(g):
        if transpose_b:
            return [(a, g @ b.data), (b, g.T @ a.data)]
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _record("matmul", (a, b), out, back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape {a.shape} -> {shape}")
    out = Tensor(a.data.reshape(shape))

    def back(g):
        return [(a, g.reshape(a.shape))]

    return _record("reshape", (a,), out, back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    parts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in parts], axis=axis))
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        grads = []
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append((t, g[tuple(sl)]))
        return grads

    return _record("concat", tuple(parts), out, back)


def stack(vectors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a (n, len) matrix."""
    parts = list(vectors)
    if not parts:
        raise ShapeError("stack of zero vectors")
    length = parts[0].data.size
    for t in parts:
        if t.data.ndim != 1 or t.data.size != length:
            raise ShapeError("stack expects 1-d vectors of equal length")
    out = Tensor(np.stack([t.data for t in parts], axis=0))

    def back(g):
        return [(t, g[i]) for i, t in enumerate(parts)]

    return _record("stack", tuple(parts), out, back)


def take_row(a: Tensor, index: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("take_row expects a matrix")
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"row {index} out of range for {a.shape}")
    out = Tensor(a.data[index].copy())

    def back(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return [(a, ga)]

    return _record("take_row", (a,), out, back)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero-padded 2-d convolution: x (h, w, cin) -> (h, w, cout).

    Kernel is (k, k, cin, cout) with odd k. Implemented as an im2col matrix
    product; a direct-loop oracle in the test suite pins the arithmetic.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError("conv2d expects x (h,w,cin), kernel (k,k,cin,cout), bias (cout,)")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd side, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs cout {cout}")
    pad = kh // 2
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw, cin))  # (h, w, 1, kh, kw, cin)
    cols = windows.reshape(h * w, kh * kw * cin)
    k2d = kernel.data.reshape(kh * kw * cin, cout)
    out = Tensor((cols @ k2d + bias.data).reshape(h, w, cout))

    def back(g):
        g2d = g.reshape(h * w, cout)
        dcols = (g2d @ k2d.T).reshape(h, w, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[i : i + h, j : j + w, :] += dcols[:, :, i, j, :]
        dx = dxp[pad : pad + h, pad : pad + w, :]
        dk = (cols.T @ g2d).reshape(kernel.shape)
        db = g2d.sum(axis=0)
        return [(x, dx), (kernel, dk), (bias, db)]

    return _record("conv2d", (x, kernel, bias), out, back)


def masked_sum(features: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of feature vectors at set mask pixels, in row-major pixel order.

    The accumulation order matches a per-pixel python loop bitwise (the
    pooling oracles assert exact equality), hence the sequential cumsum.
    """
    if features.data.ndim != 3:
        raise ShapeError("masked_sum expects features (h, w, c)")
    h, w, c = features.shape
    m = np.asarray(mask)
    if m.shape != (h, w):
        raise ShapeError(f"masked_sum: mask {m.shape} vs features {features.shape}")
    m3 = m.astype(np.float64).reshape(h, w, 1)
    flat = (features.data * m3).reshape(h * w, c)
    out = Tensor(np.cumsum(flat, axis=0)[-1] if flat.size else np.zeros(c))

    def back(g):
        return [(features, m3 * g)]

    return _record("masked_sum", (features,), out, back)


def l2_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to unit length; norms <= eps map to zero vectors."""
    norms = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    safe = np.where(norms > eps, norms, 1.0)
    y = np.where(norms > eps, a.data / safe, 0.0)
    out = Tensor(y)

    def back(g):
        dots = np.sum(y * g, axis=-1, keepdims=True)
        da = np.where(norms > eps, (g - y * dots) / safe, 0.0)
        return [(a, da)]

    return _record("l2_normalize", (a,), out, back)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    ignore_label: int = IGNORE_LABEL,
    reduction: str = "mean",
) -> Tensor:
    """Per-pixel softmax cross entropy against integer labels.

    ``logits`` is (..., n_classes); labels the matching integer array with
    ``ignore_label`` marking pixels excluded from the loss. Reduction is the
    mean (or sum) over non-ignored pixels.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    n_classes = logits.shape[-1]
    z = logits.data.reshape(-1, n_classes)
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"labels {np.asarray(labels).shape} vs logits {logits.shape}")
    valid = y != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("every pixel is ignored")
    zv = z[valid]
    yv = y[valid].astype(np.int64)
    if yv.min() < 0 or yv.max() >= n_classes:
        raise ShapeError("label id outside the logit class range")
    zmax = zv.max(axis=1)
    lse = np.log(np.exp(zv - zmax[:, None]).sum(axis=1)) + zmax
    nll = lse - zv[np.arange(count), yv]
    total = nll.sum()
    out = Tensor(total / count if reduction == "mean" else total)

    def back(g):
        gs = float(g) / count if reduction == "mean" else float(g)
        probs = _softmax_rows(zv)
        probs[np.arange(count), yv] -= 1.0
        dz = np.zeros_like(z)
        dz[valid] = probs * gs
        return [(logits, dz.reshape(logits.shape))]

    return _record("softmax_cross_entropy", (logits,), out, back)


def valid_pixel_count(labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> int:
    return int((np.asarray(labels) != ignore_label).sum())


_OPS: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "scale": scale,
    "div_scalar": div_scalar,
    "relu": relu,
    "sigmoid": sigmoid,
    "linear": linear,
    "dot": dot,
    "matmul": matmul,
    "reshape": reshape,
    "concat": concat,
    "stack": stack,
    "take_row": take_row,
    "conv2d": conv2d,
    "masked_sum": masked_sum,
    "l2_normalize": l2_normalize,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def op_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by kind name; unknown kinds raise UnsupportedOp."""
    fn = _OPS.get(kind)
    if fn is None:
        raise UnsupportedOp(f"unknown op kind {kind!r}")
    return fn(*inputs, **kwargs)


def op_kinds() -> tuple[str, ...]:
    return tuple(sorted(_OPS))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} n={self.n_checked}"


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central differences.

    Relative error uses max(|analytic|, |numeric|, 1.0) as the denominator so
    near-zero gradients are judged on absolute error at unit scale.
    """
    if step <= 0.0:
        raise ConfigError("finite-difference step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if y.data.size != 1:
        raise ShapeError("gradient_check needs a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NumericalError("f(x) is not finite")
    backward(tape, y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(x.shape))).data
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(x.shape))).data
        if not (np.isfinite(f_plus).all() and np.isfinite(f_minus).all()):
            raise NumericalError("f is not finite near x")
        num_flat[i] = (float(f_plus.reshape(())) - float(f_minus.reshape(()))) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, tol, max_rel <= tol, int(flat.size))
