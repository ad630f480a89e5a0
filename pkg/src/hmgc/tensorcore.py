"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors hold row-major numpy arrays (NCHW for 4-D), float32 by default;
float64 is accepted and preserved so gradient checks can run at full
precision. Operations executed inside a `with Tape() as tape:` block are
recorded in execution order; `backward(tape, loss)` replays the records in
reverse, accumulating gradients into every tensor that requires them.

Convolutions use symmetric zero padding and require the output extent
(H + 2*pad - k) / stride + 1 to be an integer; callers that need
"same"-style geometry on even inputs pad asymmetrically first (see
effnet). The direct kernel loops over the k*k offsets; an im2col variant
is provided and must agree with it to 1e-5 relative.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "set_debug_checks",
    "add",
    "mul",
    "scale",
    "sum_all",
    "reshape",
    "pad2d",
    "relu",
    "silu",
    "sigmoid",
    "conv2d",
    "depthwise_conv2d",
    "batchnorm2d",
    "global_avg_pool",
    "dense",
    "softmax_cross_entropy",
    "finite_diff_check",
]

DEFAULT_DTYPE = np.float32

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op NaN/Inf detection on every forward result."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """A dense array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for backward replay.

    Execution order is a topological order of the data-flow graph, so the
    reverse sweep visits each recorded node exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(data: np.ndarray, parents: tuple, op_name: str) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in output of {op_name}")
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires)


def _record(out: Tensor, backward_fn) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward_fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False).reshape(t.data.shape)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tracked tensor."""
    if loss.data.shape != ():
        raise ValueError("loss must be a scalar tensor")
    if not any(out is loss for out, _ in tape._records):
        raise ValueError("detached graph: loss was not produced on this tape")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, fn in reversed(tape._records):
        if out.grad is None:
            continue  # this op's output did not contribute to the loss
        fn(out.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise and shape ops ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make_output(a.data + b.data, (a, b), "add")

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, fn)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make_output(a.data * b.data, (a, b), "mul")

    def fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, fn)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make_output(x.data * c, (x,), "scale")

    def fn(g):
        _accumulate(x, g * c)

    _record(out, fn)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _make_output(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "sum_all")

    def fn(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    _record(out, fn)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _make_output(x.data.reshape(shape), (x,), "reshape")

    def fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    _record(out, fn)
    return out


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial dims of an NCHW tensor (possibly asymmetrically)."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("padding must be non-negative")
    if (top, bottom, left, right) == (0, 0, 0, 0):
        return x
    padded = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    out = _make_output(padded, (x,), "pad2d")
    h, w = x.data.shape[2], x.data.shape[3]

    def fn(g):
        _accumulate(x, g[:, :, top : top + h, left : left + w])

    _record(out, fn)
    return out


# --- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = _make_output(np.maximum(x.data, 0), (x,), "relu")

    def fn(g):
        # subgradient at 0 is taken as 0
        _accumulate(x, g * (x.data > 0))

    _record(out, fn)
    return out


def _sigmoid_array(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_array(x.data)
    out = _make_output(s, (x,), "sigmoid")

    def fn(g):
        _accumulate(x, g * s * (1.0 - s))

    _record(out, fn)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_array(x.data)
    out = _make_output(x.data * s, (x,), "silu")

    def fn(g):
        _accumulate(x, g * s * (1.0 + x.data * (1.0 - s)))

    _record(out, fn)
    return out


# --- convolutions -------------------------------------------------------------


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    for extent in (h, w):
        span = extent + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise ValueError(
                f"non-integer output extent for input {extent}, kernel {k}, "
                f"stride {stride}, padding {padding}"
            )
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _patch(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]


def conv2d(
    x: Tensor, w: Tensor, stride: int = 1, zero_padding: int = 0, method: str = "direct"
) -> Tensor:
    """Cross-correlation of NCHW input with [Cout, Cin, k, k] kernels."""
    n, cin, h, wdim = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    ho, wo = _conv_geometry(h, wdim, k, stride, zero_padding)
    xp = _pad_spatial(x.data, zero_padding)

    if method == "direct":
        acc = np.zeros((cout, n, ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                patch = _patch(xp, i, j, stride, ho, wo)
                # [Cout, Cin] x [N, Cin, Ho, Wo] -> [Cout, N, Ho, Wo]
                acc += np.tensordot(w.data[:, :, i, j], patch, axes=([1], [1]))
        result = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    elif method == "im2col":
        cols = np.empty((n, cin, k, k, ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = _patch(xp, i, j, stride, ho, wo)
        flat = cols.reshape(n, cin * k * k, ho * wo)
        result = (w.data.reshape(cout, cin * k * k) @ flat).reshape(n, cout, ho, wo)
    else:
        raise ValueError(f"unknown conv2d method {method!r}")

    out = _make_output(result, (x, w), "conv2d")

    def fn(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    patch = _patch(xp, i, j, stride, ho, wo)
                    gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    # [N, Cout, Ho, Wo] x [Cout, Cin] -> [N, Cin, Ho, Wo]
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
            if zero_padding:
                gxp = gxp[:, :, zero_padding:-zero_padding, zero_padding:-zero_padding]
            _accumulate(x, gxp)

    _record(out, fn)
    return out


def depthwise_conv2d(
    x: Tensor, w: Tensor, stride: int = 1, zero_padding: int = 0
) -> Tensor:
    """Per-channel convolution with [C, 1, k, k] kernels."""
    n, c, h, wdim = x.data.shape
    cw, one, k, k2 = w.data.shape
    if one != 1 or k != k2:
        raise ValueError("depthwise kernel must have shape [C, 1, k, k]")
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, kernel {cw}")
    ho, wo = _conv_geometry(h, wdim, k, stride, zero_padding)
    xp = _pad_spatial(x.data, zero_padding)

    result = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            result += _patch(xp, i, j, stride, ho, wo) * w.data[None, :, 0, i, j, None, None]

    out = _make_output(result, (x, w), "depthwise_conv2d")

    def fn(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    patch = _patch(xp, i, j, stride, ho, wo)
                    gw[:, 0, i, j] = (g * patch).sum(axis=(0, 2, 3))
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        g * w.data[None, :, 0, i, j, None, None]
                    )
            if zero_padding:
                gxp = gxp[:, :, zero_padding:-zero_padding, zero_padding:-zero_padding]
            _accumulate(x, gxp)

    _record(out, fn)
    return out


# --- normalization ------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place: running = momentum*running + (1-m)*batch.
    Eval mode is a pure affine map using the running statistics.
    """
    n, c, h, wdim = x.data.shape
    if n == 0:
        raise ValueError("batch of size 0")
    m = n * h * wdim
    ga = gamma.data.reshape(1, c, 1, 1)
    be = beta.data.reshape(1, c, 1, 1)

    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean[:] = momentum * running_mean + (1.0 - momentum) * mean
        running_var[:] = momentum * running_var + (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)

    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * rstd.reshape(1, c, 1, 1)
    out = _make_output(ga * xhat + be, (x, gamma, beta), "batchnorm2d")

    def fn(g):
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        grs = ga * rstd.reshape(1, c, 1, 1)
        if train:
            # batch statistics depend on x, so their derivatives enter
            g_sum = g.sum(axis=(0, 2, 3), keepdims=True)
            gx_sum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            _accumulate(x, grs / m * (m * g - g_sum - xhat * gx_sum))
        else:
            _accumulate(x, grs * g)

    _record(out, fn)
    return out


# --- pooling and dense --------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    out = _make_output(x.data.mean(axis=(2, 3), keepdims=True), (x,), "global_avg_pool")

    def fn(g):
        _accumulate(x, np.broadcast_to(g / (h * w), x.data.shape))

    _record(out, fn)
    return out


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map [N, F] @ [F, G] (+ b[G])."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"dense shape mismatch: x {x.data.shape} vs w {w.data.shape}"
        )
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _make_output(y, parents, "dense")

    def fn(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        if b is not None:
            _accumulate(b, g.sum(axis=0))

    _record(out, fn)
    return out


# --- loss ---------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch; returns (loss, probabilities).

    Numerically stabilized by subtracting the row max. The gradient w.r.t.
    the logits is (p - onehot) / N.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    probs = ez / sez
    log_sez = np.log(sez[:, 0]) + zmax[:, 0]
    loss_val = np.asarray(
        (log_sez - z[np.arange(n), labels]).mean(), dtype=z.dtype
    )
    out = _make_output(loss_val, (logits,), "softmax_cross_entropy")

    def fn(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        _accumulate(logits, gl * (g / n))

    _record(out, fn)
    return out, probs


# --- gradient checking --------------------------------------------------------


def finite_diff_check(f, x: Tensor, step: float = 1e-3, exclude=None) -> float:
    """Worst relative error between the taped gradient of f at x and central
    finite differences.

    The check runs in float64 regardless of x's dtype (the production dtype
    stays float32; double precision is needed for the difference quotients to
    resolve 1e-4 relative agreement). `exclude` is an optional boolean mask of
    coordinates to skip, e.g. points sitting exactly on a relu kink. Relative
    error uses an absolute floor of 1e-6 in the denominator.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x64)
    backward(tape, y)
    if x64.grad is None:
        analytic = np.zeros(x64.data.size, dtype=np.float64)
    else:
        analytic = x64.grad.reshape(-1).copy()

    flat = x64.data.reshape(-1)
    numeric = np.zeros_like(analytic)
    mask = (
        np.zeros(flat.size, dtype=bool)
        if exclude is None
        else np.asarray(exclude, dtype=bool).reshape(-1)
    )
    for idx in range(flat.size):
        if mask[idx]:
            continue
        orig = flat[idx]
        flat[idx] = orig + step
        fp = float(f(x64).data)
        flat[idx] = orig - step
        fm = float(f(x64).data)
        flat[idx] = orig
        numeric[idx] = (fp - fm) / (2.0 * step)

    keep = ~mask
    if not keep.any():
        return 0.0
    diff = np.abs(analytic[keep] - numeric[keep])
    denom = np.maximum(np.maximum(np.abs(analytic[keep]), np.abs(numeric[keep])), 1e-6)
    return float((diff / denom).max())
