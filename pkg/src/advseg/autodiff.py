"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 by default). Every operation whose inputs
require gradients records a backward closure; ``backward()`` on a scalar
walks the recorded graph once in reverse topological order. Gradients
accumulate additively across fan-out, so a tensor used twice receives the
sum of both contributions.

Every operation checks its output for NaN/Inf and raises NonFiniteError
instead of letting poison values propagate. Convolutions are im2col plus a
single GEMM; the backward pass recomputes the im2col windows rather than
retaining them, trading a little compute for a much smaller live set.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float64

_SUPPORTED_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A graph-free tensor sharing this tensor's data buffer."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    _ensure_finite(data, op)
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # never in place: g may alias another node's grad buffer
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    The graph is single-use: after the sweep every visited node drops its
    parent links and backward closure. Closures capture their own output
    node (to read its incoming gradient), which would otherwise form
    reference cycles that keep whole step graphs alive until the cyclic
    collector runs; tearing down eagerly keeps peak memory at one graph.
    """
    if loss.data.size != 1:
        raise ValueError("backward() requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not require gradients; nothing to do")
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
    for node in order:
        node._backward = None
        node._parents = ()


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recursion would overflow on deep conv graphs
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(-a.data, (a,), "neg")
    if out.requires_grad:
        def _bw():
            _accumulate(a, -out.grad)
        out._backward = _bw
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        mask = a.data > 0  # subgradient 0 at the kink
        def _bw():
            _accumulate(a, out.grad * mask)
        out._backward = _bw
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValueError(f"clamp requires lo < hi, got [{lo}, {hi}]")
    a = _as_tensor(a)
    out = _result(np.clip(a.data, lo, hi), (a,), "clamp")
    if out.requires_grad:
        mask = (a.data >= lo) & (a.data <= hi)  # passthrough inside, 0 outside
        def _bw():
            _accumulate(a, out.grad * mask)
        out._backward = _bw
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of negative value")
    root = np.sqrt(a.data)
    out = _result(root, (a,), "sqrt")
    if out.requires_grad:
        def _bw():
            # derivative is unbounded at 0; the finiteness check below
            # catches callers that differentiate sqrt at the origin
            g = out.grad * (0.5 / root)
            _ensure_finite(g, "sqrt backward")
            _accumulate(a, g)
        out._backward = _bw
    return out


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.asarray(a.data.sum()), (a,), "sum")
    if out.requires_grad:
        def _bw():
            _accumulate(a, np.broadcast_to(out.grad, a.data.shape))
        out._backward = _bw
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    out = _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)
        def _bw():
            g = out.grad
            for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(start, stop)
                    _accumulate(t, g[tuple(index)])
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution family


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Flatten sliding windows of a padded NCHW array into GEMM rows.

    Returns (N*Ho*Wo, C*kh*kw); row r holds the receptive field of output
    pixel r in row-major (n, ho, wo) order.
    """
    n, c, _, _ = xp.shape
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add GEMM rows back onto the padded input (adjoint of _im2col)."""
    n, c, hp, wp = xp_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dc = dcols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError("stride does not divide the padded input evenly")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def conv2d(x, k, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-d cross-correlation: (N,C,H,W) x (F,C,kh,kw) -> (N,F,Ho,Wo)."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and FCkhkw kernel")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = k.data.shape
    if ck != c:
        raise ValueError(f"kernel expects {ck} input channels, got {c}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    kmat = k.data.reshape(f, -1)
    y = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = _result(np.ascontiguousarray(y), (x, k), "conv2d")

    if out.requires_grad:
        def _bw():
            grows = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(-1, f)
            if k.requires_grad:
                # windows are recomputed here instead of kept alive on the graph
                _accumulate(k, (grows.T @ _im2col(xp, kh, kw, stride)).reshape(k.data.shape))
            if x.requires_grad:
                dxp = _col2im(grows @ kmat, xp.shape, kh, kw, stride)
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
                _accumulate(x, dxp)
        out._backward = _bw
    return out


def transposed_conv2d(x, k, stride: int = 1, padding: int = 0) -> Tensor:
    """Exact adjoint of conv2d with the same kernel layout.

    (N,F,Hi,Wi) x (F,C,kh,kw) -> (N,C,Ho,Wo) with Ho = (Hi-1)*stride - 2*padding + kh.
    For any u, v: <conv2d(u, k), v> == <u, transposed_conv2d(v, k)>.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("transposed_conv2d expects NCHW input and FCkhkw kernel")
    n, f, hi, wi = x.data.shape
    fk, c, kh, kw = k.data.shape
    if fk != f:
        raise ValueError(f"kernel expects {fk} input channels, got {f}")
    ho = (hi - 1) * stride - 2 * padding + kh
    wo = (wi - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError("output would be empty; padding too large for this input")

    kmat = k.data.reshape(f, -1)
    rows = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, f)
    padded_shape = (n, c, ho + 2 * padding, wo + 2 * padding)
    yp = _col2im(rows @ kmat, padded_shape, kh, kw, stride)
    y = yp[:, :, padding:padding + ho, padding:padding + wo] if padding else yp
    out = _result(np.ascontiguousarray(y), (x, k), "transposed_conv2d")

    if out.requires_grad:
        def _bw():
            gp = np.pad(out.grad, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
                if padding else out.grad
            gcols = _im2col(gp, kh, kw, stride)
            if x.requires_grad:
                dx = (gcols @ kmat.T).reshape(n, hi, wi, f).transpose(0, 3, 1, 2)
                _accumulate(x, np.ascontiguousarray(dx))
            if k.requires_grad:
                _accumulate(k, (rows.T @ gcols).reshape(k.data.shape))
        out._backward = _bw
    return out


def maxpool2d(x, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling with window == stride; ties go to the first element
    in row-major window order."""
    if kernel != stride:
        raise ValueError("maxpool2d supports window == stride only")
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("maxpool2d expects NCHW input")
    n, c, h, w = x.data.shape
    if h % kernel or w % kernel:
        raise ValueError(f"spatial dims {h}x{w} not divisible by window {kernel}")
    ho, wo = h // kernel, w // kernel

    windows = (
        x.data.reshape(n, c, ho, kernel, wo, kernel)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, kernel * kernel)
    )
    argmax = windows.argmax(axis=-1)  # first occurrence on ties
    out = _result(np.take_along_axis(windows, argmax[..., None], -1)[..., 0], (x,), "maxpool2d")

    if out.requires_grad:
        def _bw():
            gw = np.zeros_like(windows)
            np.put_along_axis(gw, argmax[..., None], out.grad[..., None], -1)
            dx = (
                gw.reshape(n, c, ho, wo, kernel, kernel)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            _accumulate(x, dx)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# loss


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax on a plain array (no gradient tracking)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean per-pixel cross-entropy between (N,K,H,W) logits and one-hot targets.

    The mean runs over all N*H*W pixels, so values are comparable across
    image and batch sizes. Gradient w.r.t. logits is
    (softmax - target) / (N*H*W).
    """
    logits = _as_tensor(logits)
    target = _as_tensor(target)
    if logits.data.ndim != 4:
        raise ValueError("softmax_cross_entropy expects (N,K,H,W) logits")
    if logits.data.shape != target.data.shape:
        raise ValueError(
            f"logits shape {logits.data.shape} != target shape {target.data.shape}")
    if target.requires_grad:
        raise ValueError("targets must not require gradients")
    t = target.data
    if not (((t == 0.0) | (t == 1.0)).all() and (t.sum(axis=1) == 1.0).all()):
        raise ValueError("target must be one-hot along the class axis")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    pixels = t.shape[0] * t.shape[2] * t.shape[3]
    loss = np.asarray(-(t * logp).sum() / pixels)
    out = _result(loss, (logits,), "softmax_cross_entropy")

    if out.requires_grad:
        def _bw():
            probs = np.exp(logp)
            _accumulate(logits, (probs - t) * (out.grad / pixels))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers and step counter for adam_step."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0


def adam_step(params, grads, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to the arrays in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and state must have matching lengths")
    state.step_count += 1
    c1 = 1.0 - beta1 ** state.step_count
    c2 = 1.0 - beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise ValueError("missing gradient; run backward() before adam_step")
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
