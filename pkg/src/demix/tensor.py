"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every op that sees a grad-requiring input
records a backward closure on its output. ``backward()`` walks the tape
in reverse topological order, accumulates gradients additively and then
frees the tape, so a second backward needs a fresh forward pass.
Gradients are NOT cleared between backward calls; zero them explicitly
(``zero_grad``) between optimization steps.

Everything runs in 64-bit floats. There is no broadcasting: the only
shape-changing additions are the bias terms inside ``linear`` and
``add_channel_bias``.
"""

import numpy as np

from .errors import ContractError, DimensionError

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional float64 array plus optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _non_scalar(self)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode accumulation from a scalar loss into every
        grad-requiring ancestor. Frees the tape afterwards."""
        if self.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        topo = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            node._backward = None
            node._prev = ()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the named functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))


def _non_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                stack.append((child, False))
    return order


def _result(data, parents, backward):
    """Wrap an op result; records the tape edge only when it matters."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """Trainable tensor with a hierarchical name, e.g. ``encoder0.conv1.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.data + b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _result(a.data * c, (a,), backward)


def hadamard(a, b):
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def tensor_abs(x):
    sign = np.sign(x.data)  # subgradient 0 at 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * sign)

    return _result(np.abs(x.data), (x,), backward)


def tensor_sum(x):
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return _result(np.array(x.data.sum()), (x,), backward)


def mean(x):
    n = x.size

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g) / n))

    return _result(np.array(x.data.mean()), (x,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def permute(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward)


def narrow(x, axis, start, length):
    """Slice ``length`` entries from ``start`` along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) exceeds axis {axis} "
            f"of shape {x.shape}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            x.accumulate_grad(full)

    return _result(x.data[index].copy(), (x,), backward)


def pad_axis(x, axis, before, after):
    """Zero-fill ``before``/``after`` entries along one axis."""
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    index = [slice(None)] * x.ndim
    index[axis] = slice(before, before + x.shape[axis])
    index = tuple(index)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g[index])

    return _result(np.pad(x.data, widths), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * t.ndim
                index[axis] = slice(start, stop)
                t.accumulate_grad(g[tuple(index)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear and convolution ops
# ---------------------------------------------------------------------------

def linear(x, weight, bias):
    """Affine map along the last axis: y[..., j] = sum_i x[..., i] w[j, i] + b[j]."""
    f_out, f_in = weight.shape
    if x.shape[-1] != f_in:
        raise DimensionError(
            f"linear: input last dim {x.shape[-1]} != weight F_in {f_in} "
            f"(x {x.shape}, weight {weight.shape})"
        )
    if bias.shape != (f_out,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({f_out},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, f_in)
    y2 = x2 @ weight.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, f_out)
        if x.requires_grad:
            x.accumulate_grad((g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            weight.accumulate_grad(g2.T @ x2)
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))

    return _result(y2.reshape(lead + (f_out,)), (x, weight, bias), backward)


def add_channel_bias(x, bias):
    """Add a per-channel bias along axis 0 of a (C, ...) tensor."""
    if bias.shape != (x.shape[0],):
        raise DimensionError(
            f"add_channel_bias: bias shape {bias.shape} != ({x.shape[0]},)"
        )
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(x.shape[0], -1).sum(axis=1))

    return _result(x.data + bias.data.reshape(shape), (x, bias), backward)


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s1 * sh, s2 * sw),
        writeable=False,
    )
    return windows.reshape(c * kh * kw, ho * wo)


def _conv_forward(x, kernel, stride, padding):
    (sh, sw), (ph, pw) = stride, padding
    c_out, c_in, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    return (kernel.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo), cols


def _conv_input_grad(dy, kernel, stride, padding, x_shape):
    """Adjoint of _conv_forward with respect to its input."""
    (sh, sw), (ph, pw) = stride, padding
    c_out, c_in, kh, kw = kernel.shape
    _, h, w = x_shape
    ho, wo = dy.shape[1], dy.shape[2]
    dcols = kernel.reshape(c_out, -1).T @ dy.reshape(c_out, -1)
    dcols = dcols.reshape(c_in, kh, kw, ho, wo)
    dxp = np.zeros((c_in, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, i, j]
    if ph or pw:
        return dxp[:, ph:ph + h, pw:pw + w]
    return dxp


def _conv_kernel_grad(dy, cols, kernel_shape):
    c_out = kernel_shape[0]
    return (dy.reshape(c_out, -1) @ cols.T).reshape(kernel_shape)


def conv2d(x, kernel, stride=(1, 1), padding=(0, 0)):
    """Cross-correlation of a (C_in, H, W) input with a (C_out, C_in, kh, kw) kernel."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d: need (C,H,W) input and (Co,Ci,kh,kw) kernel, "
            f"got {x.shape} and {kernel.shape}"
        )
    c_out, c_in, kh, kw = kernel.shape
    (sh, sw), (ph, pw) = stride, padding
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv2d: input channels {x.shape[0]} != kernel C_in {c_in}"
        )
    if kh > x.shape[1] + 2 * ph or kw > x.shape[2] + 2 * pw:
        raise DimensionError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input "
            f"({x.shape[1] + 2 * ph}x{x.shape[2] + 2 * pw})"
        )
    y, cols = _conv_forward(x.data, kernel.data, stride, padding)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                _conv_input_grad(g, kernel.data, stride, padding, x.shape)
            )
        if kernel.requires_grad:
            kernel.accumulate_grad(_conv_kernel_grad(g, cols, kernel.shape))

    return _result(y, (x, kernel), backward)


def conv_transpose2d(x, kernel, stride=(1, 1)):
    """Adjoint of conv2d with the same kernel and stride (zero padding).

    Kernel layout is (C_in, C_out, kh, kw) where C_in matches the input;
    output height is (H-1)*sh + kh.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d: need (C,H,W) input and (Ci,Co,kh,kw) kernel, "
            f"got {x.shape} and {kernel.shape}"
        )
    c_in, c_out, kh, kw = kernel.shape
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise ContractError(f"conv_transpose2d: stride {stride} must be >= 1")
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv_transpose2d: input channels {x.shape[0]} != kernel C_in {c_in}"
        )
    out_shape = (c_out, (x.shape[1] - 1) * sh + kh, (x.shape[2] - 1) * sw + kw)
    y = _conv_input_grad(x.data, kernel.data, stride, (0, 0), out_shape)

    def backward(g):
        if x.requires_grad or kernel.requires_grad:
            dx, cols = _conv_forward(g, kernel.data, stride, (0, 0))
            if x.requires_grad:
                x.accumulate_grad(dx)
            if kernel.requires_grad:
                kernel.accumulate_grad(
                    _conv_kernel_grad(x.data, cols, kernel.shape)
                )

    return _result(y, (x, kernel), backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f, x, eps=1e-5):
    """Compare backward() gradients of a scalar function against central
    differences. Returns max over coordinates of |diff| / max(1, |analytic|)."""
    probe = Tensor(np.array(x.data), requires_grad=True)
    loss = f(probe)
    if loss.size != 1:
        raise ContractError("finite_diff_check: f must be scalar-valued")
    loss.backward()
    analytic = (probe.grad if probe.grad is not None
                else np.zeros_like(probe.data)).reshape(-1)

    flat = probe.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = f(Tensor(probe.data)).item()
            flat[i] = saved - eps
            fm = f(Tensor(probe.data)).item()
            flat[i] = saved
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(numeric - analytic[i]) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
