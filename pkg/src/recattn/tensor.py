"""Dense float64 tensors with reverse-mode automatic differentiation.

Every numeric operation in the package goes through the functions here, so
each gradient is machine-checkable against finite differences.  The recorded
graph (parent links plus per-operation backward rules) plays the role of a
computation tape: ``backward`` replays it once in reverse topological order
and rejects a second replay of the same root.

All computation is in 64-bit floats.  Tensor payloads are frozen after
construction; parameter updates rebind ``.data`` to a fresh array instead of
mutating, so a recorded graph can never be invalidated behind its back.
"""

from __future__ import annotations

import struct

import numpy as np

# Epsilon added inside every logarithm.
LOG_EPS = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A dense float64 array, optionally accumulating a gradient.

    ``requires_grad`` tensors own a same-shape ``grad`` buffer.  Tensors
    produced by operations keep references to their parents and a backward
    rule; leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_ran", "_visits")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros(arr.shape) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._backward_ran = False
        self._visits = 0

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal: adopt an array we just built, without copying.
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = np.zeros(arr.shape) if requires_grad else None
        out._parents = ()
        out._backward_fn = None
        out._backward_ran = False
        out._visits = 0
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def assign(self, arr: np.ndarray) -> None:
        """Rebind the payload (used by the optimizer; never mutates in place)."""
        new = np.ascontiguousarray(arr, dtype=np.float64)
        if new.shape != self.data.shape:
            raise ShapeError(f"assign shape {new.shape} != tensor shape {self.data.shape}")
        new.flags.writeable = False
        self.data = new

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the real implementations are module functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(data, any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a single-element tensor.  Within one call each recorded
    operation is visited exactly once (reverse topological order); gradients
    flowing into the same tensor along several paths are summed before its
    rule fires.  Calling backward twice on the same root is rejected.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward was already run for this loss; rebuild the forward pass first")
    loss._backward_ran = True
    if not loss.requires_grad:
        return

    # Iterative postorder DFS; recursion would overflow on long op chains.
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = discovered, 1 = finished
    stack = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if nid not in state:
            state[nid] = 0
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in state:
                    stack.append(parent)
        else:
            stack.pop()
            if state[nid] == 0:
                state[nid] = 1
                topo.append(node)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._visits += 1
        if node.grad is not None:
            node.grad += g
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in pending:
                # Allocate rather than mutate: pg may alias another buffer.
                pending[pid] = pending[pid] + pg
            else:
                pending[pid] = pg


def zero_grads(params) -> None:
    """Zero the grad buffers of an iterable (or name->Tensor mapping) of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for t in values:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward_fn)


def softmax_over_rows(x: Tensor) -> Tensor:
    """Softmax along the row index (axis 0): every column sums to 1.

    Stabilized by subtracting the per-column maximum before exponentiating.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_over_rows needs a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_over_rows: input contains non-finite values")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def backward_fn(g):
        # d/dx of a column softmax: s * (g - sum_i g_i s_i) per column.
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return _result(out, (x,), backward_fn)


# im2col gather/scatter index cache, keyed by the full geometry.
_CONV_PLANS: dict[tuple, tuple] = {}


def _conv_plan(c_in, h, w, k, stride, dilation):
    key = (c_in, h, w, k, stride, dilation)
    plan = _CONV_PLANS.get(key)
    if plan is not None:
        return plan
    pad = dilation * (k - 1) // 2
    span = dilation * (k - 1) + 1
    hp, wp = h + 2 * pad, w + 2 * pad
    if span > hp or span > wp:
        raise ShapeError(f"kernel span {span} exceeds padded input {hp}x{wp}")
    h_out = (hp - span) // stride + 1
    w_out = (wp - span) // stride + 1
    ki = np.repeat(np.arange(k) * dilation, k)
    kj = np.tile(np.arange(k) * dilation, k)
    oi = stride * np.repeat(np.arange(h_out), w_out)
    oj = stride * np.tile(np.arange(w_out), h_out)
    rows = ki[:, None] + oi[None, :]          # (k*k, P)
    cols = kj[:, None] + oj[None, :]
    flat = rows * wp + cols                   # per-channel flat index into padded plane
    flat_all = (np.arange(c_in)[:, None, None] * (hp * wp) + flat[None]).ravel()
    plan = (pad, h_out, w_out, rows, cols, flat_all, hp, wp)
    _CONV_PLANS[key] = plan
    return plan


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with bias over a CxHxW tensor.

    Padding is fixed at dilation*(k-1)/2 per side, so stride-1 convolutions
    preserve spatial size.  Kernel size must be odd.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and OxCxKxK weights, got {x.shape} and {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv2d stride/dilation must be >= 1, got {stride}/{dilation}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[0]} channels, weights expect {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({c_out},)")

    _, h, win = x.shape
    pad, h_out, w_out, rows, cols, flat_all, hp, wp = _conv_plan(c_in, h, win, k, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    patches = xp[:, rows, cols].reshape(c_in * k * k, h_out * w_out)
    w_mat = w.data.reshape(c_out, c_in * k * k)
    out = (w_mat @ patches + b.data[:, None]).reshape(c_out, h_out, w_out)

    def backward_fn(g):
        g_mat = g.reshape(c_out, h_out * w_out)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g_mat @ patches.T).reshape(w.shape)
        if b.requires_grad:
            gb = g_mat.sum(axis=1)
        if x.requires_grad:
            g_patches = w_mat.T @ g_mat
            gxp = np.bincount(flat_all, weights=g_patches.ravel(),
                              minlength=c_in * hp * wp).reshape(c_in, hp, wp)
            gx = gxp[:, pad:pad + h, pad:pad + win] if pad else gxp
        return gx, gw, gb

    return _result(out, (x, w, b), backward_fn)


def _binary(a, b, forward, grad_a, grad_b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = forward(ad, bd)

    def _fit(g, target):
        # Collapse the broadcast when one operand was a scalar.
        if g.shape != target.shape:
            return np.asarray(g.sum(), dtype=np.float64).reshape(target.shape)
        return g

    def backward_fn(g):
        ga = _fit(grad_a(g, ad, bd), ad) if a.requires_grad else None
        gb = _fit(grad_b(g, ad, bd), bd) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward_fn)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; either side may be a scalar."""
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward_fn(g):
        return (g * mask,)

    return _result(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function 1/(1+exp(-z)), computed without overflow."""
    x = _as_tensor(x)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward_fn)


def log_eps(x: Tensor) -> Tensor:
    """log(x + eps) with the package-wide epsilon, so log(0) stays finite."""
    x = _as_tensor(x)
    shifted = x.data + LOG_EPS

    def backward_fn(g):
        return (g / shifted,)

    return _result(np.log(shifted), (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(np.asarray(x.data.mean()), (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) > 1:
        raise ShapeError(f"reshape allows at most one inferred dimension, got {shape}")
    if -1 in shape:
        rest = int(np.prod([s for s in shape if s != -1]))
        if rest == 0 or x.size % rest:
            raise ShapeError(f"reshape element count mismatch: {x.shape} -> {shape}")
        shape = tuple(x.size // rest if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape element count mismatch: {x.shape} -> {shape}")
    old = x.shape

    def backward_fn(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    """Axis permutation; defaults to reversing all axes (matrix transpose in 2-D)."""
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward_fn)


def concat_channels(tensors) -> Tensor:
    """Concatenate CxHxW tensors along the channel axis."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    spatial = tensors[0].shape[1:]
    for t in tensors:
        if t.data.ndim != 3 or t.shape[1:] != spatial:
            raise ShapeError(f"concat_channels spatial mismatch: {t.shape} vs {tensors[0].shape}")
    sizes = [t.shape[0] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=0))

    return _result(np.concatenate([t.data for t in tensors], axis=0), tensors, backward_fn)


# ---------------------------------------------------------------------------
# Bilinear resampling
# ---------------------------------------------------------------------------

def _resample_axis_plan(n_in: int, n_out: int):
    """Source indices and fractional weights for one axis (half-pixel centers)."""
    if n_in == 1:
        idx0 = np.zeros(n_out, dtype=np.intp)
        return idx0, idx0, np.zeros(n_out)
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 2)
    frac = src - i0
    return i0, i0 + 1, frac


def _lerp_axis(arr: np.ndarray, i0, i1, frac, axis: int) -> np.ndarray:
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(frac)
    f = frac.reshape(shape)
    # a0 + f*(a1-a0) keeps constants bit-exact and stays inside [a0, a1].
    out = a0 + f * (a1 - a0)
    return np.clip(out, np.minimum(a0, a1), np.maximum(a0, a1))


def _lerp_axis_backward(g: np.ndarray, i0, i1, frac, axis: int, n_in: int) -> np.ndarray:
    shape = [1] * g.ndim
    shape[axis] = len(frac)
    f = frac.reshape(shape)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    gx = np.zeros(out_shape)
    np.add.at(gx, (slice(None),) * axis + (i0,), g * (1.0 - f))
    np.add.at(gx, (slice(None),) * axis + (i1,), g * f)
    return gx


def resize_bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a ...xHxW array (no gradient tracking)."""
    h, w = arr.shape[-2], arr.shape[-1]
    r0, r1, rf = _resample_axis_plan(h, out_h)
    c0, c1, cf = _resample_axis_plan(w, out_w)
    tmp = _lerp_axis(arr, r0, r1, rf, arr.ndim - 2)
    return _lerp_axis(tmp, c0, c1, cf, arr.ndim - 1)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resample of a CxHxW tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"resize_bilinear needs a CxHxW tensor, got {x.shape}")
    c, h, w = x.shape
    r0, r1, rf = _resample_axis_plan(h, out_h)
    c0, c1, cf = _resample_axis_plan(w, out_w)
    tmp = _lerp_axis(x.data, r0, r1, rf, 1)
    out = _lerp_axis(tmp, c0, c1, cf, 2)

    def backward_fn(g):
        gt = _lerp_axis_backward(g, c0, c1, cf, 2, w)
        return (_lerp_axis_backward(gt, r0, r1, rf, 1, h),)

    return _result(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RECATTN1"


def save_params(params: dict[str, Tensor], path) -> None:
    """Write named parameters as a flat binary container.

    Layout: magic, then per parameter (lexicographic by name): u32 name
    length, UTF-8 name, u32 rank, u32 per dimension, little-endian f64 values.
    """
    chunks = [CHECKPOINT_MAGIC]
    for name in sorted(params):
        tensor = params[name]
        encoded = name.encode("utf-8")
        dims = tensor.shape
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", len(dims)))
        for d in dims:
            chunks.append(struct.pack("<I", d))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_params(path) -> dict[str, Tensor]:
    """Read a parameter container written by save_params; tensors are trainable."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic {blob[:8]!r})")
    params: dict[str, Tensor] = {}
    offset = 8
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        params[name] = Tensor(values.reshape(dims), requires_grad=True)
    return params
