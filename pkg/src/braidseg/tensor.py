"""Dense tensors with reverse-mode automatic differentiation on numpy.

Every value in the network is a Tensor wrapping a row-major numpy array,
float32 for training and float64 for gradient checking. Operations are
module-level functions that compute the forward result eagerly and record
the backward rule as a closure; Tensor.backward() replays those closures
once in reverse topological order and accumulates gradients by summation
at every use site.

Shape discipline: binary elementwise ops require identical shapes and
dtypes. There is no implicit broadcasting. The only shape-expanding
facilities are explicit ops whose gradient reductions are spelled out by
hand (scale by a python scalar, add_bias over trailing axes,
scale_channels, expand_batch). All shape errors are raised at op call
time, never during backward.

Concurrency: a graph is built and differentiated on one thread;
independent graphs on independent tensors are safe in parallel. Tensors
are treated as immutable inside a graph; the optimizer mutates parameter
.data in place only between graphs.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor", "add", "sub", "mul", "div", "scale", "add_bias",
    "leaky_relu", "relu", "sigmoid", "gelu", "softmax",
    "matmul", "conv2d", "conv_transpose2d",
    "layer_norm", "instance_norm",
    "reshape", "transpose", "concat", "narrow", "expand_batch",
    "global_avg_pool", "scale_channels", "tensor_sum",
    "bce_with_logits", "tokens_to_map", "map_to_tokens",
]


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode autodiff.

    Leaves created with requires_grad=True get a zero-filled .grad buffer
    immediately, so parameters untouched by a loss read back exactly zero.
    Calling backward() twice without zero_grad() accumulates.
    """

    __slots__ = ("data", "requires_grad", "grad", "init_kind", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, init_kind=None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data): data is already a Tensor")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.init_kind = init_kind
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- graph ---------------------------------------------------------
    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        self must hold a single scalar (the loss). Traversal is a single
        pass over the recorded graph in exact reverse topological order.
        """
        if self.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
        order = _topo_order(self)
        seeds = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = seeds.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf: fold the flow into the persistent buffer
                node.grad = node.grad + g if node.grad is not None else g.copy()
            if node._backward is not None:
                node._backward(g, seeds)

    # -- sugar (thin wrappers over the module ops) ----------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def _topo_order(root):
    """Parents-before-children ordering of the graph below root."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _flow(seeds, node, g):
    """Accumulate gradient g into node's slot in the per-backward dict."""
    k = id(node)
    if k in seeds:
        seeds[k] = seeds[k] + g
    else:
        seeds[k] = g


def _make(data, parents, backward):
    """Wire up a non-leaf tensor; drops the graph when no parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None            # non-leaf: transient, lives in the seeds dict
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_binary(name, a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError(f"{name}: both operands must be Tensors")
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")
    if a.dtype != b.dtype:
        raise ValueError(f"{name}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------

def add(a, b):
    _check_binary("add", a, b)

    def bwd(g, seeds):
        if a.requires_grad:
            _flow(seeds, a, g)
        if b.requires_grad:
            _flow(seeds, b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _check_binary("sub", a, b)

    def bwd(g, seeds):
        if a.requires_grad:
            _flow(seeds, a, g)
        if b.requires_grad:
            _flow(seeds, b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    _check_binary("mul", a, b)

    def bwd(g, seeds):
        if a.requires_grad:
            _flow(seeds, a, g * b.data)
        if b.requires_grad:
            _flow(seeds, b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b):
    _check_binary("div", a, b)

    def bwd(g, seeds):
        if a.requires_grad:
            _flow(seeds, a, g / b.data)
        if b.requires_grad:
            _flow(seeds, b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), bwd)


def scale(x, c):
    """Multiply by a python scalar (the one sanctioned broadcast)."""
    c = float(c)

    def bwd(g, seeds):
        _flow(seeds, x, g * c)

    return _make(x.data * c, (x,), bwd)


def add_bias(x, b):
    """x + b where b matches the trailing axes of x.

    Explicit trailing-axis broadcast: gradient of b sums over the leading
    axes. Covers conv/linear biases ([C]) and positional tables ([N, C]).
    """
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ValueError(f"add_bias: bias shape {b.shape} does not match trailing axes of {x.shape}")
    if b.dtype != x.dtype:
        raise ValueError(f"add_bias: dtype mismatch {x.dtype} vs {b.dtype}")
    lead = tuple(range(x.ndim - b.ndim))

    def bwd(g, seeds):
        if x.requires_grad:
            _flow(seeds, x, g)
        if b.requires_grad:
            _flow(seeds, b, g.sum(axis=lead) if lead else g.copy())

    return _make(x.data + b.data, (x, b), bwd)


def leaky_relu(x, alpha=0.01):
    mask_pos = x.data > 0
    out = np.where(mask_pos, x.data, x.data * x.dtype.type(alpha))

    def bwd(g, seeds):
        _flow(seeds, x, g * np.where(mask_pos, x.dtype.type(1), x.dtype.type(alpha)))

    return _make(out, (x,), bwd)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, x.dtype.type(0))

    def bwd(g, seeds):
        _flow(seeds, x, g * mask)

    return _make(out, (x,), bwd)


def sigmoid_np(z):
    """Plain-array logistic, stable in both tails."""
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_sigmoid_arr = sigmoid_np


def sigmoid(x):
    y = _sigmoid_arr(x.data)

    def bwd(g, seeds):
        _flow(seeds, x, g * y * (1.0 - y))

    return _make(y, (x,), bwd)


def gelu(x):
    """Exact Gauss-error-function GELU."""
    z = x.data
    phi = 0.5 * (1.0 + _sp.erf(z / np.sqrt(2.0)))
    out = (z * phi).astype(z.dtype)

    def bwd(g, seeds):
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        _flow(seeds, x, g * (phi + z * pdf).astype(z.dtype))

    return _make(out, (x,), bwd)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, seeds):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _flow(seeds, x, y * (g - dot))

    return _make(y, (x,), bwd)


# ---------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product.

    Either operand may be a plain 2-d matrix (a weight), in which case it
    is shared across the other side's batch; otherwise the leading batch
    extents must agree exactly.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")

    def bwd(g, seeds):
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if a.ndim == 2 and da.ndim > 2:
                da = da.sum(axis=tuple(range(da.ndim - 2)))
            _flow(seeds, a, da)
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and db.ndim > 2:
                db = db.sum(axis=tuple(range(db.ndim - 2)))
            _flow(seeds, b, db)

    return _make(np.matmul(a.data, b.data), (a, b), bwd)


def _im2col(xp, k, s, ho, wo):
    bsz, c, _, _ = xp.shape
    i0 = np.repeat(np.arange(k), k)
    j0 = np.tile(np.arange(k), k)
    i1 = s * np.repeat(np.arange(ho), wo)
    j1 = s * np.tile(np.arange(wo), ho)
    ii = i0[:, None] + i1[None, :]
    jj = j0[:, None] + j1[None, :]
    cols = xp[:, :, ii, jj]                       # [B, C, k*k, L]
    return cols.reshape(bsz, c * k * k, ho * wo)


def conv2d(x, w, b, stride=1, padding=0):
    """2-d cross-correlation plus bias. x [B,Cin,H,W], w [Cout,Cin,k,k].

    Odd square kernels only; output extent floor((H + 2p - k)/s) + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 != 1:
        raise ValueError(f"conv2d: kernel must be square with odd extent, got {w.shape[2:]}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input channels {x.shape[1]} != kernel channels {cin}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if x.dtype != w.dtype or x.dtype != b.dtype:
        raise ValueError("conv2d: dtype mismatch among x, w, b")
    s, p = int(stride), int(padding)
    bsz, _, h, wd = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: empty output for input {x.shape}, k={k}, s={s}, p={p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, ho, wo)              # [B, Cin*k*k, L]
    wmat = w.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols) + b.data[:, None]
    out = out.reshape(bsz, cout, ho, wo)

    def bwd(g, seeds):
        gm = g.reshape(bsz, cout, ho * wo)
        if b.requires_grad:
            _flow(seeds, b, gm.sum(axis=(0, 2)))
        if w.requires_grad:
            dw = np.einsum("bol,bxl->ox", gm, cols)
            _flow(seeds, w, dw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm)          # [B, Cin*k*k, L]
            dcols = dcols.reshape(bsz, cin, k * k, ho, wo)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += dcols[:, :, ki * k + kj]
            _flow(seeds, x, dxp[:, :, p:p + h, p:p + wd] if p else dxp)

    return _make(out, (x, w, b), bwd)


def conv_transpose2d(x, w, b, stride=2):
    """Transposed convolution (fractional stride). x [B,Cin,H,W], w [Cin,Cout,k,k].

    Output extent (H-1)*stride + k; with k = stride = 2 it exactly doubles.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    cin, cout, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"conv_transpose2d: kernel must be square, got {w.shape[2:]}")
    if x.shape[1] != cin:
        raise ValueError(f"conv_transpose2d: input channels {x.shape[1]} != kernel channels {cin}")
    if b.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
    if x.dtype != w.dtype or x.dtype != b.dtype:
        raise ValueError("conv_transpose2d: dtype mismatch among x, w, b")
    s = int(stride)
    bsz, _, h, wd = x.shape
    ho, wo = (h - 1) * s + k, (wd - 1) * s + k
    # prod[b, i, j, co, ki, kj] = sum_ci x[b,ci,i,j] w[ci,co,ki,kj]
    prod = np.tensordot(x.data, w.data, axes=([1], [0]))
    out = np.zeros((bsz, cout, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + s * h:s, kj:kj + s * wd:s] += prod[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    out += b.data[None, :, None, None]

    def bwd(g, seeds):
        if b.requires_grad:
            _flow(seeds, b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for ki in range(k):
                for kj in range(k):
                    sl = g[:, :, ki:ki + s * h:s, kj:kj + s * wd:s]
                    dw[:, :, ki, kj] = np.einsum("bchw,bohw->co", x.data, sl)
            _flow(seeds, w, dw)
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for ki in range(k):
                for kj in range(k):
                    sl = g[:, :, ki:ki + s * h:s, kj:kj + s * wd:s]
                    dx += np.tensordot(sl, w.data[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
            _flow(seeds, x, dx)

    return _make(out, (x, w, b), bwd)


# ---------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------

def _norm(name, x, gamma, beta, axes, param_axis, pshape, eps):
    if gamma.shape != beta.shape:
        raise ValueError(f"{name}: gamma shape {gamma.shape} != beta shape {beta.shape}")
    if x.dtype != gamma.dtype or x.dtype != beta.dtype:
        raise ValueError(f"{name}: dtype mismatch among x, gamma, beta")
    mu = x.data.mean(axis=axes, keepdims=True)
    xm = x.data - mu
    var = (xm * xm).mean(axis=axes, keepdims=True)
    ivar = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xm * ivar
    gview = gamma.data.reshape(pshape)
    out = xhat * gview + beta.data.reshape(pshape)
    osum = tuple(i for i in range(x.ndim) if i != param_axis)  # reduce onto the param axis

    def bwd(g, seeds):
        if beta.requires_grad:
            _flow(seeds, beta, g.sum(axis=osum).reshape(beta.shape))
        if gamma.requires_grad:
            _flow(seeds, gamma, (g * xhat).sum(axis=osum).reshape(gamma.shape))
        if x.requires_grad:
            dxhat = g * gview
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            _flow(seeds, x, ivar * (dxhat - m1 - xhat * m2))

    return _make(out, (x, gamma, beta), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis (per token); gamma/beta of shape [C]."""
    if gamma.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm: gamma shape {gamma.shape} != ({x.shape[-1]},)")
    pshape = (1,) * (x.ndim - 1) + (x.shape[-1],)
    return _norm("layer_norm", x, gamma, beta, (x.ndim - 1,), x.ndim - 1, pshape, eps)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Normalize each (sample, channel) over its spatial extent; x [B,C,H,W]."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm: need [B,C,H,W], got {x.shape}")
    if gamma.shape != (x.shape[1],):
        raise ValueError(f"instance_norm: gamma shape {gamma.shape} != ({x.shape[1]},)")
    return _norm("instance_norm", x, gamma, beta, (2, 3), 1, (1, x.shape[1], 1, 1), eps)


# ---------------------------------------------------------------------
# shape movement
# ---------------------------------------------------------------------

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def bwd(g, seeds):
        _flow(seeds, x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bwd)


def transpose(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: axes {axes} is not a permutation of 0..{x.ndim - 1}")
    inv = np.argsort(axes)

    def bwd(g, seeds):
        _flow(seeds, x, g.transpose(inv))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def concat(parts, axis):
    if not parts:
        raise ValueError("concat: empty input list")
    axis = int(axis)
    ref = parts[0]
    for p in parts[1:]:
        if p.ndim != ref.ndim:
            raise ValueError("concat: rank mismatch")
        for ax in range(ref.ndim):
            if ax != axis % ref.ndim and p.shape[ax] != ref.shape[ax]:
                raise ValueError(f"concat: shape mismatch {p.shape} vs {ref.shape} off axis {axis}")
        if p.dtype != ref.dtype:
            raise ValueError("concat: dtype mismatch")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, seeds):
        for i, p in enumerate(parts):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                _flow(seeds, p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis; backward zero-pads the complement."""
    axis, start, length = int(axis), int(start), int(length)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ValueError(f"narrow: [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g, seeds):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        _flow(seeds, x, dx)

    return _make(x.data[sl].copy(), (x,), bwd)


def expand_batch(x, n):
    """Tile a leading unit axis to n (backward sums the copies)."""
    if x.shape[0] != 1:
        raise ValueError(f"expand_batch: leading axis must be 1, got {x.shape}")
    reps = (int(n),) + (1,) * (x.ndim - 1)

    def bwd(g, seeds):
        _flow(seeds, x, g.sum(axis=0, keepdims=True))

    return _make(np.tile(x.data, reps), (x,), bwd)


def global_avg_pool(x):
    """[B,C,H,W] -> [B,C,1,1] spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: need [B,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g, seeds):
        _flow(seeds, x, np.broadcast_to(g / hw, x.shape).copy())

    return _make(out, (x,), bwd)


def scale_channels(x, s):
    """Per-channel gate: x [B,C,H,W] * s [B,C,1,1] (explicit spatial broadcast)."""
    if x.ndim != 4 or s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError(f"scale_channels: got x {x.shape}, gate {s.shape}")
    if x.dtype != s.dtype:
        raise ValueError("scale_channels: dtype mismatch")

    def bwd(g, seeds):
        if x.requires_grad:
            _flow(seeds, x, g * s.data)
        if s.requires_grad:
            _flow(seeds, s, (g * x.data).sum(axis=(2, 3), keepdims=True))

    return _make(x.data * s.data, (x, s), bwd)


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    def bwd(g, seeds):
        _flow(seeds, x, np.full(x.shape, g, dtype=x.dtype))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------

def bce_with_logits(z, t):
    """Mean binary cross-entropy straight from logits (stable in both tails)."""
    _check_binary("bce_with_logits", z, t)
    zd, td = z.data, t.data
    per = np.maximum(zd, 0) - zd * td + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size

    def bwd(g, seeds):
        if z.requires_grad:
            _flow(seeds, z, g * (_sigmoid_arr(zd) - td) / n)
        if t.requires_grad:
            _flow(seeds, t, g * (-zd) / n)

    return _make(np.asarray(per.mean(), dtype=zd.dtype), (z, t), bwd)


# ---------------------------------------------------------------------
# token <-> grid views
# ---------------------------------------------------------------------

def _grid_side(n):
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"token count {n} is not a perfect square")
    return g


def map_to_tokens(x):
    """[B,C,g,g] feature map -> [B,g*g,C] row-major token sequence."""
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ValueError(f"map_to_tokens: need square [B,C,g,g], got {x.shape}")
    bsz, c, g, _ = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (bsz, g * g, c))


def tokens_to_map(x):
    """[B,N,C] tokens -> [B,C,sqrt(N),sqrt(N)]; N must be a perfect square."""
    if x.ndim != 3:
        raise ValueError(f"tokens_to_map: need [B,N,C], got {x.shape}")
    bsz, n, c = x.shape
    g = _grid_side(n)
    return transpose(reshape(x, (bsz, g, g, c)), (0, 3, 1, 2))
