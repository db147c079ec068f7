"""Parameterized building blocks: attention, transformer and residual units.

A Block is a plain container of parameter Tensors and child Blocks; forward
methods are pure functions of (parameters, inputs). named_params() walks
the attribute tree in insertion order, producing the stable dotted names
used by checkpoints, the optimizer and the gradient checker.

Initialization is two-phase: construction allocates zero parameter
buffers tagged with an init kind; init_params() then fills each tensor
from an RNG seeded by (global seed, name hash). Values therefore do not
depend on construction order, so two models sharing a parameter name and
seed hold bit-identical values even when one omits whole submodules.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Block:
    """Base container; subclasses assign Tensors / Blocks / lists of Blocks."""

    def named_params(self, prefix=""):
        out = []
        for attr, val in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((name, val))
            elif isinstance(val, Block):
                out.extend(val.named_params(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Block):
                        out.extend(item.named_params(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


def param(shape, kind, dtype=np.float32, fan_in=None):
    """Allocate an uninitialized (zero) parameter tagged with its init rule."""
    tag = kind if fan_in is None else f"{kind}:{int(fan_in)}"
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, init_kind=tag)


def stable_hash(name):
    return zlib.crc32(name.encode("utf-8"))


def init_params(block, seed):
    """Fill every parameter from its tagged rule, RNG keyed by (seed, name)."""
    for name, p in block.named_params():
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), stable_hash(name)]))
        kind, _, arg = (p.init_kind or "zeros").partition(":")
        if kind == "zeros":
            continue
        elif kind == "ones":
            p.data = np.ones_like(p.data)
        elif kind == "trunc_normal":
            p.data = _trunc_normal(rng, p.shape, 0.02).astype(p.dtype)
        elif kind == "he":
            fan = int(arg) if arg else int(np.prod(p.shape[1:]))
            p.data = rng.normal(0.0, np.sqrt(2.0 / fan), size=p.shape).astype(p.dtype)
        else:
            raise ValueError(f"unknown init kind {p.init_kind!r} on {name}")
        p.zero_grad()


def _trunc_normal(rng, shape, std):
    v = rng.normal(0.0, std, size=shape)
    bad = np.abs(v) > 2 * std
    while bad.any():
        v[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(v) > 2 * std
    return v


def cast_block(block, dtype):
    """Re-type every parameter buffer in place (f32 <-> f64)."""
    for _, p in block.named_params():
        p.data = p.data.astype(dtype)
        p.zero_grad()
    return block


# ---------------------------------------------------------------------
# elementary parameter bundles
# ---------------------------------------------------------------------

class Linear(Block):
    def __init__(self, cin, cout, dtype=np.float32, init="trunc_normal"):
        self.w = param((cin, cout), init, dtype, fan_in=cin)
        self.b = param((cout,), "zeros", dtype)

    def forward(self, x):
        return T.add_bias(T.matmul(x, self.w), self.b)


class LayerNorm(Block):
    def __init__(self, c, dtype=np.float32):
        self.g = param((c,), "ones", dtype)
        self.b = param((c,), "zeros", dtype)

    def forward(self, x):
        return T.layer_norm(x, self.g, self.b)


class InstanceNorm(Block):
    def __init__(self, c, dtype=np.float32):
        self.g = param((c,), "ones", dtype)
        self.b = param((c,), "zeros", dtype)

    def forward(self, x):
        return T.instance_norm(x, self.g, self.b)


class Conv(Block):
    def __init__(self, cin, cout, k, dtype=np.float32, init="he"):
        self.w = param((cout, cin, k, k), init, dtype, fan_in=cin * k * k)
        self.b = param((cout,), "zeros", dtype)
        self._k = k

    def forward(self, x, stride=1, padding=0):
        return T.conv2d(x, self.w, self.b, stride=stride, padding=padding)


class Mlp(Block):
    """Two-layer MLP with GELU, hidden width = ratio * C."""

    def __init__(self, c, ratio=4, dtype=np.float32):
        self.fc1 = Linear(c, ratio * c, dtype)
        self.fc2 = Linear(ratio * c, c, dtype)

    def forward(self, x):
        return self.fc2.forward(T.gelu(self.fc1.forward(x)))


# ---------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------

class Attention(Block):
    """Multi-head scaled dot-product attention over token sequences.

    Queries / keys / values may come from different sequences (cross
    attention); self attention passes the same tensor three times.
    Scale is 1/sqrt(C/heads). No masking anywhere in this model.
    """

    def __init__(self, c, heads, dtype=np.float32):
        if c % heads != 0:
            raise ValueError(f"attention: width {c} not divisible by {heads} heads")
        self.wq = Linear(c, c, dtype)
        self.wk = Linear(c, c, dtype)
        self.wv = Linear(c, c, dtype)
        self.wo = Linear(c, c, dtype)
        self._heads = heads
        self._c = c

    def forward(self, q_in, k_in, v_in):
        h, c = self._heads, self._c
        hd = c // h
        bsz, nq = q_in.shape[0], q_in.shape[1]
        nk = k_in.shape[1]
        q = self._split(self.wq.forward(q_in), bsz, nq, h, hd)
        k = self._split(self.wk.forward(k_in), bsz, nk, h, hd)
        v = self._split(self.wv.forward(v_in), bsz, nk, h, hd)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)                                   # [B, h, Nq, hd]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bsz, nq, c))
        return self.wo.forward(out)

    @staticmethod
    def _split(x, bsz, n, h, hd):
        return T.transpose(T.reshape(x, (bsz, n, h, hd)), (0, 2, 1, 3))


def window_partition(x, w):
    """[B, g*g, C] -> [B*(g/w)^2, w*w, C] non-overlapping windows."""
    bsz, n, c = x.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"window_partition: token count {n} is not square")
    if g % w != 0:
        raise ValueError(f"window_partition: window {w} does not divide grid {g}")
    nw = g // w
    x = T.reshape(x, (bsz, nw, w, nw, w, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (bsz * nw * nw, w * w, c))


def window_merge(x, w, g, bsz):
    """Inverse of window_partition."""
    nw = g // w
    c = x.shape[-1]
    x = T.reshape(x, (bsz, nw, nw, w, w, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (bsz, g * g, c))


class TransformerBlock(Block):
    """Pre-norm transformer layer with an optional additive injection.

    out' = MSA(LN(x)) [+ LN(injected)] + x
    out  = out' + MLP(LN(out'))

    The injection is a token tensor from the other branch; its LN uses the
    caller-supplied parameter pair (each injection site owns one), so a
    zero injected tensor contributes exactly zero and the layer reduces
    bitwise to the uninjected form.
    """

    def __init__(self, c, heads, window=None, dtype=np.float32):
        self.ln1 = LayerNorm(c, dtype)
        self.attn = Attention(c, heads, dtype)
        self.ln2 = LayerNorm(c, dtype)
        self.mlp = Mlp(c, 4, dtype)
        self._window = window    # None = global attention

    def forward(self, x, injected=None, injected_ln=None):
        h = self.ln1.forward(x)
        if self._window is None:
            a = self.attn.forward(h, h, h)
        else:
            bsz, n = x.shape[0], x.shape[1]
            g = int(round(np.sqrt(n)))
            hw = window_partition(h, self._window)
            aw = self.attn.forward(hw, hw, hw)
            a = window_merge(aw, self._window, g, bsz)
        if injected is not None:
            if injected_ln is None:
                raise ValueError("transformer block: injection requires its LN parameters")
            a = T.add(a, injected_ln.forward(injected))
        x = T.add(a, x)
        return T.add(x, self.mlp.forward(self.ln2.forward(x)))


# ---------------------------------------------------------------------
# convolutional residual unit with channel gating
# ---------------------------------------------------------------------

class ResidualSeBlock(Block):
    """3x3 double-conv residual unit with a squeeze-excite channel gate.

    y = act(shortcut(x) + gate * F(x))
    F = conv3x3(stride) -> IN -> act -> conv3x3 -> IN
    gate = sigmoid(expand(act(reduce(gap(F)))))   (reduction ratio 4)

    stride 1 keeps an identity shortcut (requires cin == cout); stride 2
    (or a width change) uses a 1x1 projection shortcut with its own IN.
    """

    def __init__(self, cin, cout, stride=1, dtype=np.float32):
        if stride not in (1, 2):
            raise ValueError(f"residual block: stride must be 1 or 2, got {stride}")
        self.conv1 = Conv(cin, cout, 3, dtype)
        self.n1 = InstanceNorm(cout, dtype)
        self.conv2 = Conv(cout, cout, 3, dtype)
        self.n2 = InstanceNorm(cout, dtype)
        hidden = max(cout // 4, 1)
        self.se_reduce = Conv(cout, hidden, 1, dtype)
        self.se_expand = Conv(hidden, cout, 1, dtype)
        self._stride = stride
        if stride != 1 or cin != cout:
            self.proj = Conv(cin, cout, 1, dtype)
            self.np_ = InstanceNorm(cout, dtype)
        else:
            self.proj = None

    def forward(self, x):
        f = self.conv1.forward(x, stride=self._stride, padding=1)
        f = T.leaky_relu(self.n1.forward(f))
        f = self.conv2.forward(f, stride=1, padding=1)
        f = self.n2.forward(f)
        s = T.global_avg_pool(f)
        s = T.leaky_relu(self.se_reduce.forward(s))
        s = T.sigmoid(self.se_expand.forward(s))
        gated = T.scale_channels(f, s)
        if self.proj is None:
            shortcut = x
        else:
            shortcut = self.np_.forward(self.proj.forward(x, stride=self._stride))
        return T.leaky_relu(T.add(shortcut, gated))


# ---------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------

class PatchEmbed(Block):
    """Non-overlapping 16x16 projection of a 1-channel image to tokens,
    plus a learned absolute positional table.

    Implemented as reshape-patchify + matmul, which is exactly the
    stride-16 16x16 convolution on non-overlapping patches.
    """

    PATCH = 16

    def __init__(self, c, grid, dtype=np.float32):
        p = self.PATCH
        self.w = param((p * p, c), "trunc_normal", dtype, fan_in=p * p)
        self.b = param((c,), "zeros", dtype)
        self.pos = param((grid * grid, c), "trunc_normal", dtype)
        self._grid = grid

    def forward(self, x):
        p, g = self.PATCH, self._grid
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"patch embed: need [B,1,H,W], got {x.shape}")
        if x.shape[2] != g * p or x.shape[3] != g * p:
            raise ValueError(f"patch embed: spatial {x.shape[2:]} != {(g * p, g * p)}")
        bsz = x.shape[0]
        x = T.reshape(x, (bsz, 1, g, p, g, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (bsz, g * g, p * p))
        tokens = T.add_bias(T.matmul(x, self.w), self.b)
        return T.add_bias(tokens, self.pos)
