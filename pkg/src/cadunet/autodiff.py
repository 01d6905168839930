"""Reverse-mode automatic differentiation over dense real numpy tensors.

Tensors form an implicit DAG through parent links; backward() linearizes the
graph reaching the loss into a Tape and walks it once in reverse. The operator
set is exactly what the enhancement network needs: elementwise arithmetic and
activations, matrix products, 2-D convolution and its transpose, pooling,
concatenation, slicing, axis permutation and reductions.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense real tensor, optionally tracking provenance for backward()."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None, op="leaf"):
        if isinstance(data, np.ndarray):
            if data.dtype.kind != "f":
                data = data.astype(DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    # arithmetic sugar; scalars are the only permitted broadcast
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(np.array(data, copy=True), requires_grad=True, op="param")
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _node(data, parents, bwd, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, bwd, op)
    return Tensor(data, op=op)


def _acc(t, g):
    # never mutate g in place: it may be shared with a sibling accumulation
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if not isinstance(b, Tensor):
        out = _node(a.data + b, (a,), None, "add_s")
        if out.requires_grad:
            out._bwd = lambda g: _acc(a, g)
        return out
    _check_same_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), None, "add")
    if out.requires_grad:
        def bwd(g):
            _acc(a, g)
            _acc(b, g)
        out._bwd = bwd
    return out


def sub(a, b):
    if not isinstance(b, Tensor):
        out = _node(a.data - b, (a,), None, "sub_s")
        if out.requires_grad:
            out._bwd = lambda g: _acc(a, g)
        return out
    _check_same_shape(a, b, "sub")
    out = _node(a.data - b.data, (a, b), None, "sub")
    if out.requires_grad:
        def bwd(g):
            _acc(a, g)
            _acc(b, -g)
        out._bwd = bwd
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        out = _node(a.data * b, (a,), None, "mul_s")
        if out.requires_grad:
            out._bwd = lambda g: _acc(a, g * b)
        return out
    _check_same_shape(a, b, "mul")
    out = _node(a.data * b.data, (a, b), None, "mul")
    if out.requires_grad:
        def bwd(g):
            _acc(a, g * b.data)
            _acc(b, g * a.data)
        out._bwd = bwd
    return out


def neg(a):
    out = _node(-a.data, (a,), None, "neg")
    if out.requires_grad:
        out._bwd = lambda g: _acc(a, -g)
    return out


def absolute(a):
    out = _node(np.abs(a.data), (a,), None, "abs")
    if out.requires_grad:
        # subgradient at 0 is 0
        out._bwd = lambda g: _acc(a, g * np.sign(a.data))
    return out


def exp(a):
    val = np.exp(a.data)
    out = _node(val, (a,), None, "exp")
    if out.requires_grad:
        out._bwd = lambda g: _acc(a, g * val)
    return out


def relu(a):
    out = _node(np.maximum(a.data, 0.0), (a,), None, "relu")
    if out.requires_grad:
        out._bwd = lambda g: _acc(a, g * (a.data > 0))
    return out


def elu(a):
    x = a.data
    pos = x > 0
    ex = np.exp(np.where(pos, 0.0, x))
    val = np.where(pos, x, ex - 1.0)
    out = _node(val, (a,), None, "elu")
    if out.requires_grad:
        deriv = np.where(pos, 1.0, ex)
        out._bwd = lambda g: _acc(a, g * deriv)
    return out


def softmax(a, axis):
    """Numerically stable softmax along one axis (max subtracted inside exp)."""
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    ez = np.exp(z)
    s = ez / np.sum(ez, axis=axis, keepdims=True)
    out = _node(s, (a,), None, "softmax")
    if out.requires_grad:
        def bwd(g):
            inner = np.sum(g * s, axis=axis, keepdims=True)
            _acc(a, s * (g - inner))
        out._bwd = bwd
    return out


# ---------------------------------------------------------------------------
# matrix products


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner extents differ {a.data.shape} @ {b.data.shape}")
    out = _node(a.data @ b.data, (a, b), None, "matmul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _acc(a, g @ b.data.T)
            if b.requires_grad:
                _acc(b, a.data.T @ g)
        out._bwd = bwd
    return out


def bmm(a, b):
    """Batched matmul over a shared leading axis: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError(f"bmm: expects 3-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ValueError(f"bmm: incompatible extents {a.data.shape} @ {b.data.shape}")
    out = _node(a.data @ b.data, (a, b), None, "bmm")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _acc(a, g @ b.data.swapaxes(1, 2))
            if b.requires_grad:
                _acc(b, a.data.swapaxes(1, 2) @ g)
        out._bwd = bwd
    return out


# ---------------------------------------------------------------------------
# convolution family (H x W x C layout, kernels kh x kw x Cin x Cout)


def conv2d(x, w, bias=None, stride=(1, 1), pad=(0, 0, 0, 0)):
    """2-D cross-correlation.

    Args:
        x: input Tensor, H x W x Cin.
        w: kernel Tensor, kh x kw x Cin x Cout.
        bias: optional Tensor of Cout.
        stride: (sh, sw); padded extents minus kernel must divide exactly.
        pad: explicit per-side zero padding (top, bottom, left, right).

    Returns:
        Tensor of Ho x Wo x Cout.
    """
    H, W, Cin = x.data.shape
    kh, kw, wcin, Cout = w.data.shape
    if wcin != Cin:
        raise ValueError(f"conv2d: kernel expects {wcin} input channels, input has {Cin}")
    pt, pb, pl, pr = pad
    sh, sw = stride
    Hp, Wp = H + pt + pb, W + pl + pr
    if Hp < kh or Wp < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if (Hp - kh) % sh or (Wp - kw) % sw:
        raise ValueError(
            f"conv2d: non-integral output extent for input {Hp}x{Wp}, "
            f"kernel {kh}x{kw}, stride {stride}")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1

    if pt or pb or pl or pr:
        xp = np.zeros((Hp, Wp, Cin), dtype=x.data.dtype)
        xp[pt:pt + H, pl:pl + W] = x.data
    else:
        xp = x.data

    wd = w.data
    out = np.zeros((Ho * Wo, Cout), dtype=x.data.dtype)
    # one small matmul per kernel tap; kernel is 2x2 or 1x1 everywhere here
    taps = []
    for i in range(kh):
        for j in range(kw):
            xs = xp[i:i + (Ho - 1) * sh + 1:sh, j:j + (Wo - 1) * sw + 1:sw]
            xs = np.ascontiguousarray(xs).reshape(Ho * Wo, Cin)
            taps.append(xs)
            out += xs @ wd[i, j]
    if bias is not None:
        out += bias.data
    out = out.reshape(Ho, Wo, Cout)

    node = _node(out, (x, w) if bias is None else (x, w, bias), None, "conv2d")
    if node.requires_grad:
        def bwd(g):
            gf = g.reshape(Ho * Wo, Cout)
            if w.requires_grad:
                dw = np.empty_like(wd)
                for i in range(kh):
                    for j in range(kw):
                        dw[i, j] = taps[i * kw + j].T @ gf
                _acc(w, dw)
            if x.requires_grad:
                dxp = np.zeros((Hp, Wp, Cin), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[i:i + (Ho - 1) * sh + 1:sh,
                            j:j + (Wo - 1) * sw + 1:sw] += (gf @ wd[i, j].T).reshape(Ho, Wo, Cin)
                _acc(x, dxp[pt:pt + H, pl:pl + W])
            if bias is not None and bias.requires_grad:
                _acc(bias, gf.sum(axis=0))
        node._bwd = bwd
    return node


def tconv2d(x, w, bias=None):
    """Transposed convolution, kernel 2x2 and stride 2: doubles both extents.

    Defined as the adjoint of the matching stride-2 valid conv2d, so with
    kernel extents equal to the stride the output taps do not overlap.
    """
    h, wi, Cin = x.data.shape
    kh, kw, wcin, Cout = w.data.shape
    if (kh, kw) != (2, 2):
        raise ValueError(f"tconv2d: kernel must be 2x2, got {kh}x{kw}")
    if wcin != Cin:
        raise ValueError(f"tconv2d: kernel expects {wcin} input channels, input has {Cin}")
    xf = x.data.reshape(h * wi, Cin)
    out = np.empty((2 * h, 2 * wi, Cout), dtype=x.data.dtype)
    wd = w.data
    for di in range(2):
        for dj in range(2):
            out[di::2, dj::2] = (xf @ wd[di, dj]).reshape(h, wi, Cout)
    if bias is not None:
        out += bias.data

    node = _node(out, (x, w) if bias is None else (x, w, bias), None, "tconv2d")
    if node.requires_grad:
        def bwd(g):
            if x.requires_grad:
                dx = np.zeros((h * wi, Cin), dtype=g.dtype)
                for di in range(2):
                    for dj in range(2):
                        dx += g[di::2, dj::2].reshape(h * wi, Cout) @ wd[di, dj].T
                _acc(x, dx.reshape(h, wi, Cin))
            if w.requires_grad:
                dw = np.empty_like(wd)
                for di in range(2):
                    for dj in range(2):
                        dw[di, dj] = xf.T @ g[di::2, dj::2].reshape(h * wi, Cout)
                _acc(w, dw)
            if bias is not None and bias.requires_grad:
                _acc(bias, g.sum(axis=(0, 1)))
        node._bwd = bwd
    return node


def pool2d(x, kind="avg"):
    """2x2 stride-2 pooling; extents must be even. kind is 'avg' or 'max'."""
    H, W, C = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"pool2d: extents must be even, got {H}x{W}")
    win = x.data.reshape(H // 2, 2, W // 2, 2, C)
    if kind == "avg":
        val = win.mean(axis=(1, 3))
        out = _node(val, (x,), None, "pool2d_avg")
        if out.requires_grad:
            def bwd(g):
                dx = np.empty((H // 2, 2, W // 2, 2, C), dtype=g.dtype)
                dx[...] = (0.25 * g)[:, None, :, None, :]
                _acc(x, dx.reshape(H, W, C))
            out._bwd = bwd
        return out
    if kind == "max":
        flat = win.transpose(0, 2, 4, 1, 3).reshape(H // 2, W // 2, C, 4)
        idx = flat.argmax(axis=3)  # first occurrence wins ties, row-major window order
        val = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]
        out = _node(val, (x,), None, "pool2d_max")
        if out.requires_grad:
            def bwd(g):
                dflat = np.zeros((H // 2, W // 2, C, 4), dtype=g.dtype)
                np.put_along_axis(dflat, idx[..., None], g[..., None], axis=3)
                dx = dflat.reshape(H // 2, W // 2, C, 2, 2).transpose(0, 3, 1, 4, 2)
                _acc(x, dx.reshape(H, W, C))
            out._bwd = bwd
        return out
    raise ValueError(f"pool2d: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# shape ops


def concat(parts, axis):
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat: no parts")
    ref = list(parts[0].data.shape)
    for p in parts[1:]:
        s = list(p.data.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ValueError(f"concat: incompatible shapes {parts[0].data.shape} vs {p.data.shape}")
    val = np.concatenate([p.data for p in parts], axis=axis)
    out = _node(val, parts, None, "concat")
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offs = np.cumsum([0] + sizes)

        def bwd(g):
            for p, a, b in zip(parts, offs[:-1], offs[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                _acc(p, g[tuple(idx)])
        out._bwd = bwd
    return out


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    n = x.data.shape[axis]
    if start < 0 or start + length > n:
        raise ValueError(f"narrow: [{start}:{start + length}] out of range for extent {n}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _node(x.data[idx], (x,), None, "narrow")
    if out.requires_grad:
        def bwd(g):
            dx = np.zeros_like(x.data)
            dx[idx] = g
            _acc(x, dx)
        out._bwd = bwd
    return out


def transpose(x, axes):
    out = _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), None, "transpose")
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._bwd = lambda g: _acc(x, g.transpose(inv))
    return out


def reshape(x, shape):
    out = _node(x.data.reshape(shape), (x,), None, "reshape")
    if out.requires_grad:
        out._bwd = lambda g: _acc(x, g.reshape(x.data.shape))
    return out


# ---------------------------------------------------------------------------
# reductions to scalar


def reduce_sum(x):
    out = _node(np.array(x.data.sum()), (x,), None, "sum")
    if out.requires_grad:
        out._bwd = lambda g: _acc(x, np.full(x.data.shape, float(g), dtype=x.data.dtype))
    return out


def reduce_mean(x):
    n = x.data.size
    out = _node(np.array(x.data.mean()), (x,), None, "mean")
    if out.requires_grad:
        out._bwd = lambda g: _acc(x, np.full(x.data.shape, float(g) / n, dtype=x.data.dtype))
    return out


def reduce_l1(x):
    out = _node(np.array(np.abs(x.data).sum()), (x,), None, "l1")
    if out.requires_grad:
        out._bwd = lambda g: _acc(x, float(g) * np.sign(x.data))
    return out


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the graph reaching a root tensor."""

    def __init__(self, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.nodes = order  # parents precede children

    def __len__(self):
        return len(self.nodes)


def backward(loss, params=None):
    """Accumulate gradients of a scalar loss into every reachable tensor.

    Args:
        loss: scalar Tensor produced through recorded ops.
        params: optional iterable of Parameters; unreachable ones get zeros.

    Returns:
        dict mapping parameter name to its gradient array.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = Tape(loss)
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
    out = {}
    if params is not None:
        for p in params:
            out[p.name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def grad_check(f, params, eps=1e-5, report=None, max_entries=None,
               sample_seed=0):
    """Compare analytic gradients of f() against central finite differences.

    Args:
        f: nullary callable returning a scalar Tensor; reads params by reference.
        params: iterable of Parameters perturbed entry by entry.
        eps: central-difference step.
        report: optional dict filled with per-parameter max relative error.
        max_entries: if set, check at most this many entries per parameter,
            chosen deterministically from sample_seed. Exhaustive otherwise.
        sample_seed: seed for the per-parameter entry subsets.

    Returns:
        max over all checked entries of |analytic - central| /
        max(|analytic|, |central|, 1e-12).
    """
    params = list(params)
    loss = f()
    if not np.isfinite(loss.data):
        raise ValueError("grad_check: non-finite loss")
    grads = backward(loss, params)
    worst = 0.0
    for pi, p in enumerate(params):
        g = grads[p.name]
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            indices = range(flat.size)
        else:
            picker = np.random.default_rng([sample_seed, pi])
            indices = np.sort(picker.choice(flat.size, size=max_entries,
                                            replace=False))
        pworst = 0.0
        with no_grad():
            for i in indices:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError(f"grad_check: non-finite loss perturbing {p.name}[{i}]")
                cd = (fp - fm) / (2.0 * eps)
                rel = abs(gflat[i] - cd) / max(abs(gflat[i]), abs(cd), 1e-12)
                if rel > pworst:
                    pworst = rel
        if report is not None:
            report[p.name] = pworst
        worst = max(worst, pworst)
    return worst
