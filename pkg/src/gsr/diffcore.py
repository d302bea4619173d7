"""Minimal reverse-mode differentiation on float64 numpy arrays.

Provides exactly the operations the graph-generator / denoiser models
need (matmul, causal dilated conv, a few pointwise nonlinearities,
dropout, MSE), an Adam optimizer, and a named parameter store with a
JSON checkpoint format.  Everything is float64 and deterministic: same
seed, same inputs -> bit-identical results.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


# ---------------------------------------------------------------------------
# tensors and the tape

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus an optional gradient slot.

    Results of operations remember their parents and a vector-Jacobian
    closure so `backward` can push gradients to the leaves.  Only leaf
    tensors created with requires_grad=True (parameters) accumulate
    into `.grad`; intermediate gradients live only inside `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, vjp):
    """Wrap an op result, recording the tape entry if grads are on."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's grad.

    Repeated calls without zeroing accumulate.  `loss` must hold exactly
    one element.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")

    # iterative topological sort (graphs can be deep: epochs * layers)
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            node.ensure_grad()
            node.grad += g


# ---------------------------------------------------------------------------
# operations

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (same shapes; used for constant masks)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b),
                   lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose_last2(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise DimensionError(f"transpose_last2 needs >= 2 dims, got {a.shape}")
    swap = lambda m: np.ascontiguousarray(np.swapaxes(m, -1, -2))
    return _result(swap(a.data), (a,), lambda g: (swap(g),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, optionally batched on the leading axis.

    Supported rank combinations: 2x2, 3x3 (equal batch), and 2x3 / 3x2
    where the 2-D operand is broadcast across the batch (its gradient
    sums over the batch).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    if a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes disagree: {a.shape} x {b.shape}")

    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if a.data.ndim == 2 and ga.ndim == 3:
                ga = ga.sum(axis=0)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.data.ndim == 2 and gb.ndim == 3:
                gb = gb.sum(axis=0)
        return ga, gb

    return _result(out, (a, b), vjp)


def gram(x: Tensor) -> Tensor:
    """x @ x^T over the last two axes: (..., N, W) -> (..., N, N).

    Each output entry is an independent pairwise dot product (naive
    einsum), so permuting the N rows permutes the output exactly,
    bit for bit.
    """
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError(f"gram needs >= 2 dims, got {x.shape}")
    out = np.einsum("...iw,...jw->...ij", x.data, x.data, optimize=False)

    def vjp(g):
        gsym = g + np.swapaxes(g, -1, -2)
        return (np.matmul(gsym, x.data),)

    return _result(out, (x,), vjp)


_POINTWISE = ("elu", "elu_plus_one", "sigmoid", "relu")


def pointwise(x: Tensor, f: str) -> Tensor:
    """Elementwise nonlinearity; derivatives are exact and evaluated lazily."""
    x = as_tensor(x)
    v = x.data
    if f == "relu":
        out = np.maximum(v, 0.0)
        vjp = lambda g: (np.where(v > 0.0, g, 0.0),)
    elif f == "sigmoid":
        # stable in both tails
        ea = np.exp(-np.abs(v))
        out = np.where(v >= 0.0, 1.0 / (1.0 + ea), ea / (1.0 + ea))
        vjp = lambda g: (g * (out * (1.0 - out)),)
    elif f in ("elu", "elu_plus_one"):
        ex = np.exp(np.minimum(v, 0.0))
        out = np.where(v > 0.0, v, ex - 1.0)
        if f == "elu_plus_one":
            out = out + 1.0
        vjp = lambda g: (g * np.where(v > 0.0, 1.0, ex),)
    else:
        raise ValueError(f"unknown pointwise function {f!r}; choose from {_POINTWISE}")
    return _result(out, (x,), vjp)


def dropout(x: Tensor, p: float, training: bool, rng) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity when not training or p == 0.  `rng` is a numpy Generator or
    an int seed; masks are deterministic per generator state.
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return _result(x.data, (x,), lambda g: (g,))
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = np.where(rng.random(x.shape, dtype=np.float32) >= p, 1.0 / (1.0 - p), 0.0)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference (scalar tensor)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean())

    def vjp(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return _result(out, (pred, target), vjp)


def causal_conv1d(x: Tensor, kernel: Tensor, dilation: int, bias=None) -> Tensor:
    """Dilated causal 1-D convolution, sequence length preserved.

    x: (C_in, L) or (B, C_in, L); kernel: (C_out, C_in, K); bias: (C_out,)
    or None.  The input is left-padded with (K-1)*dilation zeros, so
    output position t only sees input positions <= t.  Batch entries are
    convolved by identical per-entry GEMM calls, keeping the op exactly
    equivariant under batch permutation.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if bias is not None:
        bias = as_tensor(bias)
    dilation = int(dilation)
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    single = x.data.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or kernel.data.ndim != 3:
        raise DimensionError(f"causal_conv1d: bad ranks {x.shape}, {kernel.shape}")
    B, C_in, L = xd.shape
    C_out, kc_in, K = kernel.data.shape
    if kc_in != C_in:
        raise DimensionError(f"causal_conv1d: {C_in} input channels vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (C_out,):
        raise DimensionError(f"causal_conv1d: bias shape {bias.shape} != ({C_out},)")

    pad = (K - 1) * dilation

    def im2col(arr, left):
        """(B, C, L) -> (B, C*K, L) windows at the given dilation."""
        b, c, _ = arr.shape
        buf = np.zeros((b, c, L + pad))
        if left:
            buf[:, :, pad:] = arr
        else:
            buf[:, :, :L] = arr
        s0, s1, s2 = buf.strides
        win = np.lib.stride_tricks.as_strided(
            buf, shape=(b, c, K, L), strides=(s0, s1, s2 * dilation, s2))
        return win.reshape(b, c * K, L)

    cols = im2col(xd, left=True)
    k2 = kernel.data.reshape(C_out, C_in * K)
    out = np.matmul(k2, cols)                   # (B, C_out, L), per-entry GEMMs
    if bias is not None:
        out = out + bias.data[:, None]

    def vjp(g):
        gb = g[None] if g.ndim == 2 else g
        grad_x = grad_k = grad_b = None
        if x.requires_grad:
            # gradient w.r.t. input is a causal conv of g with the
            # flipped/transposed kernel, right-padded instead of left
            kf = np.ascontiguousarray(
                kernel.data[:, :, ::-1].transpose(1, 0, 2)).reshape(C_in, C_out * K)
            grad_x = np.matmul(kf, im2col(gb, left=False))
            if single:
                grad_x = grad_x[0]
        if kernel.requires_grad:
            grad_k = np.matmul(gb, cols.swapaxes(-1, -2)).sum(axis=0)
            grad_k = grad_k.reshape(C_out, C_in, K)
        if bias is not None and bias.requires_grad:
            grad_b = gb.sum(axis=(0, 2))
        return (grad_x, grad_k) if bias is None else (grad_x, grad_k, grad_b)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    data = out[0] if single else out
    return _result(data, parents, vjp)


def _exact_row_sums(m: np.ndarray) -> np.ndarray:
    """Exactly rounded sums over the last axis (order independent)."""
    flat = m.reshape(-1, m.shape[-1])
    sums = np.fromiter((math.fsum(row) for row in flat.tolist()),
                       dtype=np.float64, count=flat.shape[0])
    return sums.reshape(m.shape[:-1])


def degree_normalize(m: Tensor) -> Tensor:
    """Symmetric degree normalization D^{-1/2} M D^{-1/2} over (..., N, N).

    D = diag(row sums); rows whose sum is zero are left untouched
    (scale 1).  Row sums use exact summation so the result does not
    depend on node ordering.
    """
    m = as_tensor(m)
    if m.data.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"degree_normalize expects (..., N, N), got {m.shape}")
    d = _exact_row_sums(m.data)
    pos = d > 0.0
    s = np.where(pos, 1.0 / np.sqrt(np.where(pos, d, 1.0)), 1.0)
    out = (m.data * s[..., :, None]) * s[..., None, :]

    def vjp(g):
        t = g * m.data
        r = (t * s[..., None, :]).sum(axis=-1)
        c = (t * s[..., :, None]).sum(axis=-2)
        corr = np.where(pos, -0.5 * s ** 3 * (r + c), 0.0)
        gm = s[..., :, None] * s[..., None, :] * g + corr[..., :, None]
        return (gm,)

    return _result(out, (m,), vjp)


# ---------------------------------------------------------------------------
# parameters, checkpoints, Adam

CHECKPOINT_FORMAT_VERSION = 1


class ParameterStore:
    """Named learnable tensors; names are unique, insertion-ordered."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already registered")
        t = as_tensor(data)
        t.requires_grad = True
        t.ensure_grad()
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self):
        return list(self._entries.values())

    def zero_grads(self):
        for t in self._entries.values():
            t.zero_grad()

    def to_checkpoint(self, seed: int = 0) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "seed": int(seed),
            "params": {
                name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
                for name, t in self._entries.items()
            },
        }

    def to_json(self, seed: int = 0) -> str:
        return json.dumps(self.to_checkpoint(seed))

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "ParameterStore":
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {doc.get('format_version')!r}")
        store = cls()
        for name, entry in doc["params"].items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            store.add(name, arr)
        return store

    @classmethod
    def from_json(cls, text: str) -> "ParameterStore":
        return cls.from_checkpoint(json.loads(text))


class AdamState:
    """First/second moment buffers and step counter for a ParameterStore."""

    def __init__(self, store: ParameterStore, learning_rate=0.001,
                 beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes the grads afterwards."""
    for name, p in store.items():
        if p.grad is None:
            raise RuntimeError(f"parameter {name!r} has no grad slot")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in store.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        g[...] = 0.0
