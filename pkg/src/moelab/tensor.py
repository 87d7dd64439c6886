"""Dense tensors with reverse-mode differentiation over numpy.

Double precision by default (single precision is an opt-in via
``set_default_dtype``). Ops build a tape of closures; ``Tensor.backward``
replays it in reverse topological order. Everything is single-threaded
apart from BLAS internals, so results are bit-deterministic on one
platform.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigurationError, InputError, NumericalError

Array = np.ndarray

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigurationError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d array plus an optional gradient accumulator.

    ``data`` is row-major; ``grad`` (once backward ran) has the same shape.
    Leaf tensors with ``requires_grad=True`` are parameters; interior nodes
    carry a backward closure that scatters the incoming cotangent to their
    parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Interior gradients are freed as soon as they have been consumed to
        keep the peak footprint at roughly one layer of activations.
        """
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # interior node; leaves keep theirs

    # Arithmetic sugar. Full op set lives at module level.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(*tensors) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        out_data = a.data + b
        if not _tracks(a):
            return Tensor(out_data)

        def backward(g):
            a._accumulate(_unbroadcast(g, a.data.shape))

        return Tensor(out_data, True, (a,), backward)

    out_data = a.data + b.data
    if not _tracks(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        out_data = a.data * b
        if not _tracks(a):
            return Tensor(out_data)

        def backward(g):
            a._accumulate(_unbroadcast(g * b, a.data.shape))

        return Tensor(out_data, True, (a,), backward)

    out_data = a.data * b.data
    if not _tracks(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def powf(a: Tensor, p: float) -> Tensor:
    """Elementwise power with constant exponent."""
    a = as_tensor(a)
    out_data = a.data**p
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g * (p * a.data ** (p - 1.0)))

    return Tensor(out_data, True, (a,), backward)


def div(a, b) -> Tensor:
    return mul(a, powf(as_tensor(b), -1.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands carry equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        if a.data.shape[:-2] != b.data.shape[:-2]:
            raise ConfigurationError(
                f"batched matmul requires equal leading dims, got {a.shape} @ {b.shape}"
            )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    if not _tracks(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor(out_data, True, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor(out_data, True, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    if not _tracks(a):
        return Tensor(out_data)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return Tensor(out_data, True, (a,), backward)


def take(a: Tensor, idx) -> Tensor:
    """Gather slices along axis 0; duplicate indices are allowed."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a._accumulate(ga)

    return Tensor(out_data, True, (a,), backward)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row k times: [N, ...] -> [N*k, ...], row-major in k."""
    a = as_tensor(a)
    out_data = np.repeat(a.data, k, axis=0)
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g.reshape((a.data.shape[0], k) + a.data.shape[1:]).sum(axis=1))

    return Tensor(out_data, True, (a,), backward)


def permute_rows(a: Tensor, perm) -> Tensor:
    """Reorder rows by a permutation (bijective; cheaper backward than take)."""
    a = as_tensor(a)
    perm = np.asarray(perm, dtype=np.intp)
    out_data = a.data[perm]
    if not _tracks(a):
        return Tensor(out_data)
    inv = np.argsort(perm)

    def backward(g):
        a._accumulate(g[inv])

    return Tensor(out_data, True, (a,), backward)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous row slice; gradients accumulate into the parent region."""
    a = as_tensor(a)
    out_data = a.data[lo:hi]
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[lo:hi] += g

    return Tensor(out_data, True, (a,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack tensors along axis 0; backward slices the cotangent."""
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)
    if not (_GRAD_ENABLED and any(p.requires_grad for p in parts)):
        return Tensor(out_data)
    bounds = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        for part, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if part.requires_grad:
                part._accumulate(g[lo:hi])

    return Tensor(out_data, True, tuple(parts), backward)


def scatter_rows(values: Tensor, idx, n_rows: int) -> Tensor:
    """Sum ``values[i]`` into row ``idx[i]`` of a fresh (n_rows, ...) tensor."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.zeros((n_rows,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(out_data, idx, values.data)
    if not _tracks(values):
        return Tensor(out_data)

    def backward(g):
        values._accumulate(g[idx])

    return Tensor(out_data, True, (values,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, True, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the SwiGLU gate nonlinearity."""
    a = as_tensor(a)
    x = a.data
    # clamp only to keep exp finite; sigmoid saturates exactly well before +-700
    s = np.clip(x, -700.0, 700.0)
    np.negative(s, out=s)
    np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)
    out_data = x * s
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g * (s * (1.0 + x * (1.0 - s))))

    return Tensor(out_data, True, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Probabilities over the trailing axis, stabilized by max-subtraction."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericalError("softmax requires finite logits")
    out_data = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(out_data, out=out_data)
    out_data /= out_data.sum(axis=-1, keepdims=True)
    if not _tracks(a):
        return Tensor(out_data)

    def backward(g):
        inner = np.einsum("...i,...i->...", g, out_data)[..., None]
        ga = g - inner
        ga *= out_data
        a._accumulate(ga)

    return Tensor(out_data, True, (a,), backward)


def logsumexp(a: Tensor) -> Tensor:
    """Stable log-sum-exp over the trailing axis."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericalError("logsumexp requires finite logits")
    m = a.data.max(axis=-1, keepdims=True)
    soft = a.data - m
    np.exp(soft, out=soft)
    sums = soft.sum(axis=-1, keepdims=True)
    out_data = (m + np.log(sums)).reshape(a.data.shape[:-1])
    if not _tracks(a):
        return Tensor(out_data)
    soft /= sums

    def backward(g):
        a._accumulate(np.expand_dims(g, -1) * soft)

    return Tensor(out_data, True, (a,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmaxes."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ConfigurationError(
            f"cross_entropy expects [N,V] logits and [N] targets, got {logits.shape}, {targets.shape}"
        )
    n, v = logits.shape
    if n == 0:
        raise InputError("cross_entropy on empty batch")
    if targets.min() < 0 or targets.max() >= v:
        raise InputError(f"target ids must lie in [0,{v}), got range "
                         f"[{targets.min()},{targets.max()}]")
    m = logits.data.max(axis=-1, keepdims=True)
    soft = logits.data - m
    np.exp(soft, out=soft)
    sums = soft.sum(axis=-1, keepdims=True)
    lse = (m + np.log(sums)).ravel()
    rows = np.arange(n)
    nll = lse - logits.data[rows, targets]
    out_data = np.asarray(nll.mean())
    if not _tracks(logits):
        return Tensor(out_data)
    soft /= sums

    def backward(g):
        gl = soft * (float(g) / n)
        gl[rows, targets] -= float(g) / n
        logits._accumulate(gl)

    return Tensor(out_data, True, (logits,), backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the trailing axis, scaled by gain."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = powf(add(ms, eps), -0.5)
    return mul(mul(x, inv), gain)


def finite_difference_check(loss_fn, params, h: float = 1e-5, floor: float = 1e-4) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic closure over ``params`` (a dict of
    name -> leaf Tensor) returning a scalar Tensor. Relative error uses
    denominator max(|analytic|, |numeric|, floor); the floor absorbs
    finite-difference noise on near-zero entries (noise scale ~ eps*|f|/h).
    """
    named = list(params.items())
    for _, p in named:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named
    }
    worst = 0.0
    with no_grad():
        for name, p in named:
            flat = p.data.reshape(-1)
            ref = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(loss_fn().data)
                flat[i] = orig - h
                f_minus = float(loss_fn().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(ref[i]), abs(numeric), floor)
                err = abs(ref[i] - numeric) / denom
                if err > worst:
                    worst = err
    return worst


def check_finite(x: Array, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
