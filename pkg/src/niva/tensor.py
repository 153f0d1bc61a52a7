"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active, so code
outside a tape (evaluation, the E-step, rollouts) runs as plain numpy.

Example:

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Tape",
    "paused",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "concat",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "softplus",
    "softmax",
    "layer_norm",
    "mvn_logpdf",
    "grad_check",
    "numerical_gradient",
    "PRIMITIVES",
]

_TAPES: list["Tape"] = []
_PAUSED = [0]

LAYER_NORM_EPS = 1e-5


class Tensor:
    """A float64 array, optionally tracked for differentiation.

    Values are treated as immutable: every operation returns a new tensor.
    Parameters are the one exception, and the optimizer swaps their ``data``
    wholesale rather than writing into it.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{grad})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Each record holds the output tensor, its inputs and a closure mapping the
    output cotangent to input cotangents. :meth:`gradient` replays the records
    in reverse, visiting every node once.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def gradient(self, target: Tensor, sources) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each source.

        Sources not connected to ``target`` receive exact zeros.
        """
        if target.data.size != 1:
            raise ValueError("gradient target must be a scalar")
        grads = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [np.array(grads.get(id(s), np.zeros_like(s.data)), dtype=np.float64)
                .reshape(s.shape) for s in sources]


class paused:
    """Context manager suspending recording on every active tape."""

    def __enter__(self):
        _PAUSED[0] += 1

    def __exit__(self, *exc):
        _PAUSED[0] -= 1
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _recording(inputs) -> bool:
    return bool(_TAPES) and not _PAUSED[0] and any(t.requires_grad for t in inputs)


def _make(data, inputs, backward) -> Tensor:
    out = Tensor(data)
    if _recording(inputs):
        out.requires_grad = True
        _TAPES[-1].records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


# --- reductions and shape ops ------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def take(a, indices, axis=0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def backward(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                         list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tensors, backward)


# --- nonlinearities ----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = special.ndtr(x)
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,),
                 lambda g: (g * special.expit(a.data),))


def softmax(a, axis=-1, mask=None) -> Tensor:
    """Softmax along ``axis`` with max subtraction.

    Entries where ``mask`` is False get zero weight; a fully masked slice
    yields all zeros instead of NaN.
    """
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for {a.ndim}-d input")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def layer_norm(x, gain=None, offset=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional affine gain/offset."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    inputs = [x]
    out = xhat
    if gain is not None:
        gain = as_tensor(gain)
        inputs.append(gain)
        out = out * gain.data
    if offset is not None:
        offset = as_tensor(offset)
        inputs.append(offset)
        out = out + offset.data

    def backward(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if offset is not None:
            grads.append(_unbroadcast(g, offset.shape))
        return tuple(grads)

    return _make(out, tuple(inputs), backward)


def mvn_logpdf(resid, cov) -> Tensor:
    """Log density of zero-mean normals at ``resid`` (..., d), cov (..., d, d)."""
    resid, cov = as_tensor(resid), as_tensor(cov)
    d = resid.shape[-1]
    try:
        chol = np.linalg.cholesky(cov.data)
    except np.linalg.LinAlgError as err:
        raise ValueError("covariance is not positive definite") from err
    eye = np.broadcast_to(np.eye(d), cov.shape)
    cov_inv = np.linalg.solve(cov.data, eye)
    alpha = (cov_inv @ resid.data[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    quad = (resid.data * alpha).sum(axis=-1)
    out = -0.5 * (quad + logdet + d * math.log(2.0 * math.pi))

    def backward(g):
        gr = -g[..., None] * alpha
        gc = 0.5 * g[..., None, None] * (alpha[..., :, None] * alpha[..., None, :] - cov_inv)
        return _unbroadcast(gr, resid.shape), _unbroadcast(gc, cov.shape)

    return _make(out, (resid, cov), backward)


# --- gradient checking -------------------------------------------------------

def numerical_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` (array -> float) at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite value while perturbing coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_check(f, x, step: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error per coordinate is
    ``|autodiff - fd| / (|fd| + 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("non-finite function value")
    (ad,) = tape.gradient(y, [xt])

    def scalar(v):
        with paused():
            return float(f(Tensor(v)).data)

    fd = numerical_gradient(scalar, x, step)
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + 1e-8)))


def _rand_spd(rng, batch, d):
    m = rng.normal(size=(batch, d, d))
    return m @ np.swapaxes(m, -1, -2) + d * np.eye(d)


# Registered primitives with a random-input builder each. Every entry maps a
# name to ``builder(rng) -> (fn, x0)`` where ``fn`` is Tensor -> scalar Tensor
# weighted by fixed random coefficients so no gradient entry is structurally
# zero.
def _weighted(rng, shape):
    return rng.normal(size=shape)


def _p_add(rng):
    b = rng.normal(size=(3, 4))
    w = _weighted(rng, (3, 4))
    return lambda x: (add(x, b) * w).sum(), rng.normal(size=(1, 4))


def _p_sub(rng):
    b = rng.normal(size=(3, 4))
    w = _weighted(rng, (3, 4))
    return lambda x: (sub(b, x) * w).sum(), rng.normal(size=(3, 1))


def _p_mul(rng):
    b = rng.normal(size=(3, 4))
    w = _weighted(rng, (3, 4))
    return lambda x: (mul(x, b) * w * x).sum(), rng.normal(size=(3, 4))


def _p_div(rng):
    b = rng.normal(size=(3, 4))
    w = _weighted(rng, (3, 4))
    return lambda x: (div(b, x) * w).sum(), rng.uniform(0.5, 2.0, size=(3, 4))


def _p_matmul(rng):
    b = rng.normal(size=(5, 3))
    w = _weighted(rng, (4, 3))
    return lambda x: (matmul(x, b) * w).sum(), rng.normal(size=(4, 5))


def _p_batched_matmul(rng):
    a = rng.normal(size=(2, 4, 5))
    w = _weighted(rng, (2, 4, 3))
    return lambda x: (matmul(a, x) * w).sum(), rng.normal(size=(5, 3))


def _p_sum(rng):
    w = _weighted(rng, (3, 1))
    return lambda x: (sum(x * x, axis=1, keepdims=True) * w).sum(), rng.normal(size=(3, 4))


def _p_mean(rng):
    w = _weighted(rng, (4,))
    return lambda x: (mean(x * x, axis=0) * w).sum(), rng.normal(size=(3, 4))


def _p_reshape_transpose(rng):
    w = _weighted(rng, (4, 3))
    return lambda x: (transpose(reshape(x * x, (3, 4))) * w).sum(), rng.normal(size=(12,))


def _p_getitem(rng):
    w = _weighted(rng, (2, 3))
    return lambda x: (x[1:3, ::2] * w * x[1:3, ::2]).sum(), rng.normal(size=(4, 6))


def _p_take(rng):
    idx = np.array([[0, 2], [2, 1], [3, 3]])
    w = _weighted(rng, (3, 2, 5))
    return lambda x: (take(x, idx, axis=0) * w * take(x, idx, axis=0)).sum(), rng.normal(size=(4, 5))


def _p_concat(rng):
    b = rng.normal(size=(3, 2))
    w = _weighted(rng, (3, 6))
    return lambda x: (concat([x * x, b, x], axis=1) * w).sum(), rng.normal(size=(3, 2))


def _p_exp(rng):
    w = _weighted(rng, (3, 4))
    return lambda x: (exp(x) * w).sum(), rng.normal(size=(3, 4))


def _p_log(rng):
    w = _weighted(rng, (3, 4))
    return lambda x: (log(x) * w).sum(), rng.uniform(0.5, 3.0, size=(3, 4))


def _p_sqrt(rng):
    w = _weighted(rng, (3, 4))
    return lambda x: (sqrt(x) * w).sum(), rng.uniform(0.5, 3.0, size=(3, 4))


def _p_gelu(rng):
    w = _weighted(rng, (3, 4))
    return lambda x: (gelu(x) * w).sum(), rng.normal(size=(3, 4))


def _p_softplus(rng):
    w = _weighted(rng, (3, 4))
    return lambda x: (softplus(x) * w).sum(), rng.normal(size=(3, 4))


def _p_softmax(rng):
    w = _weighted(rng, (3, 5))
    mask = np.ones((3, 5), dtype=bool)
    mask[1, 3:] = False
    return lambda x: (softmax(x, axis=-1, mask=mask) * w).sum(), rng.normal(size=(3, 5))


def _p_layer_norm(rng):
    w = _weighted(rng, (2, 8))
    gain = rng.normal(size=8)
    off = rng.normal(size=8)
    return lambda x: (layer_norm(x, gain, off) * w).sum(), rng.normal(size=(2, 8))


def _p_layer_norm_affine(rng):
    w = _weighted(rng, (2, 8))
    x = rng.normal(size=(2, 8))
    return lambda p: (layer_norm(x, p[0], p[1]) * w).sum(), rng.normal(size=(2, 8))


def _p_mvn_resid(rng):
    cov = _rand_spd(rng, 2, 3)
    w = _weighted(rng, (2,))
    return lambda x: (mvn_logpdf(x, cov) * w).sum(), rng.normal(size=(2, 3))


def _p_mvn_cov(rng):
    r = rng.normal(size=(2, 3))
    w = _weighted(rng, (2,))
    base = _rand_spd(rng, 2, 3)
    return lambda x: (mvn_logpdf(r, base + 0.5 * (x + transpose(x, (0, 2, 1)))) * w).sum(), \
        0.3 * rng.normal(size=(2, 3, 3))


PRIMITIVES = {
    "add": _p_add,
    "sub": _p_sub,
    "mul": _p_mul,
    "div": _p_div,
    "matmul": _p_matmul,
    "batched_matmul": _p_batched_matmul,
    "sum": _p_sum,
    "mean": _p_mean,
    "reshape_transpose": _p_reshape_transpose,
    "getitem": _p_getitem,
    "take": _p_take,
    "concat": _p_concat,
    "exp": _p_exp,
    "log": _p_log,
    "sqrt": _p_sqrt,
    "gelu": _p_gelu,
    "softplus": _p_softplus,
    "softmax": _p_softmax,
    "layer_norm": _p_layer_norm,
    "layer_norm_affine": _p_layer_norm_affine,
    "mvn_logpdf_resid": _p_mvn_resid,
    "mvn_logpdf_cov": _p_mvn_cov,
}
