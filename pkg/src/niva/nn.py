"""Small module system on top of :mod:`niva.tensor`."""

from __future__ import annotations

import contextlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor. ``decay`` marks linear-layer weights."""

    def __init__(self, data, decay: bool = False):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    """Base class: parameters and submodules are discovered from attributes."""

    training = False
    _rng = None

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, value in self._children():
            name = prefix + key
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("buf_") and isinstance(value, np.ndarray):
                yield prefix + key, value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, rng: np.random.Generator | None = None):
        for m in self.modules():
            m.training = rng is not None
            m._rng = rng
        return self

    def eval(self):
        return self.train(None)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            value = np.array(value, dtype=np.float64)
            if value.shape != own[name].shape:
                raise ValueError(f"{name}: shape {value.shape} != {own[name].shape}")
            owner, attr = self._resolve(name)
            current = getattr(owner, attr)
            if isinstance(current, Parameter):
                current.data = value
            else:
                setattr(owner, attr, value)

    def _resolve(self, name: str):
        parts = name.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
        return obj, parts[-1]

    @contextlib.contextmanager
    def substituted(self, tensors: dict[str, Tensor]):
        """Temporarily route named parameters through the given tensors."""
        saved = {}
        for name, t in tensors.items():
            owner, attr = self._resolve(name)
            saved[name] = getattr(owner, attr)
            setattr(owner, attr, t)
        try:
            yield self
        finally:
            for name, p in saved.items():
                owner, attr = self._resolve(name)
                setattr(owner, attr, p)


def dropout(x: Tensor, p: float, module: Module) -> Tensor:
    if not module.training or p <= 0.0:
        return x
    keep = module._rng.random(x.shape) >= p
    return x * (keep / (1.0 - p))


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, zero: bool = False, bias: bool = True):
        scale = 0.0 if zero else 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.normal(0.0, 1.0, (n_in, n_out)) * scale, decay=True)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = T.matmul(x.reshape(-1, x.shape[-1]), self.weight).reshape(*lead, -1)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, rng, n: int, dim: int, scale: float = 1.0):
        self.table = Parameter(rng.normal(0.0, scale, (n, dim)))

    def __call__(self, index) -> Tensor:
        return T.take(self.table, index, axis=0)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.offset = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.offset)


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, rng, n_in: int, n_hidden: int, n_out: int,
                 dropout: float = 0.0, zero_out: bool = False):
        self.fc1 = Linear(rng, n_in, n_hidden)
        self.fc2 = Linear(rng, n_hidden, n_out, zero=zero_out)
        self.p = dropout

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(dropout(T.gelu(self.fc1(x)), self.p, self))


class MultiHeadAttention(Module):
    """Multi-head attention with per-query key sets.

    ``q`` is (B, Lq, D), ``k``/``v`` are (B, Lk, D) and ``mask`` (B, Lq, Lk)
    flags the admissible keys. Queries with no admissible key return zeros.
    """

    def __init__(self, rng, dim: int, heads: int, dropout: float = 0.0):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        # a key bias shifts every logit of a query equally, so it is left out
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.p = dropout

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights=False):
        b, lq, d = q.shape
        qh = self._split(self.wq(q))
        kh = self._split(self.wk(k))
        vh = self._split(self.wv(v))
        scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // self.heads))
        m = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :, :]
        weights = T.softmax(scores, axis=-1, mask=m)
        ctx = T.matmul(weights, vh).transpose(0, 2, 1, 3).reshape(b, lq, d)
        out = dropout(self.wo(ctx), self.p, self)
        if m is not None:
            has_key = np.asarray(mask, dtype=bool).any(axis=-1, keepdims=True)
            if not has_key.all():
                out = out * has_key
        return (out, weights) if return_weights else out
