"""Small neural-network building blocks on top of the autodiff tensors."""

from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class with a named-parameter registry.

    Assigning a Tensor or Module attribute registers it; ``parameters()``
    walks the tree and yields dotted names, which double as checkpoint keys.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, mod in self._modules.items():
            out.update(mod.parameters(prefix=f"{prefix}{name}."))
        return out

    def trainable_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        return OrderedDict(
            (k, v) for k, v in self.parameters(prefix).items() if v.requires_grad
        )

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False

    def num_parameters(self, trainable_only: bool = False) -> int:
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return sum(p.size for p in params.values())

    def weights_hash(self, trainable_only: bool = False) -> str:
        """SHA-256 over parameter names and raw float64 bytes, in tree order."""
        params = self.trainable_parameters() if trainable_only else self.parameters()
        h = hashlib.sha256()
        for name, p in params.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            self._modules[str(i)] = m
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def param(rng: np.random.Generator, shape, scale: float | None = None,
          zeros: bool = False) -> Tensor:
    """Trainable tensor; default scale is 1/sqrt(fan_in) for 2-D weights."""
    if zeros:
        data = np.zeros(shape)
    else:
        if scale is None:
            fan_in = shape[0] if len(shape) > 1 else shape[-1]
            scale = 1.0 / np.sqrt(fan_in)
        data = rng.normal(0.0, scale, size=shape)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """Affine map x @ w + b applied to the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None,
                 zeros: bool = False):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.w = param(rng, (d_in, d_out), scale=scale, zeros=zeros)
        self.has_bias = bias
        if bias:
            self.b = param(rng, (d_out,), zeros=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expected last dim {self.d_in}, got {x.shape[-1]}")
        out = ad.matmul(x, self.w)
        if self.has_bias:
            out = ad.add(out, self.b)
        return out


class LoraLinear(Module):
    """A frozen Linear plus a trainable low-rank update.

    Forward is x @ (w + (alpha/r) * a @ b) + bias with a of shape (d_in, r)
    and b of shape (r, d_out). b starts at zero so the adapted map equals the
    base map exactly until the first update. Dropout, when enabled, applies
    to the adapter branch input only.
    """

    def __init__(self, base: Linear, rank: int, alpha: float,
                 rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        if rank >= min(base.d_in, base.d_out):
            raise ValueError(
                f"LoRA rank {rank} must be < min(d_in, d_out) = "
                f"{min(base.d_in, base.d_out)}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.dropout_p = dropout
        self.lora_a = param(rng, (base.d_in, rank), scale=0.01)
        self.lora_b = param(rng, (rank, base.d_out), zeros=True)
        self._rng = rng
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        out = self.base(x)
        xa = x
        if self.dropout_p > 0.0 and self.training:
            xa = ad.dropout(x, self.dropout_p, self._rng)
        delta = ad.matmul(ad.matmul(xa, self.lora_a), self.lora_b)
        return ad.add(out, ad.mul(delta, Tensor(self.scaling)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: np.random.Generator,
                 scale: float = 0.1):
        super().__init__()
        self.rows = rows
        self.dim = dim
        self.table = param(rng, (rows, dim), scale=scale)

    def __call__(self, indices: np.ndarray) -> Tensor:
        return ad.embedding(self.table, indices)


def causal_mask(length: int) -> np.ndarray:
    """(1, 1, T, T) additive mask hiding positions j > i."""
    return np.triu(np.full((length, length), ad.NEG_INF), k=1)[None, None]


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, 1, 1, T) additive mask from a (B, T) 0/1 validity matrix."""
    valid = np.asarray(valid, dtype=np.float64)
    return ((1.0 - valid) * ad.NEG_INF)[:, None, None, :]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value widths.

    ``kv_dim`` is the width of the attended sequence (cross-attention may
    attend into a differently sized space); queries and output live in
    ``d_model``. The additive mask broadcasts against (B, heads, Tq, Tk).
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        kv_dim = kv_dim if kv_dim is not None else d_model
        self.d_model = d_model
        self.kv_dim = kv_dim
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(kv_dim, d_model, rng)
        self.wv = Linear(kv_dim, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        return ad.transpose(
            ad.reshape(x, (batch, length, self.heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, kv: Tensor,
                 mask: np.ndarray | None = None,
                 key_bias: Tensor | None = None) -> Tensor:
        if kv.shape[-1] != self.kv_dim:
            raise ValueError(
                f"attention key/value width mismatch: expected {self.kv_dim}, "
                f"got {kv.shape[-1]}")
        b, tq = query.shape[0], query.shape[1]
        tk = kv.shape[1]
        q = self._split(self.wq(query), b, tq)
        k_lin = self.wk(kv)
        if key_bias is not None:
            k_lin = ad.add(k_lin, key_bias)
        k = self._split(k_lin, b, tk)
        v = self._split(self.wv(kv), b, tk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                        Tensor(1.0 / np.sqrt(self.d_head)))
        if mask is not None:
            scores = ad.add(scores, Tensor(mask))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.d_model))
        return self.wo(merged)


class FeedForward(Module):
    """Position-wise two-layer MLP with ReLU."""

    def __init__(self, d_model: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.up = Linear(d_model, d_hidden, rng)
        self.down = Linear(d_hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.relu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm block: self-attention then FFN, each with a residual."""

    def __init__(self, d_model: int, heads: int, d_ff: int,
                 rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, mask=mask))
        x = ad.add(x, self.ff(self.ln2(x)))
        return x
