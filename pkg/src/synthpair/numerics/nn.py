"""Parameters, modules and transformer layers built on the autodiff core."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

NEG_INF = -1e9


class ConfigError(ValueError):
    pass


class Parameter(Tensor):
    """A leaf tensor owned by a module. ``trainable=False`` freezes it."""

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val._walk(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used by gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02):
        self.weight = Parameter(_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d, np.float32))
        self.beta = Parameter(np.zeros(d, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.table = Parameter(_normal(rng, (n, d), std))

    def forward(self, ids) -> Tensor:
        return embedding(self.table, ids)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator | None):
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.rng, self.training)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Projection weights for one attention sublayer (self or cross)."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 d_kv: int | None = None):
        if d_model % n_heads:
            raise ConfigError(f"model dim {d_model} not divisible by {n_heads} heads")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_kv, d_model, rng)
        self.wv = Linear(d_kv, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def forward(self, q_src: Tensor, kv_src: Tensor, causal_mask: bool = False,
                key_mask: np.ndarray | None = None) -> Tensor:
        return multi_head_attention(q_src, kv_src, self, causal_mask, key_mask)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(q_src: Tensor, kv_src: Tensor, params: MultiHeadAttention,
                         causal_mask: bool = False, key_mask: np.ndarray | None = None) -> Tensor:
    """softmax(QK^T / sqrt(d_head)) V per head, concatenated and projected.

    Accepts (T, D) or (B, T, D) inputs. ``key_mask`` is boolean (B, Tk) with
    True marking keys that may be attended to.
    """
    unbatched = q_src.ndim == 2
    if unbatched:
        q_src = reshape(q_src, (1,) + q_src.shape)
        kv_src = reshape(kv_src, (1,) + kv_src.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    h = params.n_heads
    d_model = params.wq.weight.shape[1]
    if d_model % h:
        raise ConfigError(f"model dim {d_model} not divisible by {h} heads")
    b, tq, _ = q_src.shape
    tk = kv_src.shape[1]
    q = _split_heads(params.wq(q_src), h)
    k = _split_heads(params.wk(kv_src), h)
    v = _split_heads(params.wv(kv_src), h)
    scale = 1.0 / math.sqrt(d_model // h)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
    bias = None
    if causal_mask:
        if tq != tk:
            raise DimensionError("causal attention needs equal query/key lengths")
        bias = np.triu(np.full((tq, tk), NEG_INF, dtype=scores.dtype), k=1)
    if key_mask is not None:
        km = np.where(np.asarray(key_mask, dtype=bool), 0.0, NEG_INF).astype(scores.dtype)
        km = km[:, None, None, :]
        bias = km if bias is None else bias + km
    if bias is not None:
        scores = add(scores, bias)
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, tq, d_model))
    out = params.wo(ctx)
    if unbatched:
        out = reshape(out, out.shape[1:])
    return out


class TransformerBlock(Module):
    """Pre-LN block: self-attention, optional cross-attention, MLP."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, mlp_hidden: int | None = None,
                 cross_attention: bool = False, d_ctx: int | None = None, causal: bool = False,
                 dropout_p: float = 0.0, dropout_rng: np.random.Generator | None = None):
        self.causal = causal
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln_x = LayerNorm(d) if cross_attention else None
        self.xattn = MultiHeadAttention(d, n_heads, rng, d_kv=d_ctx) if cross_attention else None
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_hidden or 4 * d, rng)
        self.drop = Dropout(dropout_p, dropout_rng)

    def forward(self, x: Tensor, ctx: Tensor | None = None, ctx_mask: np.ndarray | None = None,
                train: bool | None = None) -> Tensor:
        train = self.training if train is None else train
        p, rng = self.drop.p, self.drop.rng
        h = self.ln1(x)
        x = add(x, dropout(self.attn(h, h, causal_mask=self.causal), p, rng, train))
        if self.xattn is not None:
            if ctx is None:
                raise ConfigError("cross-attention block needs a context")
            x = add(x, dropout(self.xattn(self.ln_x(x), ctx, key_mask=ctx_mask), p, rng, train))
        return add(x, dropout(self.mlp(self.ln2(x)), p, rng, train))
