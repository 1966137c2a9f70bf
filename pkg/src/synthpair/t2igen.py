"""Masked-token text-to-image generator.

Training corrupts a cosine-scheduled fraction of a grid's VQ tokens with the
dropped token and scores cross-entropy on the corrupted positions only.
Sampling starts from an all-dropped grid and commits the most confident
predictions over a fixed number of refinement steps, with classifier-free
guidance from a caption-dropout null branch.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError
from .numerics import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    TransformerBlock,
    add,
    embedding,
    mul,
    no_grad,
    softmax_cross_entropy,
)
from .serialize import content_hash, load_blob, save_blob
from .vlm.lm import CaptionEmbedding
from .vq import TokenGrid

log = logging.getLogger(__name__)


class DecodeError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite logits at decode step {step}")
        self.step = step


@dataclass
class T2IConfig:
    codebook_size: int = 512
    n_tokens: int = 64
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 512
    text_dim: int = 128
    dropout: float = 0.1
    caption_dropout: float = 0.1
    seed: int = 0

    @property
    def drop_id(self) -> int:
        return self.codebook_size


@dataclass
class DecodeConfig:
    steps: int = 24
    guidance_scale: float = 4.0
    choice_temperature: float = 32.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("decode needs at least one step")
        if self.guidance_scale < 0 or self.choice_temperature < 0:
            raise ValueError("guidance scale and choice temperature must be non-negative")


class T2IModel(Module):
    def __init__(self, cfg: T2IConfig | None = None):
        self.cfg = cfg = cfg or T2IConfig()
        rng = np.random.default_rng(cfg.seed)
        drop_rng = np.random.default_rng([cfg.seed, 1])
        self.tok_emb = Parameter(rng.standard_normal((cfg.codebook_size + 1, cfg.dim)) * 0.02)
        self.pos_emb = Parameter(rng.standard_normal((cfg.n_tokens, cfg.dim)) * 0.02)
        self.text_proj = Linear(cfg.text_dim, cfg.dim, rng)
        self.null_ctx = Parameter(rng.standard_normal((1, cfg.dim)) * 0.02)
        self.blocks = [TransformerBlock(cfg.dim, cfg.n_heads, rng, cfg.mlp_hidden, cross_attention=True,
                                        d_ctx=cfg.dim, dropout_p=cfg.dropout, dropout_rng=drop_rng)
                       for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.codebook_size, rng)

    def context(self, emb: CaptionEmbedding | None, null: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Projected caption states, with null rows swapped for the learned null token."""
        b = len(null)
        null = np.asarray(null, dtype=bool)
        if emb is None:
            if not null.all():
                raise ValueError("conditional rows need a caption embedding")
            states = np.zeros((b, 1, self.cfg.text_dim), np.float32)
            mask = np.ones((b, 1), bool)
        else:
            states, mask = emb.states, emb.mask.copy()
        ctx = self.text_proj(Tensor(states))
        if null.any():
            keep = (~null).astype(ctx.dtype)[:, None, None]
            ctx = add(mul(ctx, keep), mul(self.null_ctx, (1.0 - keep)))
            mask[null] = False
            mask[null, 0] = True
        return ctx, mask

    def forward(self, ids: np.ndarray, emb: CaptionEmbedding | None, null: np.ndarray | None = None,
                train: bool = False, positions: np.ndarray | None = None) -> Tensor:
        """Logits (B, N, K); with ``positions`` (bool B x N) only those rows, flattened."""
        ids = np.asarray(ids)
        b = ids.shape[0]
        null = np.zeros(b, bool) if null is None else np.asarray(null, bool)
        ctx, mask = self.context(emb, null)
        m = mask[..., None].astype(ctx.dtype)
        pooled = mul(ctx, m).sum(axis=1) * Tensor((1.0 / m.sum(axis=1)).astype(ctx.dtype))
        x = add(embedding(self.tok_emb, ids), self.pos_emb)
        x = add(x, pooled.reshape(b, 1, self.cfg.dim))
        for block in self.blocks:
            x = block(x, ctx, mask, train=train)
        x = self.ln_f(x)
        if positions is not None:
            x = x[np.asarray(positions, bool)]
        return self.head(x)

    def hash(self) -> str:
        return content_hash(self.state_dict())

    def save(self, path: str | Path, extra: dict | None = None) -> str:
        return save_blob(path, self.state_dict(), {"kind": "t2i", **asdict(self.cfg), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> "T2IModel":
        arrays, meta = load_blob(path)
        model = cls(T2IConfig(**{k: meta[k] for k in T2IConfig.__dataclass_fields__}))
        model.load_state_dict(arrays)
        return model.eval()


# -- masking -------------------------------------------------------------------

def sample_mask(rng: np.random.Generator, n: int) -> np.ndarray:
    """Sorted indices of m = max(1, round(n cos(pi u / 2))) positions, u ~ U[0, 1)."""
    if n < 1:
        raise ValueError("grid must have at least one token")
    u = rng.random()
    m = max(1, int(math.floor(n * math.cos(math.pi * u / 2) + 0.5)))
    return np.sort(rng.choice(n, size=min(m, n), replace=False))


def apply_mask(grid: TokenGrid, masked: np.ndarray, drop_id: int) -> TokenGrid:
    masked = np.asarray(masked, dtype=np.int64)
    if masked.size and (masked.min() < 0 or masked.max() >= grid.n):
        raise IndexError(f"mask indices must lie in [0, {grid.n})")
    out = grid.copy()
    out.ids[masked] = drop_id
    return out


def masked_count_at_step(t: int, total: int, n: int) -> int:
    """Tokens still masked after refinement step t: ceil(n cos(pi t / (2 total)))."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if t == total:
        return 0
    v = n * math.cos(math.pi / 2 * t / total)
    # exact rational points such as cos(pi/3) = 1/2 land a few ulps above the integer
    nearest = round(v)
    if abs(v - nearest) <= 1e-9 * max(n, 1):
        return int(nearest)
    return int(math.ceil(v))


def caption_dropout_draws(rng: np.random.Generator, batch: int, p: float) -> np.ndarray:
    return rng.random(batch) < p


def masked_loss(model: T2IModel, emb: CaptionEmbedding | None, ids: np.ndarray, masks: np.ndarray,
                null: np.ndarray | None = None, train: bool = False,
                visible: np.ndarray | None = None) -> Tensor:
    """Cross-entropy over masked positions of a (B, N) batch of ground-truth ids.

    ``visible`` overrides the ids shown at unmasked positions; by default they
    are the ground truth.
    """
    ids = np.asarray(ids)
    masks = np.asarray(masks, bool)
    if not masks.any():
        raise ValueError("mask set is empty")
    if np.any(ids == model.cfg.drop_id):
        raise ValueError("ground-truth grids must not contain the dropped token")
    corrupted = np.where(masks, model.cfg.drop_id, ids if visible is None else visible)
    logits = model(corrupted, emb, null, train=train, positions=masks)
    return softmax_cross_entropy(logits, ids[masks])


def t2i_loss(model: T2IModel, caption_emb: CaptionEmbedding, grid: TokenGrid, masked: np.ndarray) -> Tensor:
    masked = np.asarray(masked, dtype=np.int64)
    if masked.size == 0:
        raise ValueError("mask set is empty")
    if grid.count(model.cfg.drop_id):
        raise ValueError("ground-truth grid contains the dropped token")
    m = np.zeros((1, grid.n), bool)
    m[0, masked] = True
    return masked_loss(model, caption_emb, grid.ids[None], m)


# -- sampling ------------------------------------------------------------------

def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def decode_batch(model: T2IModel, emb: CaptionEmbedding, cfg: DecodeConfig,
                 rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """Iteratively fill B all-dropped grids; returns (B, N) ids in [0, K).

    Each step samples candidate ids at masked positions (argmax when the
    choice temperature is 0), scores them by log-probability plus Gumbel noise
    scaled by ``choice_temperature * (1 - t/T)``, and commits the best so that
    exactly ``masked_count_at_step(t)`` positions stay dropped.
    """
    n, k, drop = model.cfg.n_tokens, model.cfg.codebook_size, model.cfg.drop_id
    b = len(emb)
    ids = np.full((b, n), drop, dtype=np.int64)
    s, tau, total = cfg.guidance_scale, cfg.choice_temperature, cfg.steps
    if trace is not None:
        trace.append(n)
    cond = np.zeros(b, bool)
    with no_grad():
        for t in range(1, total + 1):
            masked = ids == drop
            logits = model(ids, emb, cond).data.astype(np.float64)
            if s > 0:
                uncond = model(ids, emb, ~cond).data.astype(np.float64)
                logits = (1.0 + s) * logits - s * uncond
            if not np.all(np.isfinite(logits)):
                raise DecodeError(t)
            logp = _log_softmax(logits)
            if tau > 0:
                sampled = np.argmax(logp + rng.gumbel(size=logp.shape), axis=-1)
            else:
                sampled = np.argmax(logp, axis=-1)
            conf = np.take_along_axis(logp, sampled[..., None], axis=-1)[..., 0]
            anneal = tau * (1.0 - t / total)
            if anneal > 0:
                conf = conf + anneal * rng.gumbel(size=conf.shape)
            conf = np.where(masked, conf, np.inf)
            keep = n - masked_count_at_step(t, total, n)
            order = np.argsort(-conf, axis=1, kind="stable")[:, :keep]
            chosen = np.zeros_like(masked)
            np.put_along_axis(chosen, order, True, axis=1)
            ids = np.where(chosen & masked, sampled, ids)
            if trace is not None:
                trace.append(int((ids == drop).sum(1).max()))
    assert not np.any(ids == drop)
    assert ids.max(initial=0) < k
    return ids


def decode_iterative(model: T2IModel, caption_emb: CaptionEmbedding, cfg: DecodeConfig,
                     rng: np.random.Generator | None = None, trace: list | None = None) -> TokenGrid:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    ids = decode_batch(model, caption_emb[:1], cfg, rng, trace)
    return TokenGrid(ids[0], int(round(math.sqrt(model.cfg.n_tokens))))


# -- training ------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    null_captions: int
    batch: int
    duration: float


def _batches(stream: Iterator, batch_size: int) -> Iterator[tuple[CaptionEmbedding, np.ndarray]]:
    while True:
        embs, grids = [], []
        for emb, grid in stream:
            embs.append(emb)
            grids.append(grid.ids if isinstance(grid, TokenGrid) else np.asarray(grid))
            if len(grids) == batch_size:
                break
        if not grids:
            return
        yield CaptionEmbedding.concat(embs), np.stack(grids)
        if len(grids) < batch_size:
            return


def train_t2i(model: T2IModel, pair_stream: Iterable, optimizer, steps: int, batch_size: int = 32,
              seed: int = 0) -> list[StepRecord]:
    """Masked-token training; pairs are (CaptionEmbedding of one caption, TokenGrid)."""
    rng = np.random.default_rng(seed)
    stream = iter(pair_stream)
    batches = _batches(stream, batch_size)
    records: list[StepRecord] = []
    n, p_null = model.cfg.n_tokens, model.cfg.caption_dropout
    for step in range(steps):
        t0 = time.perf_counter()
        try:
            emb, ids = next(batches)
        except StopIteration:
            if step == 0:
                raise DataError("pair stream is empty") from None
            log.warning("pair stream exhausted after %d steps", step)
            break
        b = ids.shape[0]
        masks = np.zeros((b, n), bool)
        for i in range(b):
            masks[i, sample_mask(rng, n)] = True
        null = caption_dropout_draws(rng, b, p_null)
        loss = masked_loss(model, emb, ids, masks, null, train=True)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        records.append(StepRecord(step + 1, float(loss), optimizer.last_lr, int(null.sum()), b,
                                  time.perf_counter() - t0))
    if steps == 0:
        # still surface an empty stream
        try:
            next(stream)
        except StopIteration:
            raise DataError("pair stream is empty") from None
    return records
