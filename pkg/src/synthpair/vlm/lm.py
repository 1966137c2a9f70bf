"""Small decoder-only byte LM, pretrained on captions and then frozen."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..capgen import EOS, MAX_LEN, PAD, VOCAB_SIZE, pad_ids
from ..numerics import (
    AdamW,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    TransformerBlock,
    add,
    embedding,
    no_grad,
    softmax_cross_entropy,
)
from ..serialize import content_hash, load_blob, save_blob

log = logging.getLogger(__name__)

LayerHook = Callable[[int, Tensor], Tensor]


@dataclass
class LMConfig:
    vocab_size: int = VOCAB_SIZE
    dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = MAX_LEN
    seed: int = 0


class FrozenLM(Module):
    def __init__(self, cfg: LMConfig | None = None):
        self.cfg = cfg = cfg or LMConfig()
        rng = np.random.default_rng(cfg.seed)
        self.tok_emb = Parameter(rng.standard_normal((cfg.vocab_size, cfg.dim)) * 0.02)
        self.pos_emb = Parameter(rng.standard_normal((cfg.max_len, cfg.dim)) * 0.02)
        self.blocks = [TransformerBlock(cfg.dim, cfg.n_heads, rng, causal=True) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.vocab_size, rng)

    def hidden(self, ids: np.ndarray, hook: LayerHook | None = None) -> Tensor:
        """Final-layer-norm states (B, T, dim). ``hook(i, x)`` runs after block i."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        t = ids.shape[1]
        if t > self.cfg.max_len:
            raise ValueError(f"sequence of {t} exceeds max_len {self.cfg.max_len}")
        x = add(embedding(self.tok_emb, ids), self.pos_emb[:t])
        for i, block in enumerate(self.blocks):
            x = block(x)
            if hook is not None:
                x = hook(i, x)
        return self.ln_f(x)

    def forward(self, ids: np.ndarray, hook: LayerHook | None = None) -> Tensor:
        return self.head(self.hidden(ids, hook))

    def hash(self) -> str:
        return content_hash(self.state_dict())

    def save(self, path: str | Path) -> str:
        return save_blob(path, self.state_dict(), {"kind": "lm", **asdict(self.cfg)})

    @classmethod
    def load(cls, path: str | Path) -> "FrozenLM":
        arrays, meta = load_blob(path)
        lm = cls(LMConfig(**{k: meta[k] for k in LMConfig.__dataclass_fields__}))
        lm.load_state_dict(arrays)
        return lm.freeze()


def next_token_targets(ids: np.ndarray) -> np.ndarray:
    """Targets for positions 0..T-2: the next id, with PAD after the first EOS."""
    ids = np.asarray(ids)
    tgt = ids[:, 1:].copy()
    after_eos = np.cumsum(ids == EOS, axis=1)[:, :-1] > 0
    tgt[after_eos] = PAD
    return tgt


def batch_ids(token_lists: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = length or max(len(t) for t in token_lists)
    return np.stack([pad_ids(t, length) for t in token_lists])


def lm_loss(lm: FrozenLM, ids: np.ndarray) -> Tensor:
    logits = lm(ids[:, :-1])
    return softmax_cross_entropy(logits, next_token_targets(ids), ignore_id=PAD)


def pretrain_lm(lm: FrozenLM, token_lists: Sequence[Sequence[int]], steps: int = 5000,
                batch_size: int = 32, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Next-token training on caption ids; freezes the LM afterwards."""
    rng = np.random.default_rng(seed)
    ids = batch_ids(token_lists)
    for p in lm.parameters():
        p.trainable = True
    opt = AdamW(lm.parameters(), lr=lr, warmup_steps=min(200, steps // 10), weight_decay=1e-4)
    lm.train()
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(ids), size=min(batch_size, len(ids)), replace=False)
        batch = ids[idx]
        width = int((batch != PAD).sum(1).max())
        loss = lm_loss(lm, batch[:, :width])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    lm.eval()
    lm.freeze()
    if losses:
        log.info("lm pretrain: final loss %.4f", losses[-1])
    return losses


@dataclass
class CaptionEmbedding:
    """Frozen-LM states for a batch of captions; ``mask`` marks real tokens."""

    states: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, idx) -> "CaptionEmbedding":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return CaptionEmbedding(self.states[idx], self.mask[idx])

    @staticmethod
    def concat(parts: Sequence["CaptionEmbedding"]) -> "CaptionEmbedding":
        width = max(p.states.shape[1] for p in parts)

        def pad(a, fill):
            out = np.full((a.shape[0], width) + a.shape[2:], fill, dtype=a.dtype)
            out[:, : a.shape[1]] = a
            return out

        return CaptionEmbedding(np.concatenate([pad(p.states, 0) for p in parts]),
                                np.concatenate([pad(p.mask, False) for p in parts]))

    def pooled(self) -> np.ndarray:
        m = self.mask[..., None].astype(self.states.dtype)
        return (self.states * m).sum(1) / np.maximum(m.sum(1), 1.0)


def embed_caption_ids(lm: FrozenLM, token_lists: Sequence[Sequence[int]],
                      batch_size: int = 64) -> CaptionEmbedding:
    parts = []
    with no_grad():
        for start in range(0, len(token_lists), batch_size):
            chunk = token_lists[start:start + batch_size]
            ids = batch_ids(chunk)
            states = lm.hidden(ids).data.astype(np.float32)
            parts.append(CaptionEmbedding(states, ids != PAD))
    return CaptionEmbedding.concat(parts)
