"""Vision-language model: a Perceiver-style resampler over codebook embeddings,
tanh-gated cross-attention inserted after every block of a frozen LM."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from ..capgen import BOS, EOS, MAX_LEN, PAD
from ..numerics import (
    MLP,
    ConfigError,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    Tensor,
    add,
    mul,
    no_grad,
    softmax_cross_entropy,
    tanh,
)
from ..serialize import content_hash, load_blob, save_blob
from ..vq import PIXEL_OPS, DropTokenError, TokenGrid, VQBackbone, embed_ids
from .lm import FrozenLM, batch_ids, next_token_targets

log = logging.getLogger(__name__)

Modality = Literal["pixel", "embedding"]
Origin = Literal["real", "synthetic"]


class CaptionContractError(ValueError):
    """Caption ids that cannot produce a next-token loss."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/Inf loss; ``batch`` holds the offending inputs."""

    def __init__(self, loss: float, batch: dict, dump_path: Path | None = None):
        where = f" (batch dumped to {dump_path})" if dump_path else ""
        super().__init__(f"non-finite loss {loss}{where}")
        self.loss = loss
        self.batch = batch
        self.dump_path = dump_path


@dataclass
class PairRecord:
    """One caption paired with an image, either as pixels or as a token grid."""

    caption_ids: list[int]
    grid: TokenGrid | None = None
    image: np.ndarray | None = None
    modality: Modality = "embedding"
    origin: Origin = "real"

    def __post_init__(self):
        if self.modality not in ("pixel", "embedding"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.origin not in ("real", "synthetic"):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.modality == "pixel" and self.image is None:
            raise ValueError("pixel records need an image")
        if self.modality == "embedding" and self.grid is None:
            raise ValueError("embedding records need a token grid")


@dataclass
class VLMConfig:
    n_latents: int = 16
    resampler_layers: int = 2
    n_heads: int = 4
    width: int = 128
    xattn_heads: int = 4
    max_positions: int = 256
    seed: int = 0


class ResamplerLayer(Module):
    """Latents cross-attend to the image tokens, then a residual MLP."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        self.ln_q = LayerNorm(width)
        self.ln_kv = LayerNorm(width)
        self.attn = MultiHeadAttention(width, n_heads, rng)
        self.ln_ff = LayerNorm(width)
        self.mlp = MLP(width, 4 * width, rng)

    def forward(self, latents: Tensor, tokens: Tensor) -> Tensor:
        x = add(latents, self.attn(self.ln_q(latents), self.ln_kv(tokens)))
        return add(x, self.mlp(self.ln_ff(x)))


class PerceiverResampler(Module):
    """Maps any number of input tokens to a fixed set of latent outputs."""

    def __init__(self, code_dim: int, cfg: VLMConfig, rng: np.random.Generator):
        self.code_dim = code_dim
        self.in_proj = Linear(code_dim, cfg.width, rng, std=1.0 / np.sqrt(code_dim))
        self.pos_emb = Parameter(rng.standard_normal((cfg.max_positions, cfg.width)) * 0.02)
        self.latents = Parameter(rng.standard_normal((cfg.n_latents, cfg.width)) * 0.02)
        self.layers = [ResamplerLayer(cfg.width, cfg.n_heads, rng) for _ in range(cfg.resampler_layers)]
        self.ln_out = LayerNorm(cfg.width)

    def forward(self, tokens: Tensor, positional: bool = True) -> Tensor:
        """(B, N, code_dim) -> (B, L, width)."""
        if tokens.ndim == 2:
            tokens = tokens.reshape(1, *tokens.shape)
        b, n, d = tokens.shape
        if n < 1:
            raise ConfigError("resampler needs at least one input token")
        if d != self.code_dim:
            raise ConfigError(f"input dim {d} does not match resampler dim {self.code_dim}")
        x = self.in_proj(tokens)
        if positional:
            if n > self.pos_emb.shape[0]:
                raise ConfigError(f"{n} tokens exceed {self.pos_emb.shape[0]} learned positions")
            x = add(x, self.pos_emb[:n])
        lat = add(self.latents, Tensor(np.zeros((b, 1, 1), x.dtype)))
        for layer in self.layers:
            lat = layer(lat, x)
        return self.ln_out(lat)


class GatedXAttnLayer(Module):
    """x + tanh(g) * CrossAttn(LN(x), latents); g starts at zero."""

    def __init__(self, d_model: int, d_latent: int, n_heads: int, rng: np.random.Generator):
        self.ln = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, d_kv=d_latent)
        self.gate = Parameter(np.zeros(1))

    def forward(self, x: Tensor, latents: Tensor) -> Tensor:
        return add(x, mul(self.attn(self.ln(x), latents), tanh(self.gate)))


class VisionAdapter(Module):
    """All trainable VLM parameters: resampler plus one gated layer per LM block."""

    def __init__(self, cfg: VLMConfig, code_dim: int, lm_dim: int, n_lm_layers: int):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.resampler = PerceiverResampler(code_dim, cfg, rng)
        self.xattn = [GatedXAttnLayer(lm_dim, cfg.width, cfg.xattn_heads, rng) for _ in range(n_lm_layers)]


class VLM:
    """Frozen LM and VQ backbone plus the trainable adapter."""

    def __init__(self, lm: FrozenLM, vq: VQBackbone, cfg: VLMConfig | None = None,
                 adapter: VisionAdapter | None = None):
        self.cfg = cfg or VLMConfig()
        self.lm = lm.eval().freeze()
        self.vq = vq.eval().freeze()
        self.adapter = adapter or VisionAdapter(self.cfg, vq.cfg.code_dim, lm.cfg.dim, lm.cfg.n_layers)
        if len(self.adapter.xattn) != lm.cfg.n_layers:
            raise ConfigError("need one gated layer per LM block")

    def parameters(self) -> list[Parameter]:
        return self.adapter.parameters()

    def manifest(self) -> dict[str, str]:
        return {
            "lm": self.lm.hash(),
            "vq": self.vq.hash(),
            "resampler": content_hash(self.adapter.resampler.state_dict()),
            "xattn": content_hash({f"{i}.{k}": v for i, layer in enumerate(self.adapter.xattn)
                                   for k, v in layer.state_dict().items()}),
        }

    def save(self, path: str | Path) -> str:
        meta = {"kind": "vlm", "config": asdict(self.cfg), "manifest": self.manifest()}
        return save_blob(path, self.adapter.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path, lm: FrozenLM, vq: VQBackbone) -> "VLM":
        arrays, meta = load_blob(path)
        manifest = meta["manifest"]
        for name, model in (("lm", lm), ("vq", vq)):
            if model.hash() != manifest[name]:
                raise ValueError(f"{name} checkpoint does not match the one this VLM was trained with")
        vlm = cls(lm, vq, VLMConfig(**meta["config"]))
        vlm.adapter.load_state_dict(arrays)
        return vlm


# -- forward -------------------------------------------------------------------

def grid_ids(vlm: VLM, records: Sequence[PairRecord]) -> np.ndarray:
    """(B, N) token ids; pixel records are encoded by the frozen backbone."""
    ids: list[np.ndarray | None] = [r.grid.ids if r.modality == "embedding" else None for r in records]
    pixel = [i for i, r in enumerate(records) if r.modality == "pixel"]
    if pixel:
        encoded = vlm.vq.encode_batch(np.stack([records[i].image for i in pixel]))
        for i, row in zip(pixel, encoded):
            ids[i] = row
    return np.stack(ids)


def image_latents(vlm: VLM, ids: np.ndarray) -> Tensor:
    """Both input paths meet here: codebook lookup, then resampling."""
    ids = np.asarray(ids)
    if np.any(ids == vlm.vq.cfg.drop_id):
        raise DropTokenError("image grid contains the dropped token")
    return vlm.adapter.resampler(embed_ids(ids, vlm.vq.codebook))


def vlm_logits(vlm: VLM, grid_batch: np.ndarray, caption_batch: np.ndarray,
               gated: bool = True) -> Tensor:
    """Next-token logits (B, T, V) for caption prefixes ``caption_batch``."""
    latents = image_latents(vlm, grid_batch)
    layers = vlm.adapter.xattn
    hook = (lambda i, x: layers[i](x, latents)) if gated else None
    return vlm.lm(caption_batch, hook)


def _caption_batch(records: Sequence[PairRecord]) -> np.ndarray:
    for r in records:
        if len(r.caption_ids) < 2:
            raise CaptionContractError("captions need at least two tokens")
    return batch_ids([r.caption_ids for r in records])


def vlm_forward(vlm: VLM, records: Sequence[PairRecord]) -> tuple[Tensor, np.ndarray]:
    """Logits over caption positions 1..T-1 and the caption id batch."""
    ids = _caption_batch(records)
    return vlm_logits(vlm, grid_ids(vlm, records), ids[:, :-1]), ids


def vlm_loss(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy; PAD and anything after EOS are ignored."""
    targets = next_token_targets(np.asarray(ids))
    if np.all(targets == PAD):
        raise CaptionContractError("caption batch has no predictable tokens")
    return softmax_cross_entropy(logits, targets, ignore_id=PAD)


def token_accuracy(logits: Tensor, ids: np.ndarray) -> float:
    targets = next_token_targets(np.asarray(ids))
    valid = targets != PAD
    return float((logits.data.argmax(-1)[valid] == targets[valid]).mean())


def vlm_train_step(vlm: VLM, records: Sequence[PairRecord], optimizer,
                   dump_dir: str | Path | None = None) -> float:
    """One optimizer update on the adapter; the LM and VQ backbone never change."""
    vlm.adapter.train()
    logits, ids = vlm_forward(vlm, records)
    try:
        loss = vlm_loss(logits, ids)
        value = float(loss)
    except FloatingPointError:
        value = float("nan")
    if not np.isfinite(value):
        batch = {
            "captions": [list(map(int, r.caption_ids)) for r in records],
            "grids": grid_ids(vlm, records).tolist(),
            "origins": [r.origin for r in records],
        }
        path = None
        if dump_dir is not None:
            path = Path(dump_dir) / f"nonfinite_step{optimizer.state.step + 1}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(batch))
        raise NonFiniteLossError(value, batch, path)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return value


@dataclass
class VLMEval:
    loss: float
    accuracy: float
    n_tokens: int = field(default=0)


def evaluate(vlm: VLM, records: Sequence[PairRecord], batch_size: int = 64) -> VLMEval:
    """Token-weighted held-out loss and next-token accuracy."""
    total_loss = total_hit = total_n = 0.0
    vlm.adapter.eval()
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            logits, ids = vlm_forward(vlm, chunk)
            targets = next_token_targets(ids)
            n = int((targets != PAD).sum())
            total_loss += float(vlm_loss(logits, ids)) * n
            total_hit += token_accuracy(logits, ids) * n
            total_n += n
    return VLMEval(total_loss / total_n, total_hit / total_n, int(total_n))


# -- generation ----------------------------------------------------------------

def _greedy(step_logits, max_len: int) -> list[int]:
    ids = [BOS]
    while len(ids) < max_len:
        nxt = int(step_logits(np.array([ids]))[0, -1].argmax())
        ids.append(nxt)
        if nxt == EOS:
            break
    return ids


def generate_caption(vlm: VLM, image_or_grid, max_len: int = MAX_LEN) -> list[int]:
    """Greedy decoding from BOS until EOS or ``max_len`` ids (BOS included)."""
    if isinstance(image_or_grid, TokenGrid):
        grid = image_or_grid.ids[None]
    else:
        grid = vlm.vq.encode_batch(np.asarray(image_or_grid)[None])
    with no_grad():
        latents = image_latents(vlm, grid)
        layers = vlm.adapter.xattn
        return _greedy(lambda ids: vlm.lm(ids, lambda i, x: layers[i](x, latents)).data, max_len)


def lm_greedy(lm: FrozenLM, max_len: int = MAX_LEN) -> list[int]:
    """Unconditional greedy decode of the LM alone."""
    with no_grad():
        return _greedy(lambda ids: lm(ids).data, max_len)


def train_vlm(vlm: VLM, stream: Iterable[Sequence[PairRecord]], optimizer, steps: int) -> list[float]:
    it = iter(stream)
    return [vlm_train_step(vlm, next(it), optimizer) for _ in range(steps)]


def pixel_ops() -> int:
    return PIXEL_OPS["encode"] + PIXEL_OPS["decode"]
