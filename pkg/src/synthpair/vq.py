"""Discrete image tokenization: codebook, nearest-neighbour quantization and a
small patch encoder/decoder trained by reconstruction (frozen afterwards)."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    AdamW,
    ConfigError,
    Linear,
    Module,
    Parameter,
    Tensor,
    add,
    embedding,
    gelu,
    mean,
    mul,
    no_grad,
)
from .serialize import content_hash, load_blob, save_blob

log = logging.getLogger(__name__)

# pixel-space work done by the backbone; the synthetic path must leave these at zero
PIXEL_OPS: Counter = Counter()


class DropTokenError(ValueError):
    """A dropped (masked) token reached code that needs finalized ids."""


@dataclass
class VQConfig:
    codebook_size: int = 512
    code_dim: int = 32
    side: int = 8
    patch: int = 4
    hidden: int = 64
    seed: int = 0

    @property
    def n_tokens(self) -> int:
        return self.side * self.side

    @property
    def image_size(self) -> int:
        return self.side * self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def drop_id(self) -> int:
        return self.codebook_size


class Codebook(Module):
    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        if size <= 0:
            raise ConfigError("codebook must have at least one entry")
        bound = 1.0 / np.sqrt(dim)
        self.entries = Parameter(rng.uniform(-bound, bound, (size, dim)))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def drop_id(self) -> int:
        return self.size

    def check(self) -> None:
        e = self.entries.data.astype(np.float64)
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook has non-finite rows")
        if len(np.unique(e, axis=0)) != len(e):
            raise ValueError("codebook has duplicate rows")


@dataclass
class TokenGrid:
    ids: np.ndarray
    side: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.ids.size != self.side * self.side:
            raise ValueError(f"{self.ids.size} ids do not fill a {self.side}x{self.side} grid")

    @property
    def n(self) -> int:
        return self.ids.size

    def count(self, token_id: int) -> int:
        return int((self.ids == token_id).sum())

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.ids.copy(), self.side)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenGrid) and self.side == other.side and np.array_equal(self.ids, other.ids)


def nearest_codes(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """argmin_k ||x - c_k||^2 per row; exact ties resolve to the lowest index.

    Candidates come from the expanded form; rows with several candidates within
    rounding distance of the minimum are re-scored with direct differences.
    """
    x = np.asarray(vectors, dtype=np.float64)
    c = np.asarray(entries, dtype=np.float64)
    if c.shape[0] == 0:
        raise ConfigError("empty codebook")
    if x.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ConfigError(f"vectors {x.shape} do not match codebook dim {c.shape[1]}")
    xx = (x * x).sum(1)
    cc = (c * c).sum(1)
    d = cc[None, :] - 2.0 * (x @ c.T)
    best = d.argmin(1)
    dmin = d[np.arange(len(x)), best]
    tol = 1e-9 * (xx + cc.max() + 1.0)
    near = d <= (dmin + tol)[:, None]
    for r in np.nonzero(near.sum(1) > 1)[0]:
        cand = np.nonzero(near[r])[0]
        exact = ((x[r] - c[cand]) ** 2).sum(1)
        best[r] = cand[np.argmin(exact)]
    return best


def quantize(vectors, codebook: Codebook) -> TokenGrid:
    """Map N x D vectors (N a perfect square) to the nearest codebook ids."""
    arr = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors)
    side = int(round(np.sqrt(arr.shape[0])))
    if side * side != arr.shape[0]:
        raise ConfigError(f"{arr.shape[0]} vectors do not form a square grid")
    return TokenGrid(nearest_codes(arr, codebook.entries.data), side)


def embed(grid: TokenGrid, codebook: Codebook) -> Tensor:
    """Soft embeddings: row i is ``codebook[ids[i]]``."""
    if np.any(grid.ids == codebook.drop_id) or np.any(grid.ids < 0) or np.any(grid.ids >= codebook.size):
        raise DropTokenError("grid contains dropped or out-of-range tokens")
    return embedding(codebook.entries, grid.ids)


def embed_ids(ids: np.ndarray, codebook: Codebook) -> Tensor:
    """Batched ``embed`` over a (B, N) id array."""
    ids = np.asarray(ids)
    if np.any(ids == codebook.drop_id) or np.any(ids < 0) or np.any(ids >= codebook.size):
        raise DropTokenError("grid contains dropped or out-of-range tokens")
    return embedding(codebook.entries, ids)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, patch*patch*3), patches in row-major grid order."""
    b, h, w, c = images.shape
    g = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return g.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(patches: np.ndarray, side: int, patch: int) -> np.ndarray:
    b = patches.shape[0]
    g = patches.reshape(b, side, side, patch, patch, 3)
    return g.transpose(0, 1, 3, 2, 4, 5).reshape(b, side * patch, side * patch, 3)


class PatchEncoder(Module):
    """Per-patch linear projection followed by a residual GeLU mixer."""

    def __init__(self, cfg: VQConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.patch_dim, cfg.code_dim, rng, std=1.0 / np.sqrt(cfg.patch_dim))
        self.mix1 = Linear(cfg.code_dim, cfg.hidden, rng, std=1.0 / np.sqrt(cfg.code_dim))
        self.mix2 = Linear(cfg.hidden, cfg.code_dim, rng, std=0.02)

    def forward(self, patches: Tensor) -> Tensor:
        z = self.proj(patches)
        return add(z, self.mix2(gelu(self.mix1(z))))


class PatchDecoder(Module):
    def __init__(self, cfg: VQConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.out = Linear(cfg.code_dim, cfg.patch_dim, rng, std=1.0 / np.sqrt(cfg.code_dim))

    def forward(self, z: Tensor) -> Tensor:
        return self.out(z)


class VQBackbone(Module):
    """Codebook plus encoder/decoder; stands in for a frozen VQ-GAN."""

    def __init__(self, cfg: VQConfig | None = None):
        self.cfg = cfg or VQConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.codebook = Codebook(self.cfg.codebook_size, self.cfg.code_dim, rng)
        self.encoder = PatchEncoder(self.cfg, rng)
        self.decoder = PatchDecoder(self.cfg, rng)

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) images -> (B, N) ids."""
        images = np.asarray(images, dtype=np.float32)
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise ConfigError(f"expected images of shape (B, {s}, {s}, 3), got {images.shape}")
        PIXEL_OPS["encode"] += images.shape[0]
        with no_grad():
            z = self.encoder(Tensor(patchify(images, self.cfg.patch))).data
        b, n, d = z.shape
        return nearest_codes(z.reshape(b * n, d), self.codebook.entries.data).reshape(b, n)

    def decode_batch(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        PIXEL_OPS["decode"] += ids.shape[0]
        with no_grad():
            patches = self.decoder(embed_ids(ids, self.codebook)).data
        return np.clip(unpatchify(patches, self.cfg.side, self.cfg.patch), 0.0, 1.0)

    def hash(self) -> str:
        return content_hash(self.state_dict())

    def save(self, path: str | Path) -> str:
        return save_blob(path, self.state_dict(), {"kind": "vq", **asdict(self.cfg)})

    @classmethod
    def load(cls, path: str | Path) -> "VQBackbone":
        arrays, meta = load_blob(path)
        cfg = VQConfig(**{k: meta[k] for k in VQConfig.__dataclass_fields__})
        model = cls(cfg)
        model.load_state_dict(arrays)
        return model


def encode_image(img: np.ndarray, encoder: PatchEncoder, codebook: Codebook) -> TokenGrid:
    cfg = encoder.cfg
    img = np.asarray(img, dtype=np.float32)
    if img.shape != (cfg.image_size, cfg.image_size, 3):
        raise ConfigError(f"image must be {cfg.image_size}x{cfg.image_size}x3, got {img.shape}")
    PIXEL_OPS["encode"] += 1
    with no_grad():
        z = encoder(Tensor(patchify(img[None], cfg.patch)[0])).data
    return TokenGrid(nearest_codes(z, codebook.entries.data), cfg.side)


def decode_tokens(grid: TokenGrid, decoder: PatchDecoder, codebook: Codebook) -> np.ndarray:
    """Finalized grid -> image clamped to [0, 1]."""
    cfg = decoder.cfg
    PIXEL_OPS["decode"] += 1
    with no_grad():
        patches = decoder(embed(grid, codebook)).data
    return np.clip(unpatchify(patches[None], cfg.side, cfg.patch)[0], 0.0, 1.0)


def reconstruction_mse(backbone: VQBackbone, images: np.ndarray) -> float:
    recon = backbone.decode_batch(backbone.encode_batch(images))
    return float(np.mean((recon - images) ** 2))


def pretrain_backbone(backbone: VQBackbone, images: np.ndarray, steps: int = 1500,
                      batch_size: int = 32, lr: float = 2e-3, commitment: float = 0.25,
                      seed: int = 0) -> list[float]:
    """Reconstruction training with a straight-through codebook, then freeze.

    Loss = MSE(decode(z_q), x) + MSE(z_q, sg(z_e)) + commitment * MSE(z_e, sg(z_q)).
    Codes that go unused in a batch are re-seeded from random encoder outputs
    every 100 steps so the codebook stays populated.
    """
    cfg = backbone.cfg
    rng = np.random.default_rng(seed)
    patches_all = patchify(np.asarray(images, np.float32), cfg.patch)
    opt = AdamW(backbone.parameters(), lr=lr, warmup_steps=min(100, steps // 10),
                weight_decay=0.0, clip_norm=1.0)
    usage = np.zeros(cfg.codebook_size, np.int64)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(patches_all), size=min(batch_size, len(patches_all)), replace=False)
        x = Tensor(patches_all[idx].reshape(-1, cfg.patch_dim))
        z_e = backbone.encoder(x)
        ids = nearest_codes(z_e.data, backbone.codebook.entries.data)
        usage += np.bincount(ids, minlength=cfg.codebook_size)
        z_q = embedding(backbone.codebook.entries, ids)
        z_st = add(z_e, Tensor(z_q.data - z_e.data))
        recon = backbone.decoder(z_st)
        diff_r = recon - x
        diff_q = z_q - Tensor(z_e.data)
        diff_c = z_e - Tensor(z_q.data)
        loss = add(add(mean(diff_r * diff_r), mean(diff_q * diff_q)),
                   mul(mean(diff_c * diff_c), commitment))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if (step + 1) % 100 == 0 and step + 1 < steps:
            dead = np.nonzero(usage == 0)[0]
            if len(dead):
                pool = z_e.data[rng.choice(len(z_e.data), size=len(dead), replace=len(dead) > len(z_e.data))]
                backbone.codebook.entries.data[dead] = pool + rng.normal(0, 1e-3, pool.shape).astype(np.float32)
                key = id(backbone.codebook.entries)
                if key in opt.state.m:
                    opt.state.m[key][dead] = 0.0
                    opt.state.v[key][dead] = 0.0
            usage[:] = 0
    backbone.freeze()
    backbone.codebook.check()
    log.info("vq pretrain: final loss %.4f", losses[-1] if losses else float("nan"))
    return losses
