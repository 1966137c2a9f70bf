"""Procedurally rendered shapes corpus with aligned template captions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..capgen import CaptionRecord, ClassVocabulary, TemplateSlots, generate_caption_template

BASE_SHAPES = ("disc", "box", "kite", "wedge", "plus", "cross", "ring", "bar", "post", "frame")
STYLES = ("big", "small", "tall", "wide", "striped")

COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1), "cyan": (0.1, 0.85, 0.9), "pink": (0.95, 0.45, 0.75),
    "white": (0.95, 0.95, 0.95), "orange": (0.95, 0.55, 0.05),
}
POSITIONS = {
    "at top left": (0.25, 0.25), "at top right": (0.25, 0.75), "at lower left": (0.75, 0.25),
    "at lower right": (0.75, 0.75), "in the middle": (0.5, 0.5),
}
BACKGROUND = 0.08


def shape_classes(n: int = 50) -> list[str]:
    names = [f"{style} {shape}" for shape in BASE_SHAPES for style in STYLES]
    if not 1 <= n <= len(names):
        raise ValueError(f"between 1 and {len(names)} shape classes are available")
    # interleave so any prefix covers many base shapes
    order = sorted(range(len(names)), key=lambda i: (i % len(STYLES), i // len(STYLES)))
    return [names[i] for i in order[:n]]


def corpus_slots() -> TemplateSlots:
    return TemplateSlots(spatial=tuple(POSITIONS), colors=tuple(f"in {c}" for c in COLORS), counts=("",))


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    r = np.sqrt(u * u + v * v)
    if shape == "disc":
        return r <= 1.0
    if shape == "box":
        return np.maximum(au, av) <= 0.85
    if shape == "kite":
        return au + av <= 1.0
    if shape == "wedge":
        return (v <= 0.85) & (au <= (v + 0.95) * 0.55)
    if shape == "plus":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if shape == "cross":
        return ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4)) & (np.maximum(au, av) <= 1.0)
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if shape == "bar":
        return (av <= 0.35) & (au <= 1.0)
    if shape == "post":
        return (au <= 0.35) & (av <= 1.0)
    if shape == "frame":
        m = np.maximum(au, av)
        return (m <= 0.95) & (m >= 0.55)
    raise ValueError(f"unknown shape {shape!r}")


def render(class_name: str, color: str, position: str, size: int = 32) -> np.ndarray:
    """H x W x 3 image in [0, 1] for one caption's slots."""
    style, shape = class_name.split(" ", 1)
    cy, cx = POSITIONS[position]
    radius = size * (0.13 if style == "small" else 0.22)
    sy = sx = radius
    if style == "tall":
        sx *= 0.6
    elif style == "wide":
        sy *= 0.6
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    v = (yy - cy * size) / sy
    u = (xx - cx * size) / sx
    mask = _shape_mask(shape, u, v)
    if style == "striped":
        mask &= (np.floor(yy / 2) % 2) == 0
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    img[mask] = COLORS[color]
    return img


@dataclass
class CorpusItem:
    caption: CaptionRecord
    image: np.ndarray


def make_corpus(n: int, seed: int, n_classes: int = 50, image_size: int = 32,
                vocabulary: ClassVocabulary | None = None) -> list[CorpusItem]:
    """``n`` (caption, image) pairs; classes drawn from ``vocabulary`` (uniform by default)."""
    vocab = vocabulary or ClassVocabulary(shape_classes(n_classes))
    slots = corpus_slots()
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        cls = vocab.sample(rng)
        rec = generate_caption_template(cls, rng, vocab, slots)
        rec.source = "human"
        rec.seed = seed
        color = rec.slots["color"].removeprefix("in ")
        items.append(CorpusItem(rec, render(cls, color, rec.slots["spatial"], image_size)))
    return items
