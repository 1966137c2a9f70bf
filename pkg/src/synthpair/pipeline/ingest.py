"""JSONL ingestion of caption/image pairs with validation and token sharding."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..capgen import tokenize
from ..errors import DataError
from ..serialize import read_token_shard, write_token_shard
from ..vlm.model import PairRecord
from ..vq import TokenGrid, VQBackbone

log = logging.getLogger(__name__)

SHARD_SIZE = 10_000
MAX_SKIP_FRACTION = 0.10


class SchemaError(ValueError):
    """A record violates the ingestion schema in a way that is never skippable."""


def load_image(path: str | Path) -> np.ndarray:
    """H x W x 3 float32 in [0, 1] from a PNG/JPEG (via Pillow) or ``.npy`` file."""
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
    else:
        from PIL import Image

        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{path}: expected an H x W x 3 image, got {img.shape}")
    return img


def save_image(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


@dataclass
class IngestResult:
    records: list[PairRecord]
    skipped: int
    total: int
    shards: list[Path] = field(default_factory=list)


class _ShardCache:
    def __init__(self, base: Path):
        self.base = base
        self.cache: dict[Path, tuple[np.ndarray, dict]] = {}

    def get(self, ref: dict) -> TokenGrid:
        path = Path(ref["path"])
        if not path.is_absolute():
            path = self.base / path
        if path not in self.cache:
            self.cache[path] = read_token_shard(path)
        grids, header = self.cache[path]
        side = int(round(np.sqrt(header["N"])))
        return TokenGrid(grids[int(ref["index"])].astype(np.int64), side)


def _parse(line: str, base: Path, shards: _ShardCache) -> PairRecord:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    has_img, has_ref = "image_path" in obj, "token_shard_ref" in obj
    if has_img and has_ref:
        raise SchemaError("image_path and token_shard_ref are mutually exclusive")
    if not (has_img or has_ref):
        raise ValueError("record has neither image_path nor token_shard_ref")
    caption = obj["caption"]
    if not isinstance(caption, str) or not caption.strip():
        raise ValueError("caption must be a non-empty string")
    origin = obj.get("origin", "real")
    ids = tokenize(caption)
    if has_img:
        path = Path(obj["image_path"])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise FileNotFoundError(path)
        return PairRecord(ids, image=load_image(path), modality="pixel", origin=origin)
    return PairRecord(ids, grid=shards.get(obj["token_shard_ref"]), modality="embedding", origin=origin)


def ingest(path: str | Path, shard_dir: str | Path | None = None, vq: VQBackbone | None = None,
           shard_size: int = SHARD_SIZE) -> IngestResult:
    """Read a JSONL file of ``{caption, image_path | token_shard_ref, origin}``.

    Bad lines are skipped and counted; more than 10% skipped is a hard failure.
    With ``shard_dir`` every record's grid is written to uint16 token shards
    (pixel records are encoded with ``vq``), plus a caption index per shard.
    """
    path = Path(path)
    base = path.parent
    shards = _ShardCache(base)
    records: list[PairRecord] = []
    skipped = total = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            total += 1
            try:
                records.append(_parse(line, base, shards))
            except SchemaError as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from None
            except (ValueError, KeyError, TypeError, OSError) as e:
                skipped += 1
                log.warning("%s:%d skipped: %s", path, lineno, e)
    if total == 0:
        raise DataError(f"{path} contains no records")
    if skipped > MAX_SKIP_FRACTION * total:
        raise DataError(f"{skipped} of {total} records skipped (limit {MAX_SKIP_FRACTION:.0%})")
    if skipped:
        log.info("ingest %s: %d records, %d skipped", path, len(records), skipped)
    result = IngestResult(records, skipped, total)
    if shard_dir is not None:
        result.shards = write_shards(records, shard_dir, vq, shard_size)
    return result


def write_shards(records: list[PairRecord], shard_dir: str | Path, vq: VQBackbone | None,
                 shard_size: int = SHARD_SIZE) -> list[Path]:
    shard_dir = Path(shard_dir)
    shard_dir.mkdir(parents=True, exist_ok=True)
    pixel = [i for i, r in enumerate(records) if r.modality == "pixel"]
    grids = [r.grid.ids if r.grid is not None else None for r in records]
    if pixel:
        if vq is None:
            raise ValueError("sharding pixel records needs a VQ backbone")
        for start in range(0, len(pixel), 256):
            chunk = pixel[start:start + 256]
            for i, row in zip(chunk, vq.encode_batch(np.stack([records[i].image for i in chunk]))):
                grids[i] = row
    k = vq.cfg.codebook_size if vq is not None else int(max(g.max() for g in grids)) + 1
    out = []
    for n, start in enumerate(range(0, len(records), shard_size)):
        stop = min(start + shard_size, len(records))
        shard = shard_dir / f"shard-{n:05d}.bin"
        write_token_shard(shard, np.stack(grids[start:stop]), k)
        with open(shard.with_suffix(".jsonl"), "w", encoding="utf-8") as f:
            for i in range(start, stop):
                r = records[i]
                f.write(json.dumps({"caption_ids": list(map(int, r.caption_ids)), "origin": r.origin,
                                    "token_shard_ref": {"path": shard.name, "index": i - start}}) + "\n")
        out.append(shard)
    return out


def read_shard_records(shard: str | Path) -> list[PairRecord]:
    """Embedding-modality records back from a shard and its caption index."""
    shard = Path(shard)
    grids, header = read_token_shard(shard)
    side = int(round(np.sqrt(header["N"])))
    out = []
    with open(shard.with_suffix(".jsonl"), encoding="utf-8") as f:
        for line in f:
            obj = json.loads(line)
            grid = TokenGrid(grids[obj["token_shard_ref"]["index"]].astype(np.int64), side)
            out.append(PairRecord(obj["caption_ids"], grid, modality="embedding", origin=obj["origin"]))
    return out
