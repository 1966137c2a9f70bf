"""Record streams: on-the-fly synthetic pairs, real/synthetic mixing and a
bounded prefetch queue between producers and the trainer."""
from __future__ import annotations

import queue
import threading
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..capgen import CaptionRecord
from ..numerics import ConfigError
from ..t2igen import DecodeConfig, T2IModel, decode_batch
from ..vlm.lm import FrozenLM, embed_caption_ids
from ..vlm.model import PairRecord
from ..vq import TokenGrid

QUEUE_CAPACITY = 4


def _caption_ids(c) -> list[int]:
    return list(c.token_ids) if isinstance(c, CaptionRecord) else list(c)


def synth_pairs(captions: Iterable, lm: FrozenLM, t2i: T2IModel | str, n: int, seed: int,
                decode: DecodeConfig | None = None, batch_size: int = 32) -> Iterator[PairRecord]:
    """Pair ``n`` captions with generated token grids, never touching pixels.

    ``captions`` yields CaptionRecords or token id lists; ``t2i`` may be a
    model or a checkpoint path. Output depends only on the inputs and ``seed``.
    """
    if n <= 0:
        return
    model = T2IModel.load(t2i) if isinstance(t2i, str) else t2i
    model.eval()
    decode = decode or DecodeConfig()
    rng = np.random.default_rng(seed)
    side = int(round(np.sqrt(model.cfg.n_tokens)))
    source = iter(captions)
    emitted = 0
    while emitted < n:
        chunk = []
        for c in source:
            chunk.append(_caption_ids(c))
            if len(chunk) == min(batch_size, n - emitted):
                break
        if not chunk:
            return
        ids = decode_batch(model, embed_caption_ids(lm, chunk), decode, rng)
        for cap, grid in zip(chunk, ids):
            yield PairRecord(cap, TokenGrid(grid, side), modality="embedding", origin="synthetic")
        emitted += len(chunk)


def shuffled_cycle(records: Sequence[PairRecord], rng: np.random.Generator) -> Iterator[PairRecord]:
    """Endless reshuffled epochs over ``records``."""
    if not records:
        return
    while True:
        for i in rng.permutation(len(records)):
            yield records[i]


def mix_streams(real: Iterator[PairRecord] | None, synth: Iterator[PairRecord] | None, ratio: float,
                rng: np.random.Generator, batch_size: int) -> Iterator[list[PairRecord]]:
    """Batches whose every slot is real with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mix ratio {ratio} outside [0, 1]")
    if batch_size <= 0:
        raise ConfigError("batch size must be positive")
    if ratio > 0 and real is None:
        raise ConfigError("a positive real ratio needs a real stream")
    if ratio < 1 and synth is None:
        raise ConfigError("a real ratio below 1 needs a synthetic stream")
    while True:
        picks = rng.random(batch_size) < ratio
        try:
            yield [next(real) if p else next(synth) for p in picks]
        except StopIteration:
            return


_DONE = object()


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


def prefetch(source: Iterable, capacity: int = QUEUE_CAPACITY) -> Iterator:
    """Run ``source`` on a producer thread behind a bounded queue.

    The producer blocks when ``capacity`` items are waiting; producer
    exceptions are re-raised in the consumer.
    """
    q: queue.Queue = queue.Queue(maxsize=capacity)
    stop = threading.Event()

    def produce():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as e:  # handed to the consumer
            q.put(_Failure(e))

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, _Failure):
                raise item.exc
            yield item
    finally:
        stop.set()
