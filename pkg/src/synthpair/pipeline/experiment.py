"""End-to-end experiments: component building, baseline vs augmented VLM arms,
metrics logging and the embedding/pixel throughput benchmark."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..capgen import ClassVocabulary, generate_captions
from ..numerics import AdamW, ConfigError
from ..t2igen import DecodeConfig, T2IConfig, T2IModel, train_t2i
from ..vlm.lm import FrozenLM, LMConfig, embed_caption_ids, pretrain_lm
from ..vlm.model import VLM, PairRecord, VLMConfig, evaluate, vlm_train_step
from ..vq import TokenGrid, VQBackbone, VQConfig, pretrain_backbone
from .corpus import corpus_slots, make_corpus, shape_classes
from .ingest import ingest
from .streams import mix_streams, shuffled_cycle, synth_pairs

log = logging.getLogger(__name__)

DEFAULT_MIX_RATIO = 10.1 / 11.1


class MeasurementError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    # data
    n_classes: int = 50
    n_real: int = 300
    n_heldout: int = 200
    n_synth: int = 1000
    real_path: str | None = None
    lm_corpus_size: int = 2000
    # frozen components
    lm_dim: int = 128
    lm_layers: int = 2
    lm_heads: int = 4
    lm_steps: int = 1500
    lm_lr: float = 2e-3
    vq_steps: int = 500
    # image generator; on the shapes corpus a small generator trained longer renders far more
    # faithful foregrounds, and strong guidance or choice noise erases them
    t2i_dim: int = 64
    t2i_layers: int = 2
    t2i_heads: int = 4
    t2i_steps: int = 3000
    t2i_batch: int = 16
    t2i_lr: float = 3e-3
    t2i_warmup: int = 100
    decode_steps: int = 24
    guidance_scale: float = 1.0
    choice_temperature: float = 0.0
    # vlm
    vlm_width: int = 64
    vlm_latents: int = 16
    vlm_layers: int = 2
    vlm_heads: int = 4
    vlm_steps: int = 1000
    vlm_batch: int = 16
    vlm_lr: float = 1e-3
    vlm_warmup: int = 100
    mix_ratio: float = DEFAULT_MIX_RATIO
    modality: str = "embedding"
    eval_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ConfigError(f"mix ratio {self.mix_ratio} outside [0, 1]")
        if self.modality not in ("embedding", "pixel"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.real_path is not None and not Path(self.real_path).exists():
            raise ConfigError(f"dataset {self.real_path} does not exist")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith(("_steps", "_batch", "_dim", "_layers", "_heads")) and isinstance(v, int) and v < 0:
                raise ConfigError(f"{f.name} must be non-negative")

    def hash(self, exclude: Sequence[str] = ()) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


@dataclass
class MetricsLog:
    name: str
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def log_step(self, step: int, loss: float, lr: float, duration: float, real_fraction: float) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError(f"step {step} does not follow {self.records[-1]['step']}")
        self.records.append({"step": step, "loss": loss, "lr": lr, "sps": 1.0 / max(duration, 1e-12),
                             "duration": duration, "real_fraction": real_fraction})

    def log_eval(self, step: int, loss: float, accuracy: float) -> None:
        self.evals.append({"step": step, "heldout_loss": loss, "token_accuracy": accuracy})

    @property
    def final(self) -> dict:
        return self.evals[-1]

    def steps_to_reach(self, loss: float) -> int | None:
        for e in self.evals:
            if e["heldout_loss"] <= loss:
                return e["step"]
        return None

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, ["step", "loss", "lr", "sps", "duration", "real_fraction"])
            w.writeheader()
            w.writerows(self.records)
        with open(path.with_name(path.stem + "_eval.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, ["step", "heldout_loss", "token_accuracy"])
            w.writeheader()
            w.writerows(self.evals)

    def curve_hash(self) -> str:
        rows = [(r["step"], r["loss"], r["lr"], r["real_fraction"]) for r in self.records]
        rows += [(e["step"], e["heldout_loss"], e["token_accuracy"]) for e in self.evals]
        return hashlib.sha256(json.dumps(rows).encode()).hexdigest()


# -- components ----------------------------------------------------------------

@dataclass
class Components:
    lm: FrozenLM
    vq: VQBackbone
    t2i: T2IModel | None
    train: list[PairRecord]
    heldout: list[PairRecord]
    synthetic: list[PairRecord]

    def manifest(self) -> dict:
        m = {"lm": self.lm.hash(), "vq": self.vq.hash()}
        if self.t2i is not None:
            m["t2i"] = self.t2i.hash()
        return m


def _cached(path: Path | None, load, build):
    if path is not None and path.exists():
        log.info("loading %s", path)
        return load(path)
    model = build()
    if path is not None:
        model.save(path)
    return model


def _real_records(cfg: ExperimentConfig, vq: VQBackbone, items) -> list[PairRecord]:
    grids = vq.encode_batch(np.stack([it.image for it in items])) if items else []
    return [PairRecord(list(it.caption.token_ids), TokenGrid(g, vq.cfg.side), it.image, cfg.modality)
            for it, g in zip(items, grids)]


def _pretrain_items(cfg: ExperimentConfig):
    return make_corpus(cfg.lm_corpus_size, seed=cfg.seed + 1000, n_classes=cfg.n_classes)


def build_lm(cfg: ExperimentConfig) -> FrozenLM:
    """Caption LM pretrained on a corpus disjoint from the experiment pairs, then frozen."""
    lm = FrozenLM(LMConfig(dim=cfg.lm_dim, n_layers=cfg.lm_layers, n_heads=cfg.lm_heads, seed=cfg.seed))
    pretrain_lm(lm, [it.caption.token_ids for it in _pretrain_items(cfg)], cfg.lm_steps, lr=cfg.lm_lr,
                seed=cfg.seed)
    return lm


def build_vq(cfg: ExperimentConfig) -> VQBackbone:
    vq = VQBackbone(VQConfig(seed=cfg.seed))
    images = np.stack([it.image for it in _pretrain_items(cfg)[:1000]])
    pretrain_backbone(vq, images, steps=cfg.vq_steps, seed=cfg.seed)
    return vq


def train_generator(cfg: ExperimentConfig, lm: FrozenLM, vq: VQBackbone,
                    records: Sequence[PairRecord]) -> T2IModel:
    """Masked token generator trained on ``records`` for ``cfg.t2i_steps``."""
    if not records:
        raise ConfigError("the generator needs at least one training pair")
    s = cfg.seed
    model = T2IModel(T2IConfig(codebook_size=vq.cfg.codebook_size, n_tokens=vq.cfg.n_tokens,
                               dim=cfg.t2i_dim, n_layers=cfg.t2i_layers, n_heads=cfg.t2i_heads,
                               mlp_hidden=4 * cfg.t2i_dim, text_dim=cfg.lm_dim, seed=s))
    emb = embed_caption_ids(lm, [r.caption_ids for r in records])
    grids = [r.grid if r.grid is not None else TokenGrid(vq.encode_batch(r.image[None])[0], vq.cfg.side)
             for r in records]
    pairs = [(emb[i], grids[i]) for i in range(len(records))]
    opt = AdamW(model.parameters(), lr=cfg.t2i_lr, warmup_steps=cfg.t2i_warmup)
    rng = np.random.default_rng(s + 7)
    train_t2i(model, (pairs[i] for i in _epochs(len(pairs), rng)), opt, cfg.t2i_steps,
              batch_size=cfg.t2i_batch, seed=s)
    return model.eval()


def build_components(cfg: ExperimentConfig, work_dir: str | Path | None = None,
                     with_synthetic: bool = True, lm: FrozenLM | None = None,
                     vq: VQBackbone | None = None) -> Components:
    """Corpus, frozen LM and VQ, generator and synthetic pool, all from ``cfg.seed``.

    Prebuilt ``lm``/``vq`` skip their pretraining; with ``work_dir`` every
    trained component is cached there and reused on the next run.
    """
    work = Path(work_dir) if work_dir else None
    if work:
        work.mkdir(parents=True, exist_ok=True)
    s = cfg.seed
    items = make_corpus(cfg.n_real + cfg.n_heldout, seed=s, n_classes=cfg.n_classes)
    train_items, held_items = items[:cfg.n_real], items[cfg.n_real:]
    lm = lm or _cached(work and work / "lm.bin", FrozenLM.load, lambda: build_lm(cfg))
    vq = vq or _cached(work and work / "vq.bin", VQBackbone.load, lambda: build_vq(cfg))

    if cfg.real_path:
        train = ingest(cfg.real_path).records
        held = _real_records(cfg, vq, held_items)
    else:
        train = _real_records(cfg, vq, train_items)
        held = _real_records(cfg, vq, held_items)
    for r in held:
        r.modality = "embedding"

    t2i = None
    synthetic: list[PairRecord] = []
    if with_synthetic and cfg.n_synth > 0:
        t2i = _cached(work and work / "t2i.bin", T2IModel.load, lambda: train_generator(cfg, lm, vq, train))
        captions = generate_captions(ClassVocabulary(shape_classes(cfg.n_classes)), cfg.n_synth, seed=s + 2000,
                                     slots=corpus_slots())
        decode = DecodeConfig(cfg.decode_steps, cfg.guidance_scale, cfg.choice_temperature)
        synthetic = list(synth_pairs(captions, lm, t2i, cfg.n_synth, seed=s + 3000, decode=decode))
    return Components(lm, vq, t2i, train, held, synthetic)


def _epochs(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


# -- arms ------------------------------------------------------------------------

def make_vlm(cfg: ExperimentConfig, comp: Components) -> VLM:
    vcfg = VLMConfig(n_latents=cfg.vlm_latents, resampler_layers=cfg.vlm_layers, n_heads=cfg.vlm_heads,
                     width=cfg.vlm_width, xattn_heads=cfg.lm_heads, seed=cfg.seed)
    return VLM(comp.lm, comp.vq, vcfg)


def train_arm(cfg: ExperimentConfig, comp: Components, name: str) -> tuple[MetricsLog, VLM]:
    """Train one VLM; only ``mix_ratio`` differs between arms."""
    s = cfg.seed
    vlm = make_vlm(cfg, comp)
    opt = AdamW(vlm.parameters(), lr=cfg.vlm_lr, warmup_steps=cfg.vlm_warmup)
    real = shuffled_cycle(comp.train, np.random.default_rng(s + 1)) if comp.train else None
    synth = shuffled_cycle(comp.synthetic, np.random.default_rng(s + 2)) if comp.synthetic else None
    batches = mix_streams(real, synth, cfg.mix_ratio, np.random.default_rng(s + 3), cfg.vlm_batch)
    metrics = MetricsLog(name, manifest={"config": cfg.hash(), **comp.manifest()})
    for step in range(1, cfg.vlm_steps + 1):
        batch = next(batches)
        t0 = time.perf_counter()
        loss = vlm_train_step(vlm, batch, opt)
        metrics.log_step(step, loss, opt.last_lr, time.perf_counter() - t0,
                         sum(r.origin == "real" for r in batch) / len(batch))
        if step % cfg.eval_every == 0 or step == cfg.vlm_steps:
            ev = evaluate(vlm, comp.heldout)
            metrics.log_eval(step, ev.loss, ev.accuracy)
            log.info("%s step %d: train %.4f held-out %.4f acc %.3f", name, step, loss, ev.loss, ev.accuracy)
    manifest = vlm.manifest()
    metrics.manifest.update({"resampler": manifest["resampler"], "xattn": manifest["xattn"]})
    return metrics, vlm


@dataclass
class ExperimentResult:
    baseline: MetricsLog
    augmented: MetricsLog
    components: Components

    def summary(self) -> dict:
        b, a = self.baseline.final, self.augmented.final
        return {
            "baseline": b,
            "augmented": a,
            "augmented_steps_to_baseline_loss": self.augmented.steps_to_reach(b["heldout_loss"]),
            "baseline_steps": self.baseline.records[-1]["step"] if self.baseline.records else 0,
        }


def run_experiment(cfg: ExperimentConfig, work_dir: str | Path | None = None,
                   components: Components | None = None,
                   baseline_cfg: ExperimentConfig | None = None) -> ExperimentResult:
    """Real-only baseline vs real+synthetic arm with every other setting shared."""
    baseline_cfg = baseline_cfg or replace(cfg, mix_ratio=1.0)
    if baseline_cfg.hash(exclude=("mix_ratio",)) != cfg.hash(exclude=("mix_ratio",)):
        raise ConfigError("arm configurations differ beyond the mix ratio")
    comp = components or build_components(cfg, work_dir)
    baseline, _ = train_arm(baseline_cfg, comp, "baseline")
    augmented, _ = train_arm(cfg, comp, "augmented")
    if work_dir:
        work = Path(work_dir)
        baseline.to_csv(work / "baseline.csv")
        augmented.to_csv(work / "augmented.csv")
        result = ExperimentResult(baseline, augmented, comp)
        (work / "manifest.json").write_text(json.dumps(
            {"config": asdict(cfg), "baseline": baseline.manifest, "augmented": augmented.manifest,
             "curves": {"baseline": baseline.curve_hash(), "augmented": augmented.curve_hash()},
             "summary": result.summary()}, indent=2))
        return result
    return ExperimentResult(baseline, augmented, comp)


# -- throughput ----------------------------------------------------------------

def _timed_steps(vlm: VLM, batches: list[list[PairRecord]], opt) -> list[float]:
    out = []
    for batch in batches:
        t0 = time.perf_counter()
        vlm_train_step(vlm, batch, opt)
        out.append(time.perf_counter() - t0)
    return out


def _modal_batches(images: np.ndarray, captions: list[list[int]], vq: VQBackbone, modality: str,
                   steps: int, batch_size: int, seed: int) -> list[list[PairRecord]]:
    rng = np.random.default_rng(seed)
    grids = vq.encode_batch(images) if modality == "embedding" else None
    out = []
    for _ in range(steps):
        idx = rng.choice(len(images), batch_size, replace=False)
        if modality == "embedding":
            out.append([PairRecord(captions[i], TokenGrid(grids[i], vq.cfg.side), modality="embedding") for i in idx])
        else:
            out.append([PairRecord(captions[i], image=images[i], modality="pixel") for i in idx])
    return out


def benchmark_throughput(cfg: ExperimentConfig, comp: Components, modality: str, steps: int = 200,
                         warmup: int = 10, interleave_with: str | None = None) -> dict[str, float]:
    """Median training steps/sec over ``steps`` timed steps per modality.

    Batch content is identical across modalities; the pixel path additionally
    runs the frozen encoder. With ``interleave_with`` both modalities are timed
    in alternating steps so slow drifts in machine load hit both equally.
    """
    if steps < 200:
        raise MeasurementError("throughput needs at least 200 timed steps")
    modalities = [modality] + ([interleave_with] if interleave_with else [])
    images = np.stack([r.image for r in comp.train if r.image is not None])
    captions = [r.caption_ids for r in comp.train if r.image is not None]
    if len(images) < cfg.vlm_batch:
        raise MeasurementError("not enough pixel records to build batches")
    runs = {}
    for m in modalities:
        vlm = make_vlm(cfg, comp)
        opt = AdamW(vlm.parameters(), lr=cfg.vlm_lr, warmup_steps=cfg.vlm_warmup)
        batches = _modal_batches(images, captions, comp.vq, m, steps + warmup, cfg.vlm_batch, cfg.seed)
        _timed_steps(vlm, batches[:warmup], opt)
        runs[m] = (vlm, opt, batches[warmup:])
    times: dict[str, list[float]] = {m: [] for m in modalities}
    for i in range(steps):
        for m in modalities:
            vlm, opt, batches = runs[m]
            times[m] += _timed_steps(vlm, [batches[i]], opt)
    return {m: float(1.0 / np.median(t)) for m, t in times.items()}
