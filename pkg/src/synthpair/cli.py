"""Command line entry points.

Every subcommand accepts ``--config FILE.json`` (an experiment config),
``--seed`` (overrides the config seed) and ``--work DIR``, where the frozen
LM and VQ backbone are cached and reused between commands.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .capgen import ClassVocabulary, LLMClient, detokenize, generate_captions, read_jsonl, write_jsonl
from .diversity import co_cluster, embed_captions
from .pipeline.corpus import make_corpus
from .pipeline.experiment import (ExperimentConfig, _cached, benchmark_throughput, build_components, build_lm,
                                  build_vq, run_experiment, train_arm, train_generator)
from .pipeline.ingest import load_image, read_shard_records, save_image
from .serialize import read_token_shard, write_token_shard
from .t2igen import DecodeConfig, T2IModel, decode_batch
from .vlm.lm import FrozenLM, embed_caption_ids
from .vlm.model import VLM, generate_caption
from .vq import TokenGrid, VQBackbone

log = logging.getLogger("synthpair")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--work", type=Path, default=Path("synthpair_work"),
                   help="cache directory for the frozen LM and VQ backbone")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    return replace(cfg, seed=args.seed) if args.seed is not None else cfg


def _frozen_lm(cfg: ExperimentConfig, work: Path) -> FrozenLM:
    work.mkdir(parents=True, exist_ok=True)
    return _cached(work / "lm.bin", FrozenLM.load, lambda: build_lm(cfg))


def _frozen_vq(cfg: ExperimentConfig, work: Path) -> VQBackbone:
    work.mkdir(parents=True, exist_ok=True)
    return _cached(work / "vq.bin", VQBackbone.load, lambda: build_vq(cfg))


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


# -- subcommands -----------------------------------------------------------------

def cmd_make_corpus(args) -> None:
    cfg = _config(args)
    out = args.out
    (out / "images").mkdir(parents=True, exist_ok=True)
    items = make_corpus(args.n, seed=cfg.seed, n_classes=cfg.n_classes)
    with open(out / "pairs.jsonl", "w", encoding="utf-8") as f:
        for i, it in enumerate(items):
            rel = Path("images") / f"{i:06d}.png"
            save_image(out / rel, it.image)
            f.write(json.dumps({"caption": it.caption.text, "image_path": str(rel), "origin": "real"}) + "\n")
    print(f"wrote {len(items)} pairs to {out / 'pairs.jsonl'}")


def cmd_capgen(args) -> None:
    cfg = _config(args)
    vocab = ClassVocabulary.from_file(args.classes) if args.classes else ClassVocabulary.default()
    client = LLMClient() if args.source == "llm" else None
    recs = generate_captions(vocab, args.n, seed=cfg.seed, source=args.source, client=client)
    n = write_jsonl(args.out, recs)
    print(f"wrote {n} captions to {args.out}")


def cmd_vq_pretrain(args) -> None:
    cfg = _config(args)
    args.work.mkdir(parents=True, exist_ok=True)
    vq = build_vq(cfg)
    digest = vq.save(args.work / "vq.bin")
    print(f"saved {args.work / 'vq.bin'} ({digest})")


def cmd_t2i_train(args) -> None:
    cfg = _config(args)
    if args.steps is not None:
        cfg = replace(cfg, t2i_steps=args.steps)
    shards = sorted(Path(args.data).glob("shard-*.bin"))
    if not shards:
        raise SystemExit(f"no token shards in {args.data}")
    records = [r for s in shards for r in read_shard_records(s)]
    lm, vq = _frozen_lm(cfg, args.work), _frozen_vq(cfg, args.work)
    model = train_generator(cfg, lm, vq, records)
    args.ckpt.mkdir(parents=True, exist_ok=True)
    digest = model.save(args.ckpt / "t2i.bin", {"lm": lm.hash()})
    print(f"saved {args.ckpt / 't2i.bin'} ({digest})")


def _t2i_path(ckpt: Path) -> Path:
    return ckpt / "t2i.bin" if ckpt.is_dir() else ckpt


def cmd_t2i_sample(args) -> None:
    cfg = _config(args)
    model = T2IModel.load(_t2i_path(args.ckpt))
    lm = _frozen_lm(cfg, args.work)
    captions = [r.token_ids for r in read_jsonl(args.captions)]
    decode = DecodeConfig(cfg.decode_steps, cfg.guidance_scale, cfg.choice_temperature)
    rng = np.random.default_rng(cfg.seed)
    grids = np.concatenate([decode_batch(model, embed_caption_ids(lm, captions[i:i + 32]), decode, rng)
                            for i in range(0, len(captions), 32)])
    write_token_shard(args.out, grids, model.cfg.codebook_size)
    print(f"wrote {len(grids)} token grids to {args.out}")
    if args.decode_pixels:
        vq = _frozen_vq(cfg, args.work)
        img_dir = args.out.with_suffix("")
        img_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(vq.decode_batch(grids)):
            save_image(img_dir / f"{i:06d}.png", img)
        print(f"decoded images to {img_dir}")


def cmd_vlm_train(args) -> None:
    cfg = _config(args)
    comp = build_components(cfg, args.work, with_synthetic=cfg.mix_ratio < 1.0)
    metrics, vlm = train_arm(cfg, comp, "vlm")
    out = args.ckpt or args.work
    out.mkdir(parents=True, exist_ok=True)
    vlm.save(out / "vlm.bin")
    if out != args.work:
        comp.lm.save(out / "lm.bin")
        comp.vq.save(out / "vq.bin")
    metrics.to_csv(out / "vlm_metrics.csv")
    _print_json({"checkpoint": str(out / "vlm.bin"), **metrics.final})


def _load_vlm(ckpt: Path) -> VLM:
    d = ckpt if ckpt.is_dir() else ckpt.parent
    path = ckpt / "vlm.bin" if ckpt.is_dir() else ckpt
    return VLM.load(path, FrozenLM.load(d / "lm.bin"), VQBackbone.load(d / "vq.bin"))


def cmd_vlm_caption(args) -> None:
    vlm = _load_vlm(args.ckpt)
    if args.image:
        inputs = [load_image(args.image)]
    else:
        grids, header = read_token_shard(args.tokens)
        side = int(round(np.sqrt(header["N"])))
        inputs = [TokenGrid(g.astype(np.int64), side) for g in grids]
    for x in inputs:
        print(detokenize(generate_caption(vlm, x)))


def cmd_diversity(args) -> None:
    cfg = _config(args)
    lm = _frozen_lm(cfg, args.work)
    corpora = [embed_captions([r.text for r in read_jsonl(p)], lm) for p in args.captions]
    k = "auto" if args.k == "auto" else int(args.k)
    report = co_cluster(corpora, k=k, seed=cfg.seed, k_max=args.k_max, names=[str(p) for p in args.captions],
                        n_init=args.n_init)
    out = report.to_json()
    if args.out:
        args.out.write_text(json.dumps(out, indent=2))
    if args.hist:
        with open(args.hist, "w") as f:
            f.write(",".join(["cluster"] + report.names) + "\n")
            for j, row in enumerate(zip(*report.normalized())):
                f.write(",".join([str(j)] + [f"{v:.6f}" for v in row]) + "\n")
    _print_json({"k": report.joint.k, "corpora": [{key: c[key] for key in ("name", "concentration_top5",
                                                                            "entropy_bits")}
                                                   for c in out["corpora"]]})


def cmd_benchmark(args) -> None:
    cfg = _config(args)
    comp = build_components(cfg, args.work, with_synthetic=False)
    _print_json(benchmark_throughput(cfg, comp, "embedding", steps=args.steps, interleave_with="pixel"))


def cmd_experiment(args) -> None:
    cfg = _config(args)
    out = args.out or args.work
    res = run_experiment(cfg, work_dir=out)
    _print_json(res.summary())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthpair", description="Synthetic image-caption pairs for VLM training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="render a shapes corpus to PNG + JSONL")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("capgen", help="generate class-conditioned captions")
    p.add_argument("--classes", type=Path, help="one class name per line (default: bundled list)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--source", choices=["template", "llm"], default="template")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_capgen)

    p = sub.add_parser("vq-pretrain", help="train the VQ backbone into the work directory")
    p.set_defaults(func=cmd_vq_pretrain)

    p = sub.add_parser("t2i-train", help="train the token generator on token shards")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--ckpt", type=Path, required=True)
    p.set_defaults(func=cmd_t2i_train)

    p = sub.add_parser("t2i-sample", help="generate token grids for captions")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--captions", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--decode-pixels", action="store_true")
    p.set_defaults(func=cmd_t2i_sample)

    p = sub.add_parser("vlm-train", help="train a VLM adapter")
    p.add_argument("--ckpt", type=Path, help="output directory (default: the work directory)")
    p.set_defaults(func=cmd_vlm_train)

    p = sub.add_parser("vlm-caption", help="caption an image or token grids")
    p.add_argument("--ckpt", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--tokens", type=Path)
    p.set_defaults(func=cmd_vlm_caption)

    p = sub.add_parser("diversity", help="co-cluster caption corpora")
    p.add_argument("--captions", type=Path, nargs="+", required=True)
    p.add_argument("--k", default="auto")
    p.add_argument("--k-max", type=int, default=30)
    p.add_argument("--n-init", type=int, default=5)
    p.add_argument("--out", type=Path)
    p.add_argument("--hist", type=Path)
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("benchmark", help="embedding vs pixel training throughput")
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("experiment", help="baseline vs synthetic-augmented VLM")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_experiment)

    for sp in sub.choices.values():
        _common(sp)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.func(args)
    return 0


def _alias(command: str):
    def run(argv: list[str] | None = None) -> int:
        return main([command, *(sys.argv[1:] if argv is None else argv)])
    run.__name__ = command.replace("-", "_") + "_main"
    return run


capgen_main = _alias("capgen")
t2i_train_main = _alias("t2i-train")
t2i_sample_main = _alias("t2i-sample")
vlm_train_main = _alias("vlm-train")
vlm_caption_main = _alias("vlm-caption")
diversity_main = _alias("diversity")

if __name__ == "__main__":
    sys.exit(main())
