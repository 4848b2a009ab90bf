"""Command-line entry point: ``textovsr {degrade,caption,train,infer,eval,ablate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml

from .exceptions import TextOVSRError

logger = logging.getLogger("textovsr")


def _load_train_config(args):
    from .train import TrainConfig

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_degrade(args):
    from .degrade import DegradationConfig
    from .pipeline import degrade_root

    cfg = DegradationConfig.from_file(args.config) if args.config else DegradationConfig.default()
    records = degrade_root(args.root, args.seed or 0, cfg, cfg.data.get("downscale", 4), overwrite=args.overwrite)
    for cid, rec in records.items():
        print(f"{cid}: {rec.text}")


def cmd_caption(args):
    from .pipeline import caption_root
    from .prompts import HashTextEncoder, make_caption_provider

    kwargs = {"granularity": args.granularity} if args.caption_provider == "template" else {}
    if args.caption_url:
        kwargs["url"] = args.caption_url
    provider = make_caption_provider(args.caption_provider, **kwargs)
    packs = caption_root(args.root, provider, HashTextEncoder(args.d_text, seed=args.seed or 0), args.batch)
    print(f"captioned {len(packs)} clips")


def cmd_train(args):
    from .train import PairedClipDataset, build_ablation, run_stage1, run_stage2

    cfg = _load_train_config(args)
    if args.iterations is not None:
        if args.stage == 1:
            cfg.iterations = args.iterations
        else:
            cfg.stage2_iterations = args.iterations
    if args.variant:
        cfg = build_ablation(cfg, args.variant)
    torch.manual_seed(cfg.seed)
    dataset = PairedClipDataset.from_root(args.root)
    out = Path(args.out)
    if args.stage == 1:
        state = run_stage1(cfg, dataset, out_dir=out, resume=args.resume)
    else:
        state = run_stage2(cfg, dataset, args.resume or args.stage1_ckpt, out_dir=out)
    last = state.log[-1] if state.log else {}
    print(json.dumps({"stage": state.stage, "iteration": state.iteration, "checkpoint": state.checkpoint_id,
                      "last": last}))


def cmd_infer(args):
    from .io import read_clip_dir, write_clip_dir
    from .prompts import HashTextEncoder, PromptPack, build_prompt_pack, make_caption_provider
    from .train import load_generator

    gen, cfg, _ = load_generator(args.ckpt)
    root = Path(args.input)
    dirs = sorted(p for p in (root / "clips").glob("*") if p.is_dir()) if (root / "clips").is_dir() else [root]
    provider = make_caption_provider(args.caption_provider)
    encoder = HashTextEncoder(cfg.generator.d_text, seed=cfg.seed)
    for d in dirs:
        lr_dir = d / "lr" if (d / "lr").is_dir() else d
        lr = read_clip_dir(lr_dir, d.name)
        if (d / "prompts.json").exists():
            emb = PromptPack.load(d).content_embeddings
        else:
            emb = build_prompt_pack(lr, None, provider, encoder).content_embeddings
        sr = gen.infer(torch.from_numpy(lr.frames), emb, chunk_size=args.chunk_size, clip_ids=[d.name])
        write_clip_dir(Path(args.out) / d.name, lr.with_frames(sr.numpy()))
        print(f"{d.name}: {tuple(sr.shape)}")


def cmd_eval(args):
    from .evaltool import evaluate

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = evaluate(args.ckpt, args.root, metrics, out=args.out, workers=args.workers, chunk_size=args.chunk_size)
    print(json.dumps(report.per_video, sort_keys=True))


def cmd_ablate(args):
    from .generator import TextOVSRGenerator
    from .train import PairedClipDataset, build_ablation, run_stage1

    cfg = build_ablation(_load_train_config(args), args.variant)
    gen = TextOVSRGenerator(cfg.generator)
    n_params = sum(p.numel() for p in gen.parameters())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.variant}.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    print(f"{args.variant}: generator parameters={n_params} discriminator={cfg.discriminator.kind}")
    if args.root:
        state = run_stage1(cfg, PairedClipDataset.from_root(args.root), out_dir=out / args.variant)
        print(json.dumps(state.log[-1] if state.log else {}))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--resume", help="checkpoint to resume from")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="textovsr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("degrade", parents=[common], help="synthesize LR clips and degradation records")
    s.add_argument("--root", required=True)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("caption", parents=[common], help="caption HR frames and write prompt sidecars")
    s.add_argument("--root", required=True)
    s.add_argument("--caption-provider", choices=("template", "http"), default="template")
    s.add_argument("--caption-url", default=None)
    s.add_argument("--granularity", choices=("coarse", "fine"), default="fine")
    s.add_argument("--d-text", type=int, default=64)
    s.add_argument("--batch", type=int, default=7)
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("train", parents=[common], help="run training stage 1 or 2")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stage1-ckpt", default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--variant", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="super-resolve LR clips")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True, help="dataset root or a directory of LR frames")
    s.add_argument("--out", required=True)
    s.add_argument("--chunk-size", type=int, default=None)
    s.add_argument("--caption-provider", choices=("template", "http"), default="template")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="compute metrics and write a report")
    s.add_argument("--ckpt", required=True, help="checkpoint path or 'bicubic'")
    s.add_argument("--root", required=True)
    s.add_argument("--metrics", default="psnr,ssim,nr")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--chunk-size", type=int, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="resolve (and optionally train) an ablation variant")
    s.add_argument("--variant", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--root", default=None, help="train stage 1 on this dataset when given")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (TextOVSRError, FileNotFoundError) as e:
        print(f"textovsr {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
