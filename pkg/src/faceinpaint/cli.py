"""Command-line entry point: ``faceinpaint {gen-data,train,edit,eval}``."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import FaceInpaintError

log = logging.getLogger("faceinpaint")


def _gen_data(args) -> int:
    from .dataset import EchoCaptioner, EchoParser, HTTPCaptioner, build_corpus
    captioner = HTTPCaptioner(args.captioner_url) if args.captioner_url else EchoCaptioner()
    m = build_corpus(args.n, args.seed, args.out, captioner, EchoParser(), mask_aug=args.mask_aug,
                     size=args.size)
    print(f"{len(m.triples)} triples, {len(m.rejects)} rejects, manifest {m.path} sha256 {m.digest()}")
    if m.rejects:
        for r in m.rejects[:10]:
            print(f"  reject: {r}", file=sys.stderr)
        return 1
    return 0


def _train(args) -> int:
    from .config import load_config
    from .pipeline import train_from_config
    cfg = load_config(args.config)
    if args.steps:
        cfg.train.steps = args.steps
    if args.corpus:
        cfg.data.corpus = args.corpus
    res = train_from_config(cfg, out=args.out)
    out = args.out or cfg.train.out
    print(f"trained {res.stopped_at} steps in {res.seconds:.0f}s; checkpoint {out}")
    return 0


def _load_image(path: str) -> np.ndarray:
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def _edit(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .config import load_config
    from .dataset import read_mask_png
    from .pipeline import EditRequest, Variant, checkpoint_schedule, edit
    model, meta = load_checkpoint(args.ckpt)
    cfg = load_config(args.config)
    pick = lambda v, d: d if v is None else v
    req = EditRequest(image=_load_image(args.image), mask=read_mask_png(args.mask), caption=args.prompt,
                      guidance_scale=pick(args.scale, cfg.sample.guidance_scale),
                      lam=pick(args.lam, cfg.guidance.lam), steps=pick(args.steps, cfg.sample.steps),
                      seed=pick(args.seed, cfg.sample.seed),
                      stfg_enabled=cfg.guidance.enabled and not args.no_stfg)
    out = edit(req, model, checkpoint_schedule(meta), Variant.from_section(cfg.guidance))
    img = np.clip(np.round((out.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(args.out)
    print(f"wrote {args.out}")
    return 0


def _eval(args) -> int:
    from .evaluate import run_suite
    failed = run_suite(args.suite, args.ckpt, out_dir=args.out, n=args.n,
                       seed=args.seed, workers=args.workers)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faceinpaint", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="build a synthetic caption/mask corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--mask-aug", choices=["hull", "dilate", "bezier", "mixed"], default="mixed")
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--captioner-url", help="HTTP captioner endpoint (default: echo ground truth)")
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", help="YAML run config (defaults if omitted)")
    t.add_argument("--corpus", help="override data.corpus")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--out", help="override train.out")
    t.set_defaults(func=_train)

    e = sub.add_parser("edit", help="inpaint one image")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--prompt", required=True)
    e.add_argument("--config", help="YAML run config for the sample and guidance sections")
    e.add_argument("--lambda", dest="lam", type=float, help="guidance strength (default 1.0)")
    e.add_argument("--steps", type=int, help="DDIM steps (default 50)")
    e.add_argument("--scale", type=float, help="classifier-free guidance scale (default 7.5)")
    e.add_argument("--seed", type=int)
    e.add_argument("--no-stfg", action="store_true")
    e.add_argument("--out", default="edited.png")
    e.set_defaults(func=_edit)

    v = sub.add_parser("eval", help="run an evaluation suite and append to the report")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--suite", choices=["cad", "preserve", "probe", "ablation", "all"], required=True)
    v.add_argument("--out", default="eval_out")
    v.add_argument("--n", type=int, help="number of edits (suite default if omitted)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--workers", type=int, default=1)
    v.set_defaults(func=_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FaceInpaintError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
