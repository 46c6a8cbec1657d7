"""Command line: refvid {synth,align-pretrain,train,sample,eval}.

Exit codes: 0 success, 2 config or input error, 3 numeric divergence,
4 integrity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from . import commands
from .config import load_config
from .errors import RefvidError

log = logging.getLogger("refvid")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="seed override for the command's random stream")
    common.add_argument("--precision", choices=["f32", "f64"], default=None)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="refvid", description="Reference-conditioned video diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="render and curate a synthetic clip dataset")

    s = sub.add_parser("align-pretrain", parents=[common], help="pretrain the aligner against the teacher encoder")
    s.add_argument("--data", required=True)

    s = sub.add_parser("train", parents=[common], help="jointly train aligner and backbone")
    s.add_argument("--data", required=True)
    s.add_argument("--aligner-ckpt")
    s.add_argument("--resume")
    s.add_argument("--steps", type=int)
    s.add_argument("--aligner-init", choices=["pretrained", "random"])
    s.add_argument("--visual-feats", choices=["vae", "mllm-vision"])
    s.add_argument("--text-encoder", choices=["unified", "teacher-only"])

    s = sub.add_parser("sample", parents=[common], help="generate frames for one manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--guidance", type=float)

    s = sub.add_parser("eval", parents=[common], help="sample and score an eval set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--guidance", type=float)
    s.add_argument("--n-clips", type=int)
    s.add_argument("--baseline", help="report.json of a run to compare against")
    s.add_argument("--name", default="")
    return p


def _run(args) -> dict:
    cfg = load_config(args.config)
    if args.precision:
        cfg = cfg.with_overrides(train={"precision": args.precision})
    ad.set_precision(cfg.train.precision)
    out = Path(args.out)
    if args.command == "synth":
        if args.seed is not None:
            cfg = cfg.with_overrides(data={"seed": args.seed})
        return commands.cmd_synth(cfg, out)
    if args.command == "align-pretrain":
        if args.seed is not None:
            cfg = cfg.with_overrides(pretrain={"seed": args.seed})
        return commands.cmd_align_pretrain(cfg, args.data, out)
    if args.command == "train":
        model, train = {}, {}
        if args.visual_feats:
            model["visual_feats"] = args.visual_feats
        if args.text_encoder:
            model["text_encoder"] = args.text_encoder
        if args.aligner_init:
            train["aligner_init"] = args.aligner_init
        if args.steps is not None:
            train["steps"] = args.steps
        if args.seed is not None:
            train["seed"] = args.seed
        cfg = cfg.with_overrides(model=model, train=train)
        return commands.cmd_train(cfg, args.data, out, args.aligner_ckpt, args.resume)
    explicit = cfg if args.config else None
    seed = cfg.eval.seed if args.seed is None else args.seed
    g = cfg.eval.guidance if args.guidance is None else args.guidance
    if args.command == "sample":
        return commands.cmd_sample(args.checkpoint, args.manifest, out, seed, g, explicit)
    report = commands.cmd_eval(args.checkpoint, args.data, out, seed, g, args.n_clips or cfg.eval.n_clips,
                               args.baseline, args.name, explicit)
    summary = dict(report.aggregate)
    if report.baseline:
        summary["mean_delta"] = report.baseline["mean_delta"]
        summary["sign_test_p"] = report.baseline["sign_test"]["p_value"]
    return summary


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = _run(args)
    except RefvidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        ad.set_precision("f64")
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
