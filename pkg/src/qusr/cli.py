"""Command-line entry point: ``qusr <subcommand> [options]``.

Every subcommand accepts ``--config FILE``, repeated ``--set key=value`` overrides,
``--run-dir DIR`` and ``-v``. The effective configuration is printed and written to
``<run_dir>/config.json`` before any work starts. Outputs land under the run
directory in ``checkpoints/``, ``logs/``, ``reports/`` and ``images/``.

Exit codes::

    0  success
    1  unexpected library error
    2  usage error (bad subcommand or flag)
    3  configuration error
    4  data or shape error
    5  image read/decode error
    6  remote captioning error
    7  training diverged
    8  checkpoint unreadable or incompatible
    130 interrupted
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline as P
from .conditioning import PromptCache, caption_many, stub_text
from .config import RunConfig, load_config
from .errors import ConfigError, QUSRError
from .imaging import PairDataset, build_pairs

log = logging.getLogger("qusr")

RUN_SUBDIRS = ("checkpoints", "logs", "reports", "images")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. noise.p=0 (repeatable)")
    common.add_argument("--run-dir", help="output root (default: run_dir from the config)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="qusr", description="Single-step residual diffusion super-resolution.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("prepare-data", parents=[common], help="synthesize LQ/HQ patch pairs")
    p.add_argument("--hq-dir", help="folder of HQ images")
    p.add_argument("--out", help="pairs output folder (default: data.pairs_dir or <run_dir>/data)")
    p.add_argument("--patches-per-image", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("caption", parents=[common], help="fill the prompt cache")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=("stub", "remote"), default="stub")
    p.add_argument("--cache-dir")
    p.add_argument("--max-in-flight", type=int, default=4)

    p = sub.add_parser("pretrain-codec", parents=[common], help="stage 1: latent codec")
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint path (default: <run_dir>/checkpoints/codec.qusr)")

    p = sub.add_parser("pretrain-teacher", parents=[common], help="stage 2: teacher denoiser")
    p.add_argument("--manifest")
    p.add_argument("--codec")
    p.add_argument("--cache-dir")
    p.add_argument("--out", help="checkpoint path (default: <run_dir>/checkpoints/teacher.qusr)")

    p = sub.add_parser("train", parents=[common], help="stage 3: QUSR training")
    p.add_argument("--manifest")
    p.add_argument("--codec")
    p.add_argument("--teacher")
    p.add_argument("--cache-dir")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("infer", parents=[common], help="restore one LQ image")
    p.add_argument("input")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="output PNG (default: <run_dir>/images/<name>_x4.png)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompt", help="quality caption; default: prompt cache, else the null condition")
    p.add_argument("--cache-dir")
    p.add_argument("--dump-uncertainty", action="store_true", help="also write U and U_n beside the output")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report against the bicubic baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="report path (default: <run_dir>/reports/eval.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse and validate; exits with status 2 on usage errors."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        parser.exit(2, "qusr: error: a subcommand is required\n")
    return args


def effective_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.run_dir:
        overrides.append(f"run_dir={args.run_dir}")
    cmd = args.command
    if cmd == "prepare-data":
        for flag, key in ((args.hq_dir, "data.hq_dir"), (args.out, "data.pairs_dir"),
                          (args.patches_per_image, "data.patches_per_image"), (args.seed, "seed")):
            if flag is not None:
                overrides.append(f"{key}={flag}")
    for attr, key in (("manifest", "data.manifest"), ("cache_dir", "data.cache_dir"),
                      ("codec", "data.codec_ckpt"), ("teacher", "data.teacher_ckpt")):
        value = getattr(args, attr, None)
        if value is not None and cmd not in ("infer", "eval"):
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def _run_dir(config: RunConfig) -> Path:
    root = Path(config.run_dir)
    for name in RUN_SUBDIRS:
        (root / name).mkdir(parents=True, exist_ok=True)
    return root


def _persist(config: RunConfig, root: Path) -> None:
    text = config.to_json()
    print(text)
    (root / "config.json").write_text(text + "\n")


def _cache_dir(config: RunConfig) -> Optional[str]:
    return config.data.cache_dir or None


def _codec_path(config: RunConfig, root: Path) -> Path:
    return Path(config.data.codec_ckpt) if config.data.codec_ckpt else root / "checkpoints" / "codec.qusr"


def _teacher_path(config: RunConfig, root: Path) -> Path:
    return Path(config.data.teacher_ckpt) if config.data.teacher_ckpt else root / "checkpoints" / "teacher.qusr"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} checkpoint not found: {path}")
    return path


def _adopt(config: RunConfig, section: str, other: RunConfig, source: Path) -> None:
    mine, theirs = getattr(config, section), getattr(other, section)
    if mine != theirs:
        log.warning("using %s settings stored in %s", section, source)
        setattr(config, section, theirs)


def cmd_prepare_data(args, config: RunConfig, root: Path) -> int:
    if not config.data.hq_dir:
        raise ConfigError("prepare-data needs --hq-dir (or data.hq_dir)")
    out = Path(config.data.pairs_dir) if config.data.pairs_dir else root / "data"
    ds = build_pairs(config.data.hq_dir, out, config)
    print(f"wrote {len(ds)} pairs to {out / 'manifest.jsonl'} ({ds.header['skipped']} images skipped)")
    return 0


def cmd_caption(args, config: RunConfig, root: Path) -> int:
    manifest = P.manifest_path(config)
    ds = PairDataset.from_manifest(manifest)
    cache = PromptCache(_cache_dir(config) or root / "prompts")
    if args.mode == "stub":
        for rec in ds.records:
            cache.put(rec.prompt_cache_key, stub_text(rec.params))
    else:
        paths = [ds.root / rec.lq_path for rec in ds.records]
        caption_many(paths, max_in_flight=args.max_in_flight, cache=cache)
    print(f"cached {len(ds)} {args.mode} captions in {cache.root}")
    return 0


def _data(config: RunConfig, root: Path) -> P.TrainingData:
    cache = _cache_dir(config)
    if cache is None and (root / "prompts").is_dir():
        cache = str(root / "prompts")
    return P.load_training_data(P.manifest_path(config), cache)


def cmd_pretrain_codec(args, config: RunConfig, root: Path) -> int:
    out = Path(args.out) if args.out else root / "checkpoints" / "codec.qusr"
    _, history = P.run_pretrain_codec(config, _data(config, root), out, root / "logs" / "codec.jsonl")
    print(f"codec loss {history[0]:.5f} -> {history[-1]:.5f}; saved {out}")
    return 0


def cmd_pretrain_teacher(args, config: RunConfig, root: Path) -> int:
    codec_path = _require(_codec_path(config, root), "codec")
    codec, codec_cfg = P.load_codec(codec_path)
    _adopt(config, "codec", codec_cfg, codec_path)
    out = Path(args.out) if args.out else root / "checkpoints" / "teacher.qusr"
    _, history = P.run_pretrain_teacher(config, _data(config, root), codec, out, root / "logs" / "teacher.jsonl")
    print(f"teacher loss {history[0]:.5f} -> {history[-1]:.5f}; saved {out}")
    return 0


def cmd_train(args, config: RunConfig, root: Path) -> int:
    codec_path = _require(_codec_path(config, root), "codec")
    codec, codec_cfg = P.load_codec(codec_path)
    _adopt(config, "codec", codec_cfg, codec_path)
    teacher = None
    if config.loss.lambda3:
        teacher_path = _require(_teacher_path(config, root), "teacher")
        teacher, teacher_cfg = P.load_teacher(teacher_path)
        _adopt(config, "text", teacher_cfg, teacher_path)
    result = P.train(config, _data(config, root), codec, teacher, ckpt_dir=root / "checkpoints",
                     log_path=root / "logs" / "train.jsonl", resume=args.resume)
    if result.history:
        print(f"total loss {result.history[0]['total']:.5f} -> {result.history[-1]['total']:.5f}")
    print(f"saved {result.checkpoint}")
    return 0


def cmd_infer(args, config: RunConfig, root: Path) -> int:
    model, _ = P.load_qusr(args.ckpt)
    out = Path(args.out) if args.out else root / "images" / f"{Path(args.input).stem}_x4.png"
    cache = args.cache_dir or _cache_dir(config)
    P.infer_file(model, args.input, out, seed=args.seed, prompt=args.prompt, cache_dir=cache,
                 dump_uncertainty=args.dump_uncertainty)
    print(f"wrote {out}")
    return 0


def cmd_eval(args, config: RunConfig, root: Path) -> int:
    model, _ = P.load_qusr(args.ckpt)
    out = Path(args.out) if args.out else root / "reports" / "eval.json"
    report = P.evaluate(args.manifest, model, seed=args.seed, cache_dir=args.cache_dir or _cache_dir(config),
                        report_path=out)
    s = report["summary"]
    print(json.dumps(s, indent=2))
    if report["missing"]:
        print(f"{len(report['missing'])} pairs missing; see {out}", file=sys.stderr)
    return 0


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "caption": cmd_caption,
    "pretrain-codec": cmd_pretrain_codec,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def run(args: argparse.Namespace) -> int:
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = effective_config(args)
        root = _run_dir(config)
        _persist(config, root)
        return COMMANDS[args.command](args, config, root)
    except QUSRError as exc:
        print(f"qusr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
