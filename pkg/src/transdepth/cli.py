"""Command-line entry point: ``transdepth {synth,train,eval,predict,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import GeneratorConfig, generate_samples, load_manifest, write_corpus
from .training import (TrainConfig, config_mismatch, evaluate_corpus, load_checkpoint, predict,
                       read_config_file, read_log, train, write_prediction)


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit status 2."""


# --------------------------------------------------------------------------
# configuration


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training configuration (override --config)")
    for f in fields(TrainConfig):
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*flags, dest=f"cfg_{f.name}", metavar=str(f.type).upper(),
                           help=f"default {f.default}")


def resolve_config(args, base: dict | None = None) -> TrainConfig:
    """``base`` (defaults if omitted), then the config file, then command-line flags."""
    try:
        from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config: {exc}") from None
    types = TrainConfig.field_types()
    unknown = sorted(set(from_file) - set(types))
    if unknown:
        raise CliError(f"unknown config keys in {args.config}: {unknown}")
    values = {**(base or {}), **from_file}
    for name in types:
        flag = getattr(args, f"cfg_{name}", None)
        if flag is not None:
            values[name] = flag
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad configuration: {exc}") from None


def _load_data(path, strict: bool):
    try:
        samples = load_manifest(path, strict=strict)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from None
    if not samples:
        raise CliError(f"no usable samples in {path}")
    return samples


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}") from None


def _checkpoint_and_config(args):
    ckpt = _load_checkpoint(args.checkpoint)
    if args.config or any(getattr(args, f"cfg_{f.name}") is not None for f in fields(TrainConfig)):
        requested = resolve_config(args, base=ckpt.config.to_dict())
        bad = config_mismatch(ckpt.config, requested)
        if bad:
            details = ", ".join(f"{k}: checkpoint {getattr(ckpt.config, k)!r} vs config "
                                f"{getattr(requested, k)!r}" for k in bad)
            raise CliError(f"checkpoint and config disagree on {details}")
    return ckpt


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    gen = GeneratorConfig()
    if args.scene_spec:
        try:
            gen = GeneratorConfig.from_dict(json.loads(Path(args.scene_spec).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise CliError(f"bad scene spec {args.scene_spec}: {exc}") from None
    overrides = {k: v for k, v in (("hole_fraction", args.hole_fraction),
                                   ("background_bleed_fraction", args.background_bleed_fraction),
                                   ("noise_sigma", args.noise_sigma)) if v is not None}
    try:
        if overrides:
            gen = replace(gen, corruption=replace(gen.corruption, **overrides))
        if args.size:
            gen = replace(gen, width=args.size, height=args.size)
        samples = generate_samples(gen, args.count, args.seed)
    except (ValueError, RuntimeError) as exc:
        raise CliError(str(exc)) from None
    path = write_corpus(samples, args.out, {"generator": gen.to_dict(), "seed": args.seed})
    print(f"wrote {len(samples)} samples to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    samples = _load_data(args.data, strict=not args.skip_bad)
    resume = _load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    try:
        result = train(samples, cfg, out, resume=resume)
    except FloatingPointError as exc:
        raise CliError(f"training diverged: {exc}; "
                       f"last good state in {out / 'last_good.json'}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.figures:
        from .plotting import plot_training_curve
        plot_training_curve(read_log(out / "train_log.csv"), out / "loss_curve.png")
    last = result.log[-1] if result.log else None
    if last:
        print(f"iteration {last['iteration']}: loss {last['loss']:.6f} "
              f"(restored {last['l_restored']:.6f})")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _checkpoint_and_config(args)
    samples = _load_data(args.data, strict=not args.skip_bad)
    try:
        result = evaluate_corpus(samples, ckpt.model, ckpt.config.depth_planes, args.out,
                                 figures=args.figures)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(json.dumps(result["aggregate"], indent=1))
    return 0


def cmd_predict(args) -> int:
    ckpt = _checkpoint_and_config(args)
    samples = _load_data(args.data, strict=True)
    if args.sample is None:
        sample = samples[0]
    else:
        by_id = {s.id: s for s in samples}
        if args.sample not in by_id:
            raise CliError(f"sample {args.sample!r} not in {args.data}")
        sample = by_id[args.sample]
    try:
        out = predict(sample, ckpt.model, ckpt.config.depth_planes)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    write_prediction(out, args.out, sample.id)
    if args.figures:
        from .plotting import plot_sample
        plot_sample(sample, out, Path(args.out) / f"{sample.id}_panel.png")
    print(f"wrote predictions for {sample.id} to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import GROUPS, run_suite
    groups = args.groups or GROUPS
    try:
        outcomes = run_suite(groups, seed=args.seed, report=print)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    failed = [o for o in outcomes if not o.passed]
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} gradient checks passed")
    for o in failed:
        print(f"  worst entry of {o.result.name}: {o.result.worst}")
    return 1 if failed else 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transdepth", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene-spec", help="JSON file of generator settings")
    p.add_argument("--size", type=int, help="square image side (overrides the scene spec)")
    p.add_argument("--hole-fraction", type=float)
    p.add_argument("--background-bleed-fraction", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(func=cmd_synth)

    def figures_flag(p, default):
        p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=default,
                       help="render matplotlib figures")

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--data", required=True, help="manifest.json")
    p.add_argument("--config", help="key=value or JSON training config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--skip-bad", action="store_true", help="skip invalid samples instead of failing")
    figures_flag(p, True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint on a manifest"),
                             ("predict", cmd_predict, "predict depth for one sample")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--data", required=True, help="manifest.json")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="expected configuration; a mismatch is an error")
        if name == "predict":
            p.add_argument("--sample", help="sample id (default: first in the manifest)")
        else:
            p.add_argument("--skip-bad", action="store_true")
        figures_flag(p, True)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--groups", nargs="*", help="subset of check groups")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
