"""``texiris`` command line: data generation, both training stages, extraction and evaluation.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 training or evaluation failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import SynthSpec, generate_synthetic, load_dataset, write_dataset
from .errors import (CapabilityError, ConfigurationError, DimensionError, FormatError, InputError,
                     IrisError, StateError)
from .experiments import class_split, cross_dataset_experiment, verify
from .matching import ScoreSet, det_metrics, extract_signatures, format_report
from .models import FULL_RESOLUTION, CombNetVariant, combnet_from_state, combnet_spec, count_params
from .training import train_stage1, train_stage2

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _exit_code(exc):
    if isinstance(exc, (UsageError, ConfigurationError, CapabilityError)):
        return EXIT_USAGE
    if isinstance(exc, (FormatError, InputError, StateError, DimensionError, OSError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.override(getattr(args, "set", None) or [])


def _echo(cfg, path, extra=None):
    """Write the effective configuration next to an output."""
    doc = cfg.to_dict()
    if extra:
        doc["invocation"] = extra
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _parent(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load(args, cfg, default_split="all"):
    manifest, dataset = load_dataset(args.data)
    split = getattr(args, "split", None) or default_split
    if split != "all":
        rng = np.random.default_rng(cfg.protocol.seed)
        train, test = class_split(dataset.classes, cfg.protocol.test_fraction, rng)
        dataset = dataset.of_classes(train if split == "train" else test)
    return manifest, dataset


def _load_model(path):
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("stage") != 2:
        raise StateError(f"{path} is not a stage-2 model checkpoint")
    return combnet_from_state(ckpt.tensors, ckpt.metadata)


def cmd_gen_data(args):
    cfg = _config(args)
    synth = cfg.synth.shifted() if args.shifted else cfg.synth
    manifest, images = generate_synthetic(synth)
    out = Path(args.out)
    write_dataset(out, manifest, images)
    _echo(cfg, out / "config.json", {"command": "gen-data", "shifted": args.shifted})
    print(f"wrote {len(manifest)} images of {manifest.num_classes} classes to {out}")


def cmd_pretrain(args):
    cfg = _config(args)
    _, dataset = _load(args, cfg)
    out = _parent(args.out)
    s1 = replace(cfg.stage1, checkpoint=str(out), log=args.log)
    _, report = train_stage1(dataset, s1)
    Path(f"{out}.loss.csv").write_text(report.loss_csv())
    _echo(cfg, f"{out}.config.json", {"command": "pretrain", "data": str(args.data), "split": args.split})
    print(format_report({"best_epoch": report.best_epoch + 1, "best_val_ssim": report.best_metric,
                         "wall_time_s": report.wall_time, "checkpoint": str(out)}), end="")


def cmd_train(args):
    cfg = _config(args)
    s2 = cfg.stage2
    s2 = replace(s2, pool=args.pool or s2.pool, head=args.head or s2.head)
    cfg = replace(cfg, stage2=s2)
    _, dataset = _load(args, cfg)
    dataset = dataset.relabelled()
    if args.init == "random":
        init = "random"
    else:
        ckpt = load_checkpoint(args.init)
        if ckpt.metadata.get("pool", s2.pool) != s2.pool:
            raise UsageError(f"{args.init} was pre-trained with {ckpt.metadata['pool']} pooling, "
                             f"not {s2.pool}")
        init = ckpt.tensors
    out = _parent(args.out)
    model, report = train_stage2(dataset, init, replace(s2, checkpoint=str(out), log=args.log))
    Path(f"{out}.loss.csv").write_text(report.loss_csv())
    Path(f"{out}.report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _echo(cfg, f"{out}.config.json", {"command": "train", "data": str(args.data), "init": args.init,
                                      "split": args.split})
    print(format_report({"model": model.variant.name, "classes": model.num_classes,
                         "best_epoch": report.best_epoch + 1, "best_val_accuracy": report.best_metric,
                         "wall_time_s": report.wall_time, "checkpoint": str(out)}), end="")


def cmd_extract(args):
    cfg = _config(args)
    model = _load_model(args.model)
    _, dataset = _load(args, cfg)
    sigs = extract_signatures(model, dataset.images, dataset.labels, dataset.sample_ids)
    out = _parent(args.out)
    with open(out, "w") as fh:
        width = sigs[0].dim if sigs else 0
        fh.write(",".join(["class_id", "sample_id"] + [f"v{i}" for i in range(width)]) + "\n")
        for s in sigs:
            fh.write(",".join([str(s.class_id), str(s.sample_id)] + [repr(float(v)) for v in s.values]))
            fh.write("\n")
    print(f"wrote {len(sigs)} signatures to {out}")


def _write_eval(out, scores, extra):
    curve, eer, auc = det_metrics(scores)
    (out / "scores.csv").write_text(scores.to_csv())
    (out / "det.csv").write_text(curve.to_csv())
    report = format_report({**extra, "genuine_scores": scores.genuine.size,
                            "imposter_scores": scores.imposter.size, "eer": eer, "auc": auc})
    (out / "report.txt").write_text(report)
    return report


def cmd_eval(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scores:
        if args.model or args.data:
            raise UsageError("--scores cannot be combined with --model/--data")
        scores = ScoreSet.from_csv(Path(args.scores).read_text())
        report = _write_eval(out, scores, {"protocol": "scores", "source": str(args.scores)})
    else:
        if not (args.model and args.data):
            raise UsageError("eval needs --model and --data, or --scores")
        model = _load_model(args.model)
        seed = cfg.protocol.seed
        if args.protocol == "within":
            _, dataset = _load(args, cfg, default_split="test")
            result = verify(model, dataset, np.random.default_rng([seed, 1]))
            report = _write_eval(out, result.scores, {"protocol": "within",
                                                      "classes": len(dataset.classes)})
        else:
            _, dataset = _load(args, cfg)
            cross = cross_dataset_experiment(model, dataset, cfg.protocol.folds, seed)
            report = cross.summary()
            (out / "report.txt").write_text(report)
            (out / "folds.csv").write_text("fold,classes,eer,auc\n" + "".join(
                f"{i},{len(c)},{e!r},{a!r}\n" for i, c, e, a in cross.folds))
    _echo(cfg, out / "config.json", {"command": "eval", "protocol": args.protocol,
                                     "model": args.model, "data": args.data, "scores": args.scores})
    print(report, end="")


def _resolution(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must be HxW, got {text!r}") from None
    return h, w


def cmd_params(args):
    variant = CombNetVariant(pool=args.pool, head=args.head, init="random")
    report = count_params(combnet_spec(variant, args.classes, args.resolution))
    print(f"{variant.name} with {args.classes} classes at {args.resolution[0]}x{args.resolution[1]}")
    print(report.table())


def build_parser():
    p = _Parser(prog="texiris", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration (JSON)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")

    def with_split(sp, default):
        sp.add_argument("--split", choices=("all", "train", "test"), default=default,
                        help="class-disjoint subset of the data to use (protocol seed/test_fraction)")

    sp = sub.add_parser("gen-data", help="write a synthetic texture dataset")
    sp.add_argument("--spec", dest="config", help="run configuration whose synth section is used")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    sp.add_argument("--shifted", action="store_true", help="draw from the shifted texture distribution")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="stage-1 autoencoder pre-training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="encoder checkpoint path")
    sp.add_argument("--log", action="store_true", help="JSON progress lines on stdout")
    with_config(sp)
    with_split(sp, "all")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="stage-2 supervised training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True, help="stage-1 checkpoint or 'random'")
    sp.add_argument("--pool", choices=("eap", "max"))
    sp.add_argument("--head", choices=("tel", "fc"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", action="store_true")
    with_config(sp)
    with_split(sp, "all")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("extract", help="dump TEL signatures as CSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    with_config(sp)
    with_split(sp, "all")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("eval", help="verification protocol: DET curve, EER, AUC")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--scores", help="score CSV (kind,score) to analyse directly")
    sp.add_argument("--protocol", choices=("within", "cross"), default="within")
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.add_argument("--split", choices=("all", "train", "test"),
                    help="defaults to 'test' for within, 'all' for cross")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("params", help="parameter-count table")
    sp.add_argument("--pool", choices=("eap", "max"), default="eap")
    sp.add_argument("--head", choices=("tel", "fc"), default="tel")
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--resolution", type=_resolution, default=FULL_RESOLUTION, help="HxW")
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code
    try:
        args.func(args)
    except (IrisError, UsageError, OSError, json.JSONDecodeError) as exc:
        if isinstance(exc, json.JSONDecodeError):
            exc = InputError(str(exc))
        print(f"texiris: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
