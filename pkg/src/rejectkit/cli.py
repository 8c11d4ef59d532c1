"""Command-line entry points.

Every subcommand reads an experiment config for data, splits and defaults;
flags override individual fields.  Exit status: 0 success, 2 invalid config
or arguments, 3 failure while computing.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import Norm, SurrogateSpec, pgd_batch, write_attack_log
from .backbone import load_model, save_model, train_backbone
from .config import OUTPUT_ENV, load_config
from .data import load_dataset
from .defense import assemble_defense, calibrate_threshold, joint_finetune, load_bundle, save_bundle
from .errors import ConfigError
from .evaluation import Setting, benchmark_prototypes, evaluate_curve, write_benchmark_csv, write_curves_csv
from .mathutils import SeedStreams
from .pipeline import EXIT_INVALID, EXIT_OK, EXIT_STAGE_FAILED, run_pipeline, split_data

log = logging.getLogger("rejectkit")


def _splits(cfg):
    ds = load_dataset(cfg.dataset, seed=SeedStreams(cfg.seed).child_seed("data"), base_dir=cfg.base_dir)
    return split_data(cfg, ds)


def _defense_cfg(cfg, name):
    for d in cfg.defenses:
        if d.name == name:
            return d
    raise ConfigError(f"no defence named {name!r} in config (have {[d.name for d in cfg.defenses]})")


def cmd_train_backbone(args, cfg):
    tr = _splits(cfg)["backbone"]
    train = cfg.train
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)
    seed = args.seed if args.seed is not None else SeedStreams(cfg.seed).child_seed("backbone")
    model = train_backbone(tr.X, tr.y, cfg.arch, train, seed=seed,
                           log=lambda e, loss: log.info("epoch %d loss %.4f", e, loss))
    save_model(model, args.out, binary=args.binary)
    print(f"wrote {args.out}")


def cmd_fit_detector(args, cfg):
    d = _defense_cfg(cfg, args.defense)
    tr = _splits(cfg)["detector"]
    backbone = load_model(args.backbone)
    seed = SeedStreams(cfg.seed).child_seed(f"defense:{d.name}")
    dc = assemble_defense(backbone, d.taps, d.detectors, d.combiner, tr.X, tr.y,
                          folds=d.folds, seed=seed, alpha=d.alpha, name=d.name)
    if d.joint_epochs:
        dc = joint_finetune(dc, tr.X, tr.y, epochs=d.joint_epochs, seed=seed)
    path = save_bundle(dc, args.out_dir, backbone_file=f"{d.name}.backbone.txt")
    print(f"wrote {path} (prototypes {dc.prototype_totals()}; theta not calibrated)")


def cmd_calibrate(args, cfg):
    dc = load_bundle(args.bundle)
    cal = _splits(cfg)["calibration"]
    target = cfg.calibration_target if args.target is None else args.target
    dc.theta = calibrate_threshold(dc, cal.X, target)
    rate = float((dc.predict(cal.X) == 0).mean())
    dc.meta["calibration_rejection"] = rate
    backbone_file = json.loads(Path(args.bundle).read_text())["backbone"]
    save_bundle(dc, Path(args.bundle).parent, backbone_file=backbone_file)
    print(f"theta={dc.theta!r} rejection on calibration split={rate:.4f}")


def _attack_cfg(cfg, args):
    a = cfg.attack
    if getattr(args, "norm", None):
        a = replace(a, norm=Norm(args.norm))
    if getattr(args, "max_iters", None):
        a = replace(a, max_outer_iters=args.max_iters)
    return a


def cmd_attack(args, cfg):
    dc = load_bundle(args.bundle)
    te = _splits(cfg)["test"]
    n = min(args.samples, len(te))
    a = replace(_attack_cfg(cfg, args), epsilon=args.epsilon)
    gs = cfg.surrogate.gamma_scale if args.gamma_scale is None else args.gamma_scale
    res = pgd_batch(dc, te.X[:n], te.y[:n], a, SurrogateSpec(gs))
    records = [{"sample_id": i, "epsilon": args.epsilon, "iterations": r.iterations,
                "final_omega": r.final_omega, "success": r.success, "rejected": r.rejected}
               for i, r in enumerate(res)]
    write_attack_log(args.log, records)
    succ = np.mean([r.success for r in res])
    rej = np.mean([r.rejected for r in res])
    print(f"success={succ:.3f} rejected={rej:.3f} log={args.log}")


def cmd_curve(args, cfg):
    te = _splits(cfg)["test"]
    setting = Setting(args.setting)
    surrogate_model = load_model(args.surrogate) if args.surrogate else None
    seed = SeedStreams(cfg.seed).child_seed("curves")
    curves = []
    for b in args.bundle:
        dc = load_bundle(b)
        curves.append(evaluate_curve(dc, te.X, te.y, cfg.grid, setting,
                                     runs=args.runs or cfg.runs, seed=seed,
                                     samples_per_run=args.samples_per_run or cfg.samples_per_run,
                                     attack=_attack_cfg(cfg, args), surrogate=cfg.surrogate,
                                     surrogate_model=surrogate_model, name=dc.name))
    write_curves_csv(args.out, curves)
    print(f"wrote {args.out}")


def cmd_benchmark(args, cfg):
    te = _splits(cfg)["test"]
    defenses = {}
    for b in args.bundle:
        dc = load_bundle(b)
        defenses[dc.name] = dc
    refs = {}
    for item in args.reference or []:
        cand, _, ref = item.partition("=")
        if ref not in defenses or cand not in defenses:
            raise ConfigError(f"--reference {item!r} names an unknown detector")
        refs[cand] = ref
    rows = benchmark_prototypes(defenses, te.X, te.y, refs, repeats=args.repeats or cfg.bench_repeats,
                                timing=not args.no_timing)
    write_benchmark_csv(args.out, rows)
    print(f"wrote {args.out}")


def cmd_run(args, cfg):
    res = run_pipeline(cfg)
    if res.status == EXIT_OK:
        print(f"done: {res.output_dir}")
    else:
        print(f"stage {res.failed_stage!r} failed; see {res.output_dir / 'manifest.json'}", file=sys.stderr)
    return res.status


def build_parser():
    p = argparse.ArgumentParser(prog="rejectkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train-backbone", cmd_train_backbone, "train the network on the backbone split")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--binary", action="store_true", help="write the binary model format")

    sp = add("fit-detector", cmd_fit_detector, "fit one configured defence on the detector split")
    sp.add_argument("--defense", required=True, help="defence name from the config")
    sp.add_argument("--backbone", required=True, help="trained backbone file")
    sp.add_argument("--out-dir", required=True)

    sp = add("calibrate", cmd_calibrate, "set the rejection threshold of a bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--target", type=float, help="target clean rejection rate")

    sp = add("attack", cmd_attack, "white-box attack on the first test samples")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--norm", choices=[n.value for n in Norm])
    sp.add_argument("--gamma-scale", type=float)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--log", required=True, help="attack log CSV")

    sp = add("curve", cmd_curve, "security-evaluation curve(s) for bundles")
    sp.add_argument("--bundle", required=True, action="append")
    sp.add_argument("--setting", choices=[s.value for s in Setting], default="white_box")
    sp.add_argument("--surrogate", help="undefended network for the black-box setting")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--samples-per-run", type=int)
    sp.add_argument("--norm", choices=[n.value for n in Norm])
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--out", required=True)

    sp = add("benchmark", cmd_benchmark, "prototype counts, reduction and latency")
    sp.add_argument("--bundle", required=True, action="append")
    sp.add_argument("--reference", action="append", help="CANDIDATE=REFERENCE")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--no-timing", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("run", cmd_run, "full pipeline")
    sp.add_argument("--output-dir", help=f"overrides the config (and {OUTPUT_ENV})")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if getattr(args, "output_dir", None):
            os.environ[OUTPUT_ENV] = args.output_dir
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        status = args.fn(args, cfg)
    except ConfigError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILED
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())
