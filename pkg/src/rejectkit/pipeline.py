"""End-to-end experiment: backbone, defences, calibration, curves, benchmark.

Every stage writes its artifacts as soon as it finishes, so a failure keeps
everything produced before it; ``manifest.json`` names the failed stage.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attack import write_attack_log
from .backbone import load_model, save_model, train_backbone
from .config import ExperimentConfig, load_config, resolve
from .data import Dataset, load_dataset, stratified_order
from .defense import (
    UndefendedClassifier,
    assemble_defense,
    calibrate_threshold,
    joint_finetune,
    save_bundle,
)
from .errors import ConfigError
from .evaluation import (
    Setting,
    accuracy_under_attack,
    benchmark_prototypes,
    evaluate_curve,
    write_benchmark_csv,
    write_curves_csv,
)
from .mathutils import SeedStreams

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_STAGE_FAILED = 3
UNDEFENDED = "undefended"


@dataclass
class RunResult:
    status: int
    output_dir: Path
    failed_stage: str = None
    splits: dict = field(default_factory=dict)
    backbone: object = None
    surrogate: object = None
    defenses: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)  # setting value -> list of curves
    benchmark: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def split_data(cfg: ExperimentConfig, ds: Dataset):
    order = stratified_order(ds.y, SeedStreams(cfg.seed).get("split"))
    out = {}
    for name in ("backbone", "detector", "calibration", "test"):
        a, b = cfg.split_range(name)
        out[name] = ds.subset(np.sort(order[a:b]))
    return out


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Manifest:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.path = cfg.output_dir / "manifest.json"
        self.data = {
            "name": cfg.name,
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "package_version": __version__,
            "numpy_version": np.__version__,
            "config": cfg.raw,
            "stages": [],
            "status": "running",
            "failed_stage": None,
            "error": None,
            "artifacts": {},
            "summary": {},
        }

    def artifact(self, path):
        rel = str(Path(path).relative_to(self.cfg.output_dir))
        self.data["artifacts"][rel] = _sha256(path)

    def write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


def run_pipeline(cfg: ExperimentConfig) -> RunResult:
    """Run every stage of ``cfg``; never raises for stage failures."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    (out / "attack_logs").mkdir(exist_ok=True)
    manifest = _Manifest(cfg)
    manifest.write()
    res = RunResult(EXIT_OK, out)
    streams = SeedStreams(cfg.seed)
    state = {}

    def stage_data():
        ds = load_dataset(cfg.dataset, seed=streams.child_seed("data"), base_dir=cfg.base_dir)
        res.splits = split_data(cfg, ds)
        res.summary["split_sizes"] = {k: len(v) for k, v in res.splits.items()}

    def stage_backbone():
        tr = res.splits["backbone"]
        if cfg.backbone_path is not None:
            res.backbone = load_model(resolve(cfg, cfg.backbone_path))
        else:
            res.backbone = train_backbone(tr.X, tr.y, cfg.arch, cfg.train, seed=streams.child_seed("backbone"))
        path = out / "models" / "backbone.txt"
        save_model(res.backbone, path)
        manifest.artifact(path)
        te = res.splits["test"]
        res.summary["backbone_test_accuracy"] = float((res.backbone.predict(te.X) == te.y).mean())

    def stage_surrogate():
        tr = res.splits["backbone"]
        res.surrogate = train_backbone(tr.X, tr.y, cfg.arch, cfg.train,
                                       seed=SeedStreams(cfg.surrogate_seed).child_seed("backbone"))
        path = out / "models" / "surrogate.txt"
        save_model(res.surrogate, path)
        manifest.artifact(path)

    def stage_defenses():
        tr = res.splits["detector"]
        for d in cfg.defenses:
            t0 = time.perf_counter()
            seed = streams.child_seed(f"defense:{d.name}")
            dc = assemble_defense(res.backbone, d.taps, d.detectors, d.combiner, tr.X, tr.y,
                                  folds=d.folds, seed=seed, alpha=d.alpha, name=d.name)
            if d.joint_epochs:
                dc = joint_finetune(dc, tr.X, tr.y, epochs=d.joint_epochs, seed=seed)
            res.defenses[d.name] = dc
            log.info("fitted %s (%s prototypes) in %.1fs", d.name, dc.prototype_totals(), time.perf_counter() - t0)

    def stage_calibrate():
        cal = res.splits["calibration"]
        for name, dc in res.defenses.items():
            dc.theta = calibrate_threshold(dc, cal.X, cfg.calibration_target)
            dc.meta["calibration_rejection"] = float((dc.predict(cal.X) == 0).mean())
            path = save_bundle(dc, out / "models")
            manifest.artifact(path)
        res.summary["theta"] = {n: dc.theta for n, dc in res.defenses.items()}

    def stage_curves():
        te = res.splits["test"]
        models = dict(res.defenses)
        models[UNDEFENDED] = UndefendedClassifier(res.backbone, UNDEFENDED)
        seed = streams.child_seed("curves")
        for setting in cfg.settings:
            crafted = {}
            curves = []
            for name, model in models.items():
                t0 = time.perf_counter()
                c = evaluate_curve(model, te.X, te.y, cfg.grid, setting, runs=cfg.runs, seed=seed,
                                   samples_per_run=cfg.samples_per_run, attack=cfg.attack,
                                   surrogate=cfg.surrogate, surrogate_model=res.surrogate,
                                   name=name, craft_cache=crafted)
                curves.append(c)
                log_path = out / "attack_logs" / f"{setting.value}_{name}.csv"
                write_attack_log(log_path, c.records)
                manifest.artifact(log_path)
                res.summary.setdefault("non_converged", {})[f"{setting.value}/{name}"] = c.non_converged
                log.info("%s curve for %s in %.1fs", setting.value, name, time.perf_counter() - t0)
            res.curves[setting.value] = curves
            path = out / f"curves_{setting.value}.csv"
            write_curves_csv(path, curves)
            manifest.artifact(path)

    def stage_benchmark():
        te = res.splits["test"]
        refs = {d.name: d.reference for d in cfg.defenses if d.reference}
        res.benchmark = benchmark_prototypes(res.defenses, te.X, te.y, refs,
                                             repeats=cfg.bench_repeats, timing=cfg.bench_timing)
        path = out / "benchmark.csv"
        write_benchmark_csv(path, res.benchmark)
        manifest.artifact(path)
        res.summary["clean_accuracy"] = {
            n: accuracy_under_attack(dc.predict(te.X), te.y, 0.0) for n, dc in res.defenses.items()
        }

    def stage_figures():
        from . import plotting

        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        paths = [plotting.plot_curves(curves, fig_dir / f"curves_{s}.png") for s, curves in res.curves.items()]
        if res.benchmark:
            paths.append(plotting.plot_benchmark(res.benchmark, fig_dir / "benchmark.png"))
        if res.backbone.input_dim == 2 and res.defenses:
            te = res.splits["test"]
            paths.append(plotting.plot_decision_regions(res.defenses, te.X, te.y, fig_dir / "regions.png"))
        state["figures"] = [str(p.relative_to(out)) for p in paths]
        manifest.data["figures"] = state["figures"]

    stages = [("data", stage_data), ("backbone", stage_backbone)]
    if Setting.BLACK_BOX in cfg.settings:
        stages.append(("surrogate", stage_surrogate))
    stages += [("defenses", stage_defenses), ("calibrate", stage_calibrate),
               ("curves", stage_curves), ("benchmark", stage_benchmark)]
    if cfg.figures:
        stages.append(("figures", stage_figures))

    for name, fn in stages:
        log.info("stage %s", name)
        try:
            fn()
        except Exception as exc:  # record and stop; artifacts so far stay on disk
            log.error("stage %s failed: %s", name, exc)
            manifest.data.update(status="failed", failed_stage=name,
                                 error=f"{type(exc).__name__}: {exc}",
                                 traceback=traceback.format_exc())
            manifest.data["summary"] = res.summary
            manifest.write()
            res.status, res.failed_stage = EXIT_STAGE_FAILED, name
            return res
        manifest.data["stages"].append(name)
        manifest.data["summary"] = res.summary
        manifest.write()
    manifest.data["status"] = "ok"
    manifest.write()
    return res


def run_experiment(config_path) -> int:
    """Validate and run a config file; returns the process exit status."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_INVALID
    return run_pipeline(cfg).status
