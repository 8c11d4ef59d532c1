"""Experiment configuration: YAML schema, defaults and validation.

A config is a nested mapping::

    name: toy
    seed: 0
    output_dir: runs/toy            # REJECTKIT_OUTPUT_DIR overrides
    dataset: {source: blobs, spread: 0.08, per_class: 200}
    splits:                         # [start, stop) ranges into a seeded,
      backbone: [0, 200]            # class-interleaved ordering of the data
      detector: [200, 400]
      calibration: [400, 500]       # optional; defaults to the detector split
      test: [500, 600]
    backbone:
      sizes: [2, 16, 16, 3]
      taps: {1: h1, 2: h2}          # hidden-layer index -> tap id
      train: {learning_rate: 0.1, momentum: 0.9, batch_size: 32, epochs: 50}
    surrogate: {seed: 1}            # attacker's network for black-box curves
    defenses:
      - name: NR
        taps: [input]
        detectors: [{kind: svm, C: 1.0, gamma: 1.0}]
      - name: NR-RBF
        taps: [input]
        detectors: [{kind: rbfnet, r: 3}]
        reference: NR               # reduction ratio computed against NR
    calibration: {target: 0.10}
    attack: {norm: l2, eta0: 0.01, conv_tol: 1.0e-6, max_outer_iters: 1000,
             doublings: 10, box: [0, 1], gamma_scale: 1.0}
    evaluation: {grid: {start: 0, stop: 1.0, step: 0.1}, runs: 5,
                 samples_per_run: 200, settings: [white_box, black_box]}
    benchmark: {repeats: 1000, timing: true}
    figures: true

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import copy
import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .attack import AttackConfig, Norm, SurrogateSpec
from .backbone import INPUT_TAP, LOGITS, TrainConfig, mlp_arch, validate_arch
from .data import DataSource, DatasetSpec, triangle_centers
from .errors import ConfigError
from .evaluation import Setting

OUTPUT_ENV = "REJECTKIT_OUTPUT_DIR"
SPLIT_NAMES = ("backbone", "detector", "calibration", "test")
DETECTOR_KINDS = ("svm", "rbfnet", "knn", "kde")


@dataclass
class DefenseConfig:
    name: str
    taps: list
    detectors: list  # one spec dict per tap, each with a "kind"
    combiner: Optional[dict] = None
    reference: Optional[str] = None
    alpha: float = 0.0
    folds: int = 3
    joint_epochs: int = 0  # > 0 adds an end-to-end pass after stage-wise fitting


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    output_dir: Path
    base_dir: Path
    dataset: DatasetSpec
    splits: dict  # name -> (start, stop)
    arch_sizes: list
    arch_taps: dict
    train: TrainConfig
    backbone_path: Optional[Path]
    surrogate_seed: int
    defenses: list
    calibration_target: float
    attack: AttackConfig
    surrogate: SurrogateSpec
    grid: np.ndarray
    runs: int
    samples_per_run: int
    settings: list
    bench_repeats: int
    bench_timing: bool
    figures: bool
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def arch(self):
        return mlp_arch(self.arch_sizes, self.arch_taps)

    def split_range(self, name):
        if name == "calibration" and "calibration" not in self.splits:
            return self.splits["detector"]
        return self.splits[name]

    def config_hash(self):
        """sha256 of the canonical config, ignoring where outputs go."""
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _need(d, key, where):
    if key not in d:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return d[key]


def _grid(spec):
    if isinstance(spec, dict):
        start, stop, step = (float(spec.get(k, d)) for k, d in (("start", 0.0), ("stop", None), ("step", None)))
        if step <= 0:
            raise ConfigError("evaluation.grid: step must be positive")
        n = int(round((stop - start) / step))
        return np.round(start + step * np.arange(n + 1), 12)
    return np.asarray([float(v) for v in spec])


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed mapping; raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = copy.deepcopy(raw)
    base_dir = Path(base_dir)
    known = {"name", "seed", "output_dir", "dataset", "splits", "backbone", "surrogate", "defenses",
             "calibration", "attack", "evaluation", "benchmark", "figures"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    ds_raw = dict(_need(raw, "dataset", "config"))
    try:
        source = DataSource(_need(ds_raw, "source", "dataset"))
    except ValueError:
        raise ConfigError(f"dataset.source must be one of {[s.value for s in DataSource]}") from None
    centers = ds_raw.get("centers")
    dataset = DatasetSpec(
        source=source,
        images=ds_raw.get("images"),
        labels=ds_raw.get("labels"),
        path=ds_raw.get("path"),
        centers=centers,
        spread=float(ds_raw.get("spread", 0.08)),
        per_class=int(ds_raw.get("per_class", 100)),
        normalize=bool(ds_raw.get("normalize", source is not DataSource.CSV)),
        clip=tuple(ds_raw["clip"]) if ds_raw.get("clip") is not None else None,
    )

    splits = {}
    for name, rng in dict(_need(raw, "splits", "config")).items():
        if name not in SPLIT_NAMES:
            raise ConfigError(f"splits: unknown split {name!r}")
        if not (isinstance(rng, (list, tuple)) and len(rng) == 2):
            raise ConfigError(f"splits.{name}: expected [start, stop]")
        a, b = int(rng[0]), int(rng[1])
        if not 0 <= a < b:
            raise ConfigError(f"splits.{name}: need 0 <= start < stop")
        splits[name] = (a, b)
    for name in ("backbone", "detector", "test"):
        if name not in splits:
            raise ConfigError(f"splits: missing {name!r}")

    bb = dict(_need(raw, "backbone", "config"))
    sizes = [int(v) for v in _need(bb, "sizes", "backbone")]
    taps = {int(k): str(v) for k, v in (bb.get("taps") or {}).items()}
    tr = dict(bb.get("train") or {})
    bad = set(tr) - {"learning_rate", "momentum", "batch_size", "epochs"}
    if bad:
        raise ConfigError(f"backbone.train: unknown keys {sorted(bad)}")
    try:
        train = TrainConfig(**tr)
    except ValueError as exc:
        raise ConfigError(f"backbone.train: {exc}") from None
    backbone_path = Path(bb["path"]) if bb.get("path") else None

    defenses = []
    for i, d in enumerate(_need(raw, "defenses", "config") or []):
        where = f"defenses[{i}]"
        dets = list(_need(d, "detectors", where))
        dtaps = [str(t) for t in _need(d, "taps", where)]
        defenses.append(DefenseConfig(
            name=str(_need(d, "name", where)),
            taps=dtaps,
            detectors=[dict(x) for x in dets],
            combiner=dict(d["combiner"]) if d.get("combiner") else None,
            reference=d.get("reference"),
            alpha=float(d.get("alpha", 0.0)),
            folds=int(d.get("folds", 3)),
            joint_epochs=int(d.get("joint_epochs", 0)),
        ))

    at = dict(raw.get("attack") or {})
    gamma_scale = float(at.pop("gamma_scale", 1.0))
    try:
        attack = AttackConfig(epsilon=0.0, **at)
        surrogate = SurrogateSpec(gamma_scale)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"attack: {exc}") from None

    ev = dict(raw.get("evaluation") or {})
    grid = _grid(_need(ev, "grid", "evaluation"))
    try:
        settings = [Setting(s) for s in ev.get("settings", ["white_box", "black_box"])]
    except ValueError:
        raise ConfigError("evaluation.settings: expected white_box and/or black_box") from None
    bench = dict(raw.get("benchmark") or {})
    out = os.environ.get(OUTPUT_ENV) or raw.get("output_dir") or f"runs/{raw.get('name', 'experiment')}"
    out = Path(out)
    if not out.is_absolute():
        out = (Path.cwd() / out) if os.environ.get(OUTPUT_ENV) else base_dir / out

    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        seed=int(raw.get("seed", 0)),
        output_dir=out,
        base_dir=base_dir,
        dataset=dataset,
        splits=splits,
        arch_sizes=sizes,
        arch_taps=taps,
        train=train,
        backbone_path=backbone_path,
        surrogate_seed=int((raw.get("surrogate") or {}).get("seed", int(raw.get("seed", 0)) + 1)),
        defenses=defenses,
        calibration_target=float((raw.get("calibration") or {}).get("target", 0.10)),
        attack=attack,
        surrogate=surrogate,
        grid=grid,
        runs=int(ev.get("runs", 5)),
        samples_per_run=int(ev.get("samples_per_run", 200)),
        settings=settings,
        bench_repeats=int(bench.get("repeats", 1000)),
        bench_timing=bool(bench.get("timing", True)),
        figures=bool(raw.get("figures", True)),
        raw=raw,
    )
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return parse_config(raw, base_dir=path.parent)


def resolve(cfg: ExperimentConfig, p):
    p = Path(p)
    return p if p.is_absolute() else cfg.base_dir / p


def _idx_count(path):
    opener = gzip.open if Path(path).read_bytes()[:2] == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        head = fh.read(8)
    if len(head) < 8:
        raise ConfigError(f"{path}: too short to be an IDX file")
    return struct.unpack(">I", head[4:8])[0]


def dataset_size(cfg: ExperimentConfig):
    """Sample count of the configured dataset, read cheaply (headers only where possible)."""
    ds = cfg.dataset
    if ds.source is DataSource.SYNTH_BLOBS:
        centers = ds.centers if ds.centers is not None else triangle_centers()
        return len(centers) * ds.per_class
    if ds.source is DataSource.IDX_PAIR:
        return _idx_count(resolve(cfg, ds.labels))
    with open(resolve(cfg, ds.path)) as fh:
        return sum(1 for line in fh if line.strip()) - 1


def validate(cfg: ExperimentConfig):
    """Reject inconsistent configs before any data is loaded or model trained."""
    ds = cfg.dataset
    needed = {DataSource.IDX_PAIR: ("images", "labels"), DataSource.CSV: ("path",)}.get(ds.source, ())
    for key in needed:
        val = getattr(ds, key)
        if not val:
            raise ConfigError(f"dataset.{key} is required for source {ds.source.value!r}")
        if not resolve(cfg, val).exists():
            raise ConfigError(f"dataset file not found: {resolve(cfg, val)}")
    if ds.source is DataSource.SYNTH_BLOBS and ds.spread <= 0:
        raise ConfigError("dataset.spread must be positive")
    if cfg.backbone_path is not None and not resolve(cfg, cfg.backbone_path).exists():
        raise ConfigError(f"backbone file not found: {resolve(cfg, cfg.backbone_path)}")

    ranges = sorted((a, b, n) for n, (a, b) in cfg.splits.items())
    for (a1, b1, n1), (a2, b2, n2) in zip(ranges, ranges[1:]):
        if a2 < b1:
            raise ConfigError(f"splits {n1!r} and {n2!r} overlap")
    n = dataset_size(cfg)
    if ranges[-1][1] > n:
        raise ConfigError(f"split {ranges[-1][2]!r} ends at {ranges[-1][1]}, dataset has {n} samples")

    try:
        validate_arch(cfg.arch)
    except ValueError as exc:
        raise ConfigError(f"backbone: {exc}") from None
    known_taps = {INPUT_TAP, LOGITS, *cfg.arch_taps.values()}
    names = set()
    for d in cfg.defenses:
        if d.name in names:
            raise ConfigError(f"duplicate defence name {d.name!r}")
        names.add(d.name)
        for t in d.taps:
            if t not in known_taps:
                raise ConfigError(f"defence {d.name!r}: unknown tap id {t!r} (known: {sorted(known_taps)})")
        if len(d.taps) != len(d.detectors):
            raise ConfigError(f"defence {d.name!r}: need one detector per tap")
        if len(d.taps) > 1 and d.combiner is None:
            raise ConfigError(f"defence {d.name!r}: more than one tap needs a combiner")
        for spec in d.detectors + ([d.combiner] if d.combiner else []):
            if spec.get("kind") not in DETECTOR_KINDS:
                raise ConfigError(f"defence {d.name!r}: detector kind must be one of {DETECTOR_KINDS}")
        if d.joint_epochs and not (d.combiner and all(s["kind"] == "rbfnet" for s in d.detectors + [d.combiner])):
            raise ConfigError(f"defence {d.name!r}: joint fine-tuning needs RBF networks throughout")
    for d in cfg.defenses:
        if d.reference is not None and d.reference not in names:
            raise ConfigError(f"defence {d.name!r}: unknown reference {d.reference!r}")
    if not 0 <= cfg.calibration_target < 1:
        raise ConfigError("calibration.target must lie in [0, 1)")
    g = cfg.grid
    if g.size == 0 or g[0] != 0 or np.any(np.diff(g) <= 0):
        raise ConfigError("evaluation.grid must start at 0 and be strictly increasing")
    if cfg.runs < 1 or cfg.samples_per_run < 1:
        raise ConfigError("evaluation.runs and samples_per_run must be >= 1")
    if cfg.attack.norm not in (Norm.L2, Norm.LINF):
        raise ConfigError("attack.norm must be l2 or linf")
    return cfg
