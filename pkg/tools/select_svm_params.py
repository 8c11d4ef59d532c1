"""Cross-validate SVM (C, gamma) per tap on a config's detector split.

    python tools/select_svm_params.py configs/mnist.yaml --taps h1 h2 logits
"""

import argparse
import time

from rejectkit.backbone import train_backbone
from rejectkit.config import load_config
from rejectkit.data import load_dataset
from rejectkit.detectors.svm import select_svm_params
from rejectkit.mathutils import SeedStreams
from rejectkit.pipeline import split_data


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--taps", nargs="+", required=True)
    ap.add_argument("--max-points", type=int, default=1000)
    args = ap.parse_args()
    cfg = load_config(args.config)
    streams = SeedStreams(cfg.seed)
    sp = split_data(cfg, load_dataset(cfg.dataset, seed=streams.child_seed("data"), base_dir=cfg.base_dir))
    tr = sp["backbone"]
    bb = train_backbone(tr.X, tr.y, cfg.arch, cfg.train, seed=streams.child_seed("backbone"))
    det = sp["detector"]
    _, taps = bb.forward(det.X)
    for t in args.taps:
        t0 = time.perf_counter()
        C, g, table = select_svm_params(taps[t], det.y, n_classes=bb.class_count, max_points=args.max_points)
        print(f"{t}: C={C:g} gamma={g:g} cv_accuracy={table[(C, g)]:.4f} ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
