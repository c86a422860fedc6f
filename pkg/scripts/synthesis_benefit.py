#!/usr/bin/env python3
"""Train a reduced CNN-S on toy faces with and without synthetic images and
compare held-out verification accuracy (optionally also with 32-avg features).

With ``--curve`` the synthetic multiple is swept and accuracy-vs-size plot
data is written next to the report.
"""
import argparse
import json
from dataclasses import replace

import numpy as np

from facesynth.evaluation import EvalReport, emit_report
from facesynth.experiments import ToyExperimentConfig, synthesis_benefit


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--avg32", action="store_true", help="also score 32-avg features of the synthetic model")
    ap.add_argument("--curve", type=int, nargs="*", metavar="FACTOR",
                    help="synthetic multiples to sweep (e.g. 0 10 30) for accuracy-vs-size plot data")
    ap.add_argument("--out", help="report CSV path (the curve goes to <out>.plot.tsv)")
    args = ap.parse_args(argv)

    cfg = ToyExperimentConfig()
    if args.iterations:
        cfg = replace(cfg, iterations=args.iterations, lr_step=2 * args.iterations // 3)

    runs = []
    for seed in args.seeds:
        r = synthesis_benefit(seed, cfg, avg32=args.avg32)
        runs.append(r)
        print(json.dumps({"seed": seed, **{k: round(v, 4) for k, v in r.items()}}), flush=True)
    gains = [r["synthetic"] - r["original"] for r in runs]
    print(f"mean gain {100 * np.mean(gains):+.2f} points over {len(runs)} seeds")

    if args.curve:
        curve = {}
        for factor in args.curve:
            accs = [synthesis_benefit(s, replace(cfg, synthetic_factor=factor))["synthetic"] for s in args.seeds]
            curve[factor * cfg.train_ids * cfg.images_per_id] = float(np.mean(accs))
            print(f"{factor}x synthetic: {curve[factor * cfg.train_ids * cfg.images_per_id]:.4f}", flush=True)
    if args.out:
        accs = [r["synthetic"] for r in runs]
        report = EvalReport("accuracy", accs, float(np.mean(accs)), float(np.std(accs)))
        for path in emit_report(report, args.out, curve=curve if args.curve else None):
            print("wrote", path)


if __name__ == "__main__":
    main()
