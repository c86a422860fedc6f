#!/usr/bin/env python3
"""Cross-modality rank-1 on toy faces for the original stream, the
illumination-normalized stream and their fusion."""
import argparse
import json
from dataclasses import replace

from facesynth.experiments import FusionConfig, fusion_benefit
from facesynth.illumination import FilterConfig, Method


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--method", choices=[m.value for m in Method], default=Method.LSSF.value,
                    help="normalization for the second stream")
    ap.add_argument("--iterations", type=int)
    args = ap.parse_args(argv)

    cfg = replace(FusionConfig(), filter=FilterConfig(Method(args.method)))
    if args.iterations:
        cfg = replace(cfg, iterations=args.iterations, lr_step=7 * args.iterations // 10)
    wins = 0
    for seed in args.seeds:
        r = fusion_benefit(seed, cfg)
        wins += r["fused"] >= max(r["original"], r["normalized"])
        print(json.dumps({"seed": seed, **{k: round(v, 4) for k, v in r.items()}}), flush=True)
    print(f"fused >= both streams in {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
