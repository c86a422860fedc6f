#!/usr/bin/env python3
"""Two-dimensional PCA coordinates of original and synthetic toy faces, as
plot data (one row per image: x, y, subject, kind).

Pixels are used by default; with ``--checkpoint`` the network's feature
layer is projected instead.
"""
import argparse
from dataclasses import replace

import numpy as np

from facesynth.experiments import ToyExperimentConfig, canonicalize, render_plan, split_identities
from facesynth.metric import pca_project
from facesynth.network import extract_features, load_checkpoint
from facesynth.synthesis import PlanTargets, plan_dataset
from facesynth.toyfaces import generate_toy_faces


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--identities", type=int, default=5)
    ap.add_argument("--images", type=int, default=3)
    ap.add_argument("--inter", type=int, default=60)
    ap.add_argument("--intra", type=int, default=30)
    ap.add_argument("--checkpoint", help="project feature-layer activations of this network")
    ap.add_argument("--out", default="pca.tsv")
    args = ap.parse_args(argv)

    spec = replace(ToyExperimentConfig().spec, num_identities=args.identities, images_per_identity=args.images)
    toy = generate_toy_faces(spec, args.seed)
    canon = canonicalize(toy)
    manifest, _ = split_identities(toy, args.identities)
    plan = plan_dataset(manifest, PlanTargets(inter=args.inter, intra=args.intra), args.seed)
    syn, syn_labels = render_plan(plan, manifest, canon)
    orig = np.stack([canon[r.image_id].pixels for r in manifest.records])
    images = np.concatenate([orig, syn])
    labels = [r.subject_id for r in manifest.records] + syn_labels
    kinds = ["original"] * len(orig) + ["intra" if r.subject_i == r.subject_j else "inter" for r in plan.recipes]

    if args.checkpoint:
        X = extract_features(load_checkpoint(args.checkpoint), images)
    else:
        X = images.reshape(len(images), -1)
    coords, _, _, var = pca_project(X, 2)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("x\ty\tsubject\tkind\n")
        for (x, y), lab, kind in zip(coords, labels, kinds):
            fh.write(f"{x:.6g}\t{y:.6g}\t{lab}\t{kind}\n")
    print(f"wrote {len(coords)} points to {args.out}; explained variance {var[0]:.4g}, {var[1]:.4g}")


if __name__ == "__main__":
    main()
