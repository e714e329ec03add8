#!/usr/bin/env python3
"""Ablation grid runner: cluster counts, level subsets, feature kinds and
clustering techniques, each as an independent run with shared data.

Synthetic mode (default) generates a planted dataset and answers its own
crop passes:

    python3 scripts/run_ablations.py --out /tmp/abl --noise 0.15

On a real manifest (features from the extractor), runs that stop awaiting
crop tokens are reported; produce the tokens with

    vitextract extract-crops --manifest <data> --crop-manifest <run>/crops.jsonl

and rerun to resume.
"""
import argparse
import dataclasses
import json
from pathlib import Path

from clusterseg.config import RunConfig
from clusterseg.pipeline import run_eval, run_label, run_segment
from clusterseg.synthetic import SceneSpec, answer_crop_manifest, gen_synthetic_dataset

GRID = {
    "clusters": [(4, 3, 2), (3, 3, 2), (4, 4, 2), (5, 3, 2)],
    "levels": [("dataset",), ("dataset", "category"), ("dataset", "category", "image")],
    "feature": ["query", "key", "value"],
    "technique": [("cosine", "spectral"), ("cosine", "kmeans"),
                  ("euclidean", "spectral"), ("euclidean", "kmeans")],
}


def run_one(base: RunConfig, name: str, scene=None, **overrides) -> dict | None:
    cfg = dataclasses.replace(base)
    cfg.out = str(Path(base.out) / name)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    run_segment(cfg)
    status, _ = run_label(cfg)
    if status == 2:
        if scene is None:
            print(f"{name}: awaiting crop tokens ({cfg.out}/crops.jsonl)")
            return None
        answer_crop_manifest(scene, Path(cfg.out) / "crops.jsonl")
        status, _ = run_label(cfg)
    assert status == 0
    report = run_eval(cfg)
    return {"miou": report["miou"], "pixel_accuracy": report["pixel_accuracy"]}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--manifest", help="real dataset manifest; omit for synthetic")
    ap.add_argument("--n-images", type=int, default=20)
    ap.add_argument("--noise", type=float, default=0.15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--num-classes", type=int, default=20)
    ap.add_argument("--num-superclasses", type=int, default=4)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = None
    if args.manifest:
        manifest = args.manifest
        num_classes, num_superclasses = args.num_classes, args.num_superclasses
    else:
        spec = SceneSpec(
            n_images=args.n_images, grid=28, dim=32, noise=args.noise,
            num_superclasses=2, num_classes=4, image_size=224, seed=args.seed,
        )
        scene = gen_synthetic_dataset(spec, out / "data")
        manifest = str(out / "data" / "manifest.jsonl")
        num_classes, num_superclasses = 4, 2

    base = RunConfig(
        manifest=manifest, out=str(out), seed=args.seed,
        num_classes=num_classes, num_superclasses=num_superclasses,
    )

    results = {}
    for clusters in GRID["clusters"]:
        name = "clusters_" + "-".join(map(str, clusters))
        results[name] = run_one(base, name, scene, clusters=clusters)
    for levels in GRID["levels"]:
        name = "levels_" + "+".join(levels)
        results[name] = run_one(base, name, scene, levels=levels)
    for feature in GRID["feature"]:
        results[f"feature_{feature}"] = run_one(
            base, f"feature_{feature}", scene, feature=feature
        )
    for attention_metric, cls_method in GRID["technique"]:
        name = f"technique_{attention_metric}+{cls_method}"
        results[name] = run_one(
            base, name, scene,
            attention_metric=attention_metric, cls_method=cls_method,
        )

    with open(out / "ablation_summary.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    width = max(len(k) for k in results)
    print(f"{'run':<{width}}  {'mIoU':>8}  {'PA':>8}")
    for name, r in results.items():
        if r is None:
            print(f"{name:<{width}}  {'awaiting tokens':>19}")
        else:
            print(f"{name:<{width}}  {r['miou']:>8.4f}  {r['pixel_accuracy']:>8.4f}")


if __name__ == "__main__":
    main()
