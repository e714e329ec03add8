#!/usr/bin/env python3
"""Regenerate the frozen golden files under tests/goldens/.

The goldens pin byte-exact pipeline outputs for the canonical planted
fixture (see tests/conftest.py).  Rerun this script only when an intended
behavior change invalidates them, then review the diff.
"""
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "tests"))

from conftest import FIXTURE_SPEC, fixture_config  # noqa: E402

from clusterseg.clustering import KmeansConfig  # noqa: E402
from clusterseg.multilevel import cluster_image_level  # noqa: E402
from clusterseg.pipeline import run_eval, run_label, run_pca, run_segment  # noqa: E402
from clusterseg.synthetic import SceneSpec, answer_crop_manifest, gen_synthetic_dataset, plant_scene  # noqa: E402
from clusterseg.tensorio import FeatureGrid, write_tensor  # noqa: E402

GOLDENS = REPO / "tests" / "goldens"


def main() -> None:
    GOLDENS.mkdir(parents=True, exist_ok=True)

    # full-size single-image mask fixture (28x28x384 features)
    scene = plant_scene(SceneSpec(
        n_images=1, grid=28, dim=384, noise=0.1,
        num_superclasses=1, num_classes=1, seed=42,
    ))
    grid = FeatureGrid(scene.features["0000"]["key"])
    mask = cluster_image_level("0000", grid, KmeansConfig(k=2, seed=7))
    write_tensor(GOLDENS / "image_mask_384.lct", mask.grid.astype(np.uint8))

    # canonical fixture pipeline outputs
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data = tmp / "data"
        out = tmp / "run"
        scene = gen_synthetic_dataset(FIXTURE_SPEC, data)
        cfg = fixture_config(data, out)
        run_segment(cfg)
        status, _ = run_label(cfg)
        assert status == 2
        answer_crop_manifest(scene, out / "crops.jsonl")
        assert run_label(cfg)[0] == 0
        run_eval(cfg)
        run_pca(cfg)
        shutil.copy(out / "patch_masks" / "0000.lct", GOLDENS / "patch_mask_0000.lct")
        shutil.copy(out / "refined" / "0000.lct", GOLDENS / "refined_0000.lct")
        shutil.copy(out / "eval_report.json", GOLDENS / "eval_report.json")
        head = (out / "pca.csv").read_text().splitlines()[:41]
        (GOLDENS / "pca_head.csv").write_text("\n".join(head) + "\n")
    print(f"goldens written to {GOLDENS}")


if __name__ == "__main__":
    main()
