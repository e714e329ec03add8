import numpy as np
import pytest

from clusterseg.config import RunConfig
from clusterseg.synthetic import SceneSpec, gen_synthetic_dataset

# canonical planted fixture shared by pipeline tests and the frozen goldens
# (scripts/freeze_goldens.py re-generates the goldens from these values)
FIXTURE_SPEC = SceneSpec(
    n_images=10, grid=14, dim=16, noise=0.0,
    num_superclasses=2, num_classes=4, image_size=112, seed=7,
)
FIXTURE_SEED = 11


def same_partition(a, b) -> bool:
    """True when two label vectors induce the same partition (up to renaming)."""
    a = np.asarray(a)
    b = np.asarray(b)
    fwd, bwd = {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


def fixture_config(root, out, **overrides) -> RunConfig:
    cfg = RunConfig(
        manifest=str(root / "manifest.jsonl"),
        out=str(out),
        seed=FIXTURE_SEED,
        num_superclasses=FIXTURE_SPEC.num_superclasses,
        num_classes=FIXTURE_SPEC.num_classes,
    )
    cfg.refine.out_size = FIXTURE_SPEC.image_size
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def fixture_scene(tmp_path_factory):
    """Small noiseless planted dataset shared by pipeline-level tests."""
    root = tmp_path_factory.mktemp("planted")
    scene = gen_synthetic_dataset(FIXTURE_SPEC, root)
    return scene, root


@pytest.fixture(scope="session")
def full_run(fixture_scene, tmp_path_factory):
    """One complete segment -> label -> label -> eval -> pca run."""
    from clusterseg.pipeline import run_eval, run_label, run_pca, run_segment
    from clusterseg.synthetic import answer_crop_manifest

    scene, root = fixture_scene
    out = tmp_path_factory.mktemp("run")
    cfg = fixture_config(root, out)
    run_segment(cfg)
    status, _ = run_label(cfg)
    assert status == 2
    answer_crop_manifest(scene, out / "crops.jsonl")
    status, _ = run_label(cfg)
    assert status == 0
    run_eval(cfg)
    run_pca(cfg)
    return scene, root, out, cfg
