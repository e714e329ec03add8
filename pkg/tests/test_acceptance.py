"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line.  Run with ``pytest tests/test_acceptance.py -s``."""
import itertools
import shutil
import time

import numpy as np

from clusterseg.clustering import (
    KmeansConfig, cosine_kmeans, kmeans, l2_normalize,
)
from clusterseg.config import RunConfig
from clusterseg.evaluation import hungarian_match
from clusterseg.multilevel import (
    BinaryPatchMask, LevelMask, cluster_category_level, cluster_image_level,
    combine_masks, select_foreground_cluster,
)
from clusterseg.oracles import oracle_assignment, oracle_dense_crf
from clusterseg.pipeline import run_eval, run_label, run_segment
from clusterseg.refine import CrfParams, crf_refine
from clusterseg.synthetic import SceneSpec, answer_crop_manifest, gen_synthetic_dataset, plant_scene
from clusterseg.tensorio import FeatureGrid


def _verdict(name, ok):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    assert ok, name


def test_criterion_unit_vector_identity():
    t0 = time.time()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10_000, 2, 8))
    x /= np.linalg.norm(x, axis=2, keepdims=True)
    sq = np.sum((x[:, 0] - x[:, 1]) ** 2, axis=1)
    dots = np.einsum("ij,ij->i", x[:, 0], x[:, 1])
    worst = float(np.max(np.abs(sq - 2.0 * (1.0 - dots))))
    elapsed = time.time() - t0
    _verdict(
        f"unit-vector identity |x1-x2|^2 = 2(1-x1.x2) within 1e-5 over 1e4 "
        f"trials ({worst:.2e} worst, {elapsed:.2f}s)",
        worst < 1e-5 and elapsed < 1.0,
    )


def test_criterion_cosine_kmeans_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(1)
    ok = True
    for trial in range(100):
        n = int(rng.integers(8, 60))
        d = int(rng.integers(2, 12))
        k = int(rng.integers(2, min(n, 6)))
        m = rng.standard_normal((n, d))
        m[np.linalg.norm(m, axis=1) < 1e-6] += 1.0
        cfg = KmeansConfig(k=k, seed=trial, restarts=3)
        a = cosine_kmeans(m, cfg).assignments
        b = kmeans(l2_normalize(m), cfg).assignments
        ok &= bool(np.array_equal(a, b))
    elapsed = time.time() - t0
    _verdict(
        f"cosine k-means assignments identical to Euclidean k-means on "
        f"normalized inputs, 100 datasets ({elapsed:.2f}s)",
        ok and elapsed < 10.0,
    )


def test_criterion_hungarian_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2)
    ok = True
    for trial in range(500):
        n = int(rng.integers(1, 8))
        if trial % 3 == 0:
            score = rng.integers(0, 4, (n, n)).astype(float)  # force ties
        else:
            score = rng.random((n, n)) * rng.uniform(0.5, 20)
        ok &= hungarian_match(score) == oracle_assignment(score)
    elapsed = time.time() - t0
    _verdict(
        f"Hungarian matches factorial enumeration on 500 matrices n<=7 "
        f"({elapsed:.2f}s)",
        ok and elapsed < 30.0,
    )


def test_criterion_mask_conjunction():
    ok = True
    for d, c, i in itertools.product([False, True], repeat=3):
        out = combine_masks(
            BinaryPatchMask("x", np.array([[d]])),
            BinaryPatchMask("x", np.array([[c]])),
            BinaryPatchMask("x", np.array([[i]])),
        )
        ok &= bool(out.grid[0, 0]) == (d and c and i)
    rng = np.random.default_rng(3)
    for _ in range(200):
        d, c, i = (rng.random((8, 8)) < 0.5 for _ in range(3))
        out = combine_masks(
            BinaryPatchMask("x", d), BinaryPatchMask("x", c), BinaryPatchMask("x", i)
        ).grid
        ok &= not np.any(out & ~d) and not np.any(out & ~c) and not np.any(out & ~i)
    _verdict(
        "mask conjunction matches the 8-row truth table and output is a "
        "subset of every input",
        ok,
    )


def _planted_vote_case(seed):
    spec = SceneSpec(n_images=8, grid=10, dim=12, noise=0.1,
                     num_superclasses=1, num_classes=1, seed=seed)
    scene = plant_scene(spec)
    named = [(i, FeatureGrid(scene.features[i]["key"])) for i in scene.image_ids]
    level = cluster_category_level(named, KmeansConfig(k=4, seed=seed, restarts=3))
    image = [
        cluster_image_level(i, g, KmeansConfig(k=2, seed=seed + 1))
        for i, g in named
    ]
    # independent truth: the cluster whose centroid points along the planted
    # foreground direction
    pool = np.concatenate([g.flat() for _, g in named])
    labels = np.concatenate([m.grid.ravel() for m in level])
    sims = []
    for c in range(4):
        centroid = pool[labels == c].mean(axis=0)
        centroid /= np.linalg.norm(centroid)
        sims.append(float(centroid @ scene.fg_direction))
    truth = int(np.argmax(sims))
    return level, image, truth


def test_criterion_foreground_vote_recovery():
    t0 = time.time()
    hits = 0
    for seed in range(50):
        level, image, truth = _planted_vote_case(seed)
        vote = select_foreground_cluster(level, image)
        hits += int(vote.fg_cluster == truth)
    # label-permutation equivariance on a few cases
    equivariant = True
    perm = [2, 3, 1, 0]
    for seed in (0, 17, 41):
        level, image, _ = _planted_vote_case(seed)
        base = select_foreground_cluster(level, image).fg_cluster
        relabeled = [
            LevelMask(m.image_id, m.level, np.array(perm)[m.grid], m.k)
            for m in level
        ]
        out = select_foreground_cluster(relabeled, image).fg_cluster
        equivariant &= out == perm[base]
    elapsed = time.time() - t0
    _verdict(
        f"foreground vote recovers the planted cluster {hits}/50 seeds and is "
        f"relabel-equivariant ({elapsed:.2f}s)",
        hits == 50 and equivariant,
    )


def test_criterion_crf_correctness():
    rng = np.random.default_rng(4)
    # zero-pairwise identity, exact
    mask = (rng.random((24, 24)) < 0.4).astype(np.uint8)
    image = rng.integers(0, 256, (24, 24, 3)).astype(np.uint8)
    zero = CrfParams(iterations=5, w_appearance=0.0, w_smooth=0.0)
    identity_ok = all(
        np.array_equal(crf_refine(mask, image, zero, method=m), mask)
        for m in ("exact", "lattice")
    )
    # Q normalization every iteration
    params = CrfParams(iterations=8, w_appearance=10.0, w_smooth=3.0,
                       sigma_xy_app=8.0, sigma_rgb=13.0, sigma_xy_smooth=2.0)
    norm_ok = True
    for method in ("exact", "lattice"):
        trace = []
        crf_refine(mask, image, params, method=method, trace=trace)
        norm_ok &= all(np.max(np.abs(q.sum(axis=1) - 1.0)) < 1e-6 for q in trace)
    # lattice vs exact dense oracle at 32x32
    truth = np.zeros((32, 32), dtype=np.uint8)
    truth[8:24, 10:26] = 1
    img = np.full((32, 32, 3), 40.0)
    img[truth.astype(bool)] = (200, 80, 60)
    img = np.clip(img + rng.normal(0, 8, img.shape), 0, 255).astype(np.uint8)
    noisy = truth.copy()
    flip = rng.random((32, 32)) < 0.05
    noisy[flip] = 1 - noisy[flip]
    agree = float(np.mean(
        oracle_dense_crf(noisy, img, params)
        == crf_refine(noisy, img, params, method="lattice")
    ))
    _verdict(
        f"CRF: zero-pairwise identity, Q rows normalized within 1e-6, lattice "
        f"vs exact 32x32 oracle agreement {agree:.3f}",
        identity_ok and norm_ok and agree >= 0.99,
    )


def _pipeline_miou(tmp_path, noise, seed):
    spec = SceneSpec(n_images=20, grid=28, dim=32, noise=noise,
                     num_superclasses=2, num_classes=4, image_size=224,
                     seed=seed)
    data = tmp_path / f"data_{noise}"
    scene = gen_synthetic_dataset(spec, data)
    cfg = RunConfig(
        manifest=str(data / "manifest.jsonl"), out=str(tmp_path / f"run_{noise}"),
        seed=5, num_superclasses=2, num_classes=4,
    )
    cfg.validate()
    run_segment(cfg)
    status, _ = run_label(cfg)
    if status == 2:
        answer_crop_manifest(scene, cfg.out + "/crops.jsonl")
        status, _ = run_label(cfg)
    assert status == 0
    return run_eval(cfg)["miou"]


def test_criterion_end_to_end_synthetic(tmp_path):
    t0 = time.time()
    clean = _pipeline_miou(tmp_path, 0.0, seed=21)
    noisy = _pipeline_miou(tmp_path, 0.1, seed=22)
    elapsed = time.time() - t0
    _verdict(
        f"end-to-end planted pipeline: noiseless mIoU {clean:.4f} (== 1.0), "
        f"sigma=0.1 mIoU {noisy:.4f} (>= 0.95) in {elapsed:.1f}s",
        clean == 1.0 and noisy >= 0.95 and elapsed < 120.0,
    )


def test_criterion_full_determinism(tmp_path):
    from conftest import FIXTURE_SPEC, fixture_config

    data = tmp_path / "data"
    scene = gen_synthetic_dataset(FIXTURE_SPEC, data)
    out = tmp_path / "run"

    def run_once():
        cfg = fixture_config(data, out)
        run_segment(cfg)
        status, _ = run_label(cfg)
        assert status == 2
        answer_crop_manifest(scene, out / "crops.jsonl")
        assert run_label(cfg)[0] == 0
        run_eval(cfg)
        return {
            p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file()
        }

    first = run_once()
    shutil.rmtree(out)
    second = run_once()
    same = first.keys() == second.keys() and all(
        first[k] == second[k] for k in first
    )
    _verdict(
        f"same seed twice: {len(first)} output files byte-identical",
        same,
    )
