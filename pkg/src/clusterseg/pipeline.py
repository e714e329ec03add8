"""End-to-end runs behind the CLI subcommands: segment, label, eval, pca.

Every stage failure is re-raised as a PipelineError tagged with the stage
name.  All outputs are deterministic for a fixed config and seed.
"""
from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from . import labeling, tensorio
from .clustering import KmeansConfig, SpectralConfig, derive_seed, pca_project
from .config import RunConfig
from .evaluation import (
    ConfusionMatrix, coco_report, compute_metrics, confusion_delta, match_clusters,
)
from .multilevel import (
    BinaryPatchMask, binarize_level, cluster_category_level, cluster_dataset_level,
    cluster_image_level, combine_masks, group_by_superclass, orient_image_mask,
    select_foreground_cluster,
)
from .refine import RefineConfig, load_rgb_image, refine_pipeline, resize_nearest, save_mask_png

log = logging.getLogger(__name__)

AWAITING_CROP_TOKENS = 2


class PipelineError(RuntimeError):
    pass


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"{name}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _image_cfg(cfg: RunConfig, k: int, *salt) -> KmeansConfig:
    return KmeansConfig(
        k=k, max_iters=cfg.kmeans.max_iters, rel_tol=cfg.kmeans.rel_tol,
        restarts=cfg.kmeans.restarts_image, seed=derive_seed(cfg.seed, *salt),
    )


def _pooled_cfg(cfg: RunConfig, k: int, *salt) -> KmeansConfig:
    return KmeansConfig(
        k=k, max_iters=cfg.kmeans.max_iters, rel_tol=cfg.kmeans.rel_tol,
        restarts=cfg.kmeans.restarts_pooled, seed=derive_seed(cfg.seed, *salt),
    )


def _spectral_cfg(cfg: RunConfig, *salt) -> SpectralConfig:
    return SpectralConfig(
        sigma=cfg.spectral.sigma, max_iters=cfg.spectral.max_iters,
        rel_tol=cfg.spectral.rel_tol, restarts=cfg.spectral.restarts,
        seed=derive_seed(cfg.seed, *salt),
    )


def _refine_cfg(cfg: RunConfig) -> RefineConfig:
    r = cfg.refine
    return RefineConfig(
        out_size=r.out_size, threshold=r.threshold, min_area=r.min_area,
        connectivity=r.connectivity, crf_enabled=r.crf_enabled,
        crf_method=r.crf_method, final_cleanup=r.final_cleanup, crf=cfg.crf,
    )


def _load_grid(manifest: tensorio.DatasetManifest, entry, kind: str) -> tensorio.FeatureGrid:
    if kind not in entry.feature_paths:
        raise PipelineError(
            f"features: image {entry.image_id}: no {kind!r} feature path in manifest"
        )
    path = manifest.resolve(entry.feature_paths[kind])
    try:
        return tensorio.load_feature_grid(path)
    except (OSError, tensorio.TensorFormatError, ValueError) as exc:
        raise PipelineError(f"features: image {entry.image_id}: {exc}") from exc


def _vote_stats(vote) -> dict:
    return {
        "cluster_vote": {str(c): int(v) for c, v in vote.cluster_vote.items()},
        "fg_cluster": vote.fg_cluster,
        "confident_count": vote.confident_count,
    }


def run_segment(cfg: RunConfig) -> dict:
    """Image/category/dataset clustering, foreground voting, mask combination
    and refinement; writes patch masks, refined masks, and a run report."""
    out = Path(cfg.out)
    (out / "patch_masks").mkdir(parents=True, exist_ok=True)
    (out / "refined").mkdir(parents=True, exist_ok=True)
    manifest = tensorio.load_manifest(cfg.manifest)
    if len(manifest) == 0:
        raise PipelineError("segment: manifest has no entries")
    votes: dict[str, dict] = {}

    with _stage("image-level"):
        image_masks = {}
        for e in manifest:
            grid = _load_grid(manifest, e, cfg.feature)
            image_masks[e.image_id] = cluster_image_level(
                e.image_id, grid,
                _image_cfg(cfg, cfg.clusters[2], "image", e.image_id),
                metric=cfg.attention_metric,
            )
        image_fg = {i: orient_image_mask(m) for i, m in image_masks.items()}
    log.info("image-level masks done (%d images)", len(image_masks))

    level_fg: dict[str, dict[str, BinaryPatchMask]] = {"image": image_fg}

    if "category" in cfg.levels:
        with _stage("category-grouping"):
            tokens = [
                (e.image_id, tensorio.load_cls_token(manifest.resolve(e.cls_path)))
                for e in manifest
            ]
            grouping = group_by_superclass(
                tokens, min(cfg.num_superclasses, len(tokens)),
                _spectral_cfg(cfg, "grouping"), method=cfg.cls_method,
            )
        with _stage("category-level"):
            cat_fg: dict[str, BinaryPatchMask] = {}
            for g in range(grouping.num_groups):
                ids = [e.image_id for e in manifest if grouping.group_of[e.image_id] == g]
                if not ids:
                    continue
                named = [
                    (i, _load_grid(manifest, manifest.by_id(i), cfg.feature))
                    for i in ids
                ]
                masks = cluster_category_level(
                    named, _pooled_cfg(cfg, cfg.clusters[1], "category", g),
                    metric=cfg.attention_metric,
                )
                vote = select_foreground_cluster(masks, [image_masks[i] for i in ids])
                votes[f"category/group{g}"] = _vote_stats(vote)
                for m in masks:
                    cat_fg[m.image_id] = binarize_level(m, vote.fg_cluster)
            level_fg["category"] = cat_fg
        log.info("category-level masks done (%d groups)", grouping.num_groups)

    if "dataset" in cfg.levels:
        with _stage("dataset-level"):
            batches = cluster_dataset_level(
                manifest, _pooled_cfg(cfg, cfg.clusters[0], "dataset"),
                batch_size=cfg.batch_size, feature_kind=cfg.feature,
                metric=cfg.attention_metric,
                loader=lambda p: tensorio.load_feature_grid(p),
            )
            ds_fg: dict[str, BinaryPatchMask] = {}
            for b, masks in enumerate(batches):
                vote = select_foreground_cluster(
                    masks, [image_masks[m.image_id] for m in masks]
                )
                votes[f"dataset/batch{b}"] = _vote_stats(vote)
                for m in masks:
                    ds_fg[m.image_id] = binarize_level(m, vote.fg_cluster)
            level_fg["dataset"] = ds_fg
        log.info("dataset-level masks done (%d batches)", len(batches))

    with _stage("combine"):
        final: dict[str, BinaryPatchMask] = {}
        for e in manifest:
            i = e.image_id
            if set(cfg.levels) == {"dataset", "category", "image"}:
                final[i] = combine_masks(
                    level_fg["dataset"][i], level_fg["category"][i], level_fg["image"][i]
                )
            else:
                grid = None
                for name in cfg.levels:
                    g = level_fg[name][i].grid
                    grid = g if grid is None else (grid & g)
                final[i] = BinaryPatchMask(image_id=i, grid=grid)
            tensorio.write_tensor(
                out / "patch_masks" / f"{i}.lct", final[i].grid.astype(np.uint8)
            )

    with _stage("refine"):
        rcfg = _refine_cfg(cfg)
        for e in manifest:
            img = load_rgb_image(manifest.resolve(e.image_path), rcfg.out_size)
            refined = refine_pipeline(final[e.image_id].grid, img, rcfg)
            tensorio.write_tensor(out / "refined" / f"{e.image_id}.lct", refined)
            save_mask_png(out / "refined" / f"{e.image_id}.png", refined, scale=255)
    log.info("refined masks written to %s", out / "refined")

    report = {
        "n_images": len(manifest),
        "levels": list(cfg.levels),
        "clusters": list(cfg.clusters),
        "feature": cfg.feature,
        "seed": cfg.seed,
        "votes": votes,
    }
    _write_json(out / "segment_report.json", report)
    return report


def _expected_token_name(image_id: str, region_id: int) -> str:
    return f"{image_id}_{region_id}.lct"


def run_label(cfg: RunConfig) -> tuple[int, dict]:
    """Region extraction and class assignment.  Returns (status, report);
    status 2 means a crop manifest was emitted and crop CLS tokens from the
    extractor's second pass are still needed."""
    out = Path(cfg.out)
    manifest = tensorio.load_manifest(cfg.manifest)
    rcfg = _refine_cfg(cfg)
    min_area = rcfg.resolved_min_area()

    with _stage("regions"):
        regions: dict[str, list[labeling.RegionCrop]] = {}
        for e in manifest:
            path = out / "refined" / f"{e.image_id}.lct"
            if not path.exists():
                raise PipelineError(
                    f"regions: refined mask missing for {e.image_id}; run segment first"
                )
            mask = tensorio.read_tensor(path)
            regions[e.image_id] = labeling.regions_for_image(
                e.image_id, mask, min_area=min_area,
                margin=cfg.label.bbox_margin, connectivity=rcfg.connectivity,
            )
        all_crops = [c for crops in regions.values() for c in crops]

    token_dir = out / "crop_tokens"
    with _stage("crop-tokens"):
        expected = {
            _expected_token_name(c.image_id, c.region_id): c for c in all_crops
        }
        if token_dir.exists():
            for f in sorted(token_dir.glob("*.lct")):
                if f.name not in expected:
                    raise PipelineError(
                        f"crop-tokens: token {f.name} does not match any current "
                        "region (stale or unknown region_id)"
                    )
        missing = [
            c for c in all_crops
            if not (token_dir / _expected_token_name(c.image_id, c.region_id)).exists()
        ]

    def _write_class_masks(assignment: dict) -> None:
        (out / "class_masks").mkdir(parents=True, exist_ok=True)
        for e in manifest:
            mask = tensorio.read_tensor(out / "refined" / f"{e.image_id}.lct")
            rendered = labeling.render_class_mask(
                e.image_id, mask, regions[e.image_id], assignment,
                connectivity=rcfg.connectivity,
            )
            tensorio.write_tensor(out / "class_masks" / f"{e.image_id}.lct", rendered)
            save_mask_png(out / "class_masks" / f"{e.image_id}.png", rendered)

    if not all_crops:
        with _stage("render"):
            _write_class_masks({})
        report = {"n_crops": 0, "status": "done", "note": "no regions discovered"}
        _write_json(out / "label_report.json", report)
        return 0, report

    if missing:
        with _stage("crop-manifest"):
            labeling.emit_crop_manifest(all_crops, out / "crops.jsonl")
        log.info(
            "crop manifest written to %s; run the extractor crop pass to produce "
            "%d CLS tokens under %s", out / "crops.jsonl", len(missing), token_dir,
        )
        report = {
            "n_crops": len(all_crops),
            "missing_tokens": len(missing),
            "status": "awaiting-crop-tokens",
            "crop_manifest": "crops.jsonl",
        }
        _write_json(out / "label_report.json", report)
        return AWAITING_CROP_TOKENS, report

    with _stage("class-assignment"):
        crop_tokens = [
            ((c.image_id, c.region_id),
             tensorio.load_cls_token(token_dir / _expected_token_name(c.image_id, c.region_id)))
            for c in sorted(all_crops, key=lambda c: (c.image_id, c.region_id))
        ]
        k = cfg.num_classes
        if len(crop_tokens) < k:
            log.warning(
                "only %d crops for %d classes; lowering k", len(crop_tokens), k
            )
            k = len(crop_tokens)
        assignment = labeling.assign_classes(
            crop_tokens, k, _spectral_cfg(cfg, "classes"), method=cfg.label.method,
        )

    with _stage("render"):
        _write_class_masks(assignment)

    report = {
        "n_crops": len(all_crops),
        "num_classes": k,
        "status": "done",
    }
    _write_json(out / "label_report.json", report)
    return 0, report


def _load_gt(path: Path, out_size: int) -> np.ndarray:
    if path.suffix.lower() == ".lct":
        gt = tensorio.read_tensor(path)
    else:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I"):
                im = im.convert("L")
            gt = np.asarray(im)
    gt = np.asarray(gt)
    if gt.shape != (out_size, out_size):
        gt = resize_nearest(gt, out_size, out_size)
    return gt.astype(np.int64)


def run_eval(cfg: RunConfig) -> dict:
    """Hungarian-matched mIoU / pixel accuracy over the manifest's gt."""
    out = Path(cfg.out)
    manifest = tensorio.load_manifest(cfg.manifest)
    n_pred = cfg.num_classes + 1
    n_gt = cfg.num_gt_classes
    conf = ConfusionMatrix(n_pred, n_gt)
    skipped: list[str] = []
    evaluated = 0

    with _stage("confusion"):
        for e in manifest:
            pred_path = out / "class_masks" / f"{e.image_id}.lct"
            if e.gt_path is None or not pred_path.exists():
                skipped.append(e.image_id)
                continue
            pred = tensorio.read_tensor(pred_path)
            gt = _load_gt(Path(manifest.resolve(e.gt_path)), cfg.refine.out_size)
            conf.add(confusion_delta(
                pred, gt, n_pred, n_gt, ignore_index=cfg.eval.ignore_index
            ))
            evaluated += 1
        if evaluated == 0:
            raise PipelineError(
                "confusion: no image has both a class mask and ground truth"
            )

    with _stage("matching"):
        matching = match_clusters(conf, cfg.eval.objective, cfg.eval.pin_background)
        report = compute_metrics(conf, matching)
        coco = coco_report(report, cfg.eval.discovered_threshold)

    payload = {
        "miou": report.miou,
        "pixel_accuracy": report.pixel_accuracy,
        "per_class_iou": [float(v) for v in report.per_class_iou],
        "matching": {str(p): g for p, g in report.matching.items()},
        "discovered": report.discovered,
        "have_cluster": report.have_cluster,
        "coco": coco,
        "n_evaluated": evaluated,
        "skipped": sorted(skipped),
    }
    _write_json(out / "eval_report.json", payload)
    with open(out / "eval_report.txt", "w", encoding="utf-8") as fh:
        fh.write(f"{'class':>8}  {'IoU':>8}\n")
        for g, v in enumerate(report.per_class_iou):
            fh.write(f"{g:>8}  {v:>8.4f}\n")
        fh.write(f"\nmIoU            {report.miou:.4f}\n")
        fh.write(f"pixel accuracy  {report.pixel_accuracy:.4f}\n")
        fh.write(
            f"discovered (IoU>={cfg.eval.discovered_threshold:.2f})  "
            f"{coco['discovered']['number']}  mIoU {coco['discovered']['miou']:.4f}\n"
        )
        fh.write(
            f"have cluster (IoU>0)     "
            f"{coco['have_cluster']['number']}  mIoU {coco['have_cluster']['miou']:.4f}\n"
        )
    log.info("mIoU %.4f  PA %.4f (%d images)", report.miou, report.pixel_accuracy, evaluated)
    return payload


def _write_scatter_svg(path: Path, xy: np.ndarray, tags: list[str]) -> None:
    size, margin, r = 800, 40, 2.0
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    scaled = (xy - lo) / span * (size - 2 * margin) + margin
    colors = {"fg": "#3566c4", "bg": "#c43535", "unknown": "#888888"}
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for (x, y), tag in zip(scaled, tags):
        lines.append(
            f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="{r}" '
            f'fill="{colors.get(tag, "#888888")}" fill-opacity="0.5"/>'
        )
    lines.append("</svg>")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_pca(cfg: RunConfig) -> dict:
    """2-D projection of patch features with foreground/background tags."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = tensorio.load_manifest(cfg.manifest)
    entries = list(manifest.entries)
    if cfg.pca_max_images is not None:
        entries = entries[:cfg.pca_max_images]
    if not entries:
        raise PipelineError("pca: manifest has no entries")

    with _stage("pca"):
        pools, meta = [], []
        for e in entries:
            grid = _load_grid(manifest, e, cfg.feature)
            g = grid.grid_h
            if e.gt_path is not None:
                gt = _load_gt(Path(manifest.resolve(e.gt_path)), cfg.refine.out_size)
                patch_fg = resize_nearest(gt, g, g) > 0
                tags = np.where(patch_fg, "fg", "bg")
            else:
                tags = np.full((g, g), "unknown", dtype=object)
            pools.append(grid.flat())
            for r in range(g):
                for c in range(g):
                    meta.append((e.image_id, r, c, str(tags[r, c])))
        pool = np.concatenate(pools, axis=0)
        coords, eigvals = pca_project(pool, 2)

    with open(out / "pca.csv", "w", encoding="utf-8") as fh:
        fh.write("image_id,row,col,x,y,tag\n")
        for (image_id, r, c, tag), (x, y) in zip(meta, coords):
            fh.write(f"{image_id},{r},{c},{x:.6f},{y:.6f},{tag}\n")
    _write_scatter_svg(out / "pca.svg", coords, [m[3] for m in meta])
    total = float(eigvals.sum()) or 1.0
    payload = {
        "n_points": int(pool.shape[0]),
        "explained_variance_fraction": [float(v / total) for v in eigvals[:2]],
    }
    _write_json(out / "pca_report.json", payload)
    return payload
