"""Object-region extraction, crop-token manifests, and class assignment.

Class labels are produced in two passes: regions are cut out of the refined
binary masks and listed in a crop manifest; an external extractor computes a
CLS token per crop; the tokens are then clustered into classes and each
connected component is painted with its region's class.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .clustering import KmeansConfig, SpectralConfig, cosine_kmeans, kmeans, spectral_cluster
from .refine import _structure, connected_components
from .tensorio import FeatureGrid

CROP_FIELDS = ("image_id", "region_id", "x0", "y0", "x1", "y1", "cls_out_path")


@dataclass
class RegionCrop:
    image_id: str
    region_id: int
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open, pixel frame
    area: int


def extract_regions(
    mask: np.ndarray,
    min_area: int = 1,
    margin: float = 0.10,
    connectivity: int = 4,
) -> list[RegionCrop]:
    """One crop per connected foreground component with area >= min_area.

    The tight bounding box is expanded by ``margin`` of its size on every
    side and clamped to the image.  region_id is the component label, so the
    same mask relabels to the same ids.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    labeled, areas = connected_components(mask, connectivity)
    slices = ndimage.find_objects(labeled)
    crops: list[RegionCrop] = []
    for label, (area, sl) in enumerate(zip(areas, slices), start=1):
        if area < min_area or sl is None:
            continue
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        mx = int(round(margin * (x1 - x0)))
        my = int(round(margin * (y1 - y0)))
        bbox = (max(x0 - mx, 0), max(y0 - my, 0), min(x1 + mx, w), min(y1 + my, h))
        crops.append(RegionCrop(image_id="", region_id=label, bbox=bbox, area=int(area)))
    return crops


def regions_for_image(image_id: str, mask: np.ndarray, **kwargs) -> list[RegionCrop]:
    crops = extract_regions(mask, **kwargs)
    for c in crops:
        c.image_id = image_id
    return crops


def crop_token_relpath(image_id: str, region_id: int) -> str:
    return f"crop_tokens/{image_id}_{region_id}.lct"


def emit_crop_manifest(crops: Sequence[RegionCrop], out_path: str | Path) -> None:
    """Write the crop manifest consumed by the extractor's second pass.

    Line-delimited JSON, sorted by (image_id, region_id); identical crops
    always produce byte-identical files.
    """
    ordered = sorted(crops, key=lambda c: (c.image_id, c.region_id))
    with open(out_path, "w", encoding="utf-8") as fh:
        for c in ordered:
            x0, y0, x1, y1 = c.bbox
            fh.write(json.dumps({
                "image_id": c.image_id,
                "region_id": c.region_id,
                "x0": x0, "y0": y0, "x1": x1, "y1": y1,
                "cls_out_path": crop_token_relpath(c.image_id, c.region_id),
            }) + "\n")


def read_crop_manifest(path: str | Path) -> list[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            missing = [f for f in CROP_FIELDS if f not in obj]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields: {', '.join(missing)}")
            entries.append(obj)
    return entries


def assign_classes(
    crop_tokens: Sequence[tuple[tuple[str, int], np.ndarray]],
    num_classes: int,
    cfg: SpectralConfig | None = None,
    method: str = "spectral",
) -> dict[tuple[str, int], int]:
    """Cluster per-crop CLS tokens into num_classes object classes."""
    if len(crop_tokens) < num_classes:
        raise ValueError(
            f"only {len(crop_tokens)} crops for {num_classes} classes; "
            "lower num_classes"
        )
    keys = [k for k, _ in crop_tokens]
    tokens = np.stack([t for _, t in crop_tokens], axis=0)
    if method == "spectral":
        labels = spectral_cluster(tokens, num_classes, cfg or SpectralConfig())
    elif method == "kmeans":
        scfg = cfg or SpectralConfig()
        labels = kmeans(tokens, KmeansConfig(
            k=num_classes, max_iters=scfg.max_iters, rel_tol=scfg.rel_tol,
            restarts=scfg.restarts, seed=scfg.seed,
        )).assignments
    else:
        raise ValueError(f"unknown assignment method {method!r}")
    return {k: int(l) for k, l in zip(keys, labels)}


def render_class_mask(
    image_id: str,
    binary_mask: np.ndarray,
    regions: Sequence[RegionCrop],
    assignment: dict[tuple[str, int], int],
    connectivity: int = 4,
) -> np.ndarray:
    """Paint each foreground component with its region's class index + 1.

    Background stays 0; components too small to have a region stay 0.
    """
    binary_mask = np.asarray(binary_mask)
    labeled, _ = ndimage.label(binary_mask != 0, structure=_structure(connectivity))
    out = np.zeros(binary_mask.shape, dtype=np.int32)
    for r in regions:
        key = (image_id, r.region_id)
        if key not in assignment:
            raise ValueError(f"region {key} has no class assignment")
        out[labeled == r.region_id] = assignment[key] + 1
    return out


def cluster_foreground_tokens(
    patch_tokens: Sequence[tuple[str, FeatureGrid]],
    fg_masks: dict[str, np.ndarray],
    num_classes: int,
    cfg: KmeansConfig | None = None,
) -> dict[str, np.ndarray]:
    """Diagnostic: cluster foreground patch tokens (last-layer outputs, not
    attention features) into num_classes groups; returns per-image grids with
    -1 on background patches."""
    pooled, spans = [], []
    for image_id, grid in patch_tokens:
        fg = np.asarray(fg_masks[image_id], dtype=bool)
        vecs = grid.values[fg]
        pooled.append(vecs)
        spans.append((image_id, fg, vecs.shape[0]))
    pool = np.concatenate(pooled, axis=0) if pooled else np.empty((0, 1))
    if pool.shape[0] == 0:
        raise ValueError("no foreground patches to cluster")
    if num_classes > pool.shape[0]:
        raise ValueError(
            f"num_classes={num_classes} exceeds foreground patch count {pool.shape[0]}"
        )
    cfg = cfg or KmeansConfig(k=num_classes)
    labels = cosine_kmeans(pool, KmeansConfig(
        k=num_classes, max_iters=cfg.max_iters, rel_tol=cfg.rel_tol,
        restarts=cfg.restarts, seed=cfg.seed,
    )).assignments
    out: dict[str, np.ndarray] = {}
    offset = 0
    for image_id, fg, count in spans:
        grid = np.full(fg.shape, -1, dtype=np.int64)
        grid[fg] = labels[offset:offset + count]
        out[image_id] = grid
        offset += count
    return out
