"""The two extraction passes: whole-image features and per-crop CLS tokens.

Outputs use the LCT1 tensor format plus the line-delimited JSON manifest
schema the clustering engine consumes (fields image_id, split, image_path,
feature_paths, cls_path, gt_path, width, height).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import lct, protocol
from .vit import VisionTransformer, build_model

log = logging.getLogger(__name__)

FEATURE_KINDS = ("query", "key", "value", "patch")
CROP_FIELDS = ("image_id", "region_id", "x0", "y0", "x1", "y1", "cls_out_path")


@dataclass
class ExtractorConfig:
    model: str = "dinov2_vits14"
    feature_kinds: tuple[str, ...] = ("key",)
    checkpoint: str | None = None
    random_init: bool = False
    head_averaged: bool = False
    seed: int = 0
    device: str = "cpu"
    out_dir: str = "features"

    def __post_init__(self):
        bad = [k for k in self.feature_kinds if k not in FEATURE_KINDS]
        if bad:
            raise ValueError(f"unknown feature kinds {bad}; choices {FEATURE_KINDS}")


@dataclass
class ImageRecord:
    image_id: str
    image_path: str
    gt_path: str | None = None
    split: str = "val"


def _torch_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(max(torch.get_num_threads(), 1))


def make_model(cfg: ExtractorConfig) -> VisionTransformer:
    _torch_determinism(cfg.seed)
    model = build_model(
        cfg.model, checkpoint=cfg.checkpoint,
        random_init=cfg.random_init, seed=cfg.seed,
    )
    return model.to(cfg.device)


def _maybe_head_average(grid: torch.Tensor, num_heads: int, enabled: bool) -> torch.Tensor:
    if not enabled:
        return grid
    g1, g2, d = grid.shape
    return grid.reshape(g1, g2, num_heads, d // num_heads).mean(dim=2)


def gather_images(images_dir: str | None, input_list: str | None) -> list[ImageRecord]:
    if (images_dir is None) == (input_list is None):
        raise ValueError("pass exactly one of images_dir / input_list")
    if images_dir is not None:
        paths = sorted(
            p for p in Path(images_dir).iterdir()
            if p.suffix.lower() in (".jpg", ".jpeg", ".png")
        )
        return [ImageRecord(image_id=p.stem, image_path=str(p)) for p in paths]
    records = []
    with open(input_list, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(ImageRecord(
                image_id=str(obj["image_id"]),
                image_path=str(obj["image_path"]),
                gt_path=obj.get("gt_path"),
                split=str(obj.get("split", "val")),
            ))
    return records


def extract_image_features(cfg: ExtractorConfig, records: list[ImageRecord]) -> Path:
    """Pass 1: per-image Q/K/V(/patch) grids + CLS tokens + manifest.

    Unreadable images are skipped with a warning and left out of the
    manifest.  Returns the manifest path.
    """
    model = make_model(cfg)
    out = Path(cfg.out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    (out / "cls").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        try:
            im = protocol.load_image(rec.image_path)
        except Exception as exc:
            log.warning("skipping %s: %s", rec.image_id, exc)
            continue
        width, height = im.size
        x = protocol.to_model_tensor(im, cfg.model).to(cfg.device)
        with torch.inference_mode():
            feats = model.forward_features(x)
        feature_paths = {}
        for kind in cfg.feature_kinds:
            grid = _maybe_head_average(
                feats[kind][0], model.spec.num_heads, cfg.head_averaged
            )
            rel = f"feats/{rec.image_id}_{kind}.lct"
            lct.write_tensor(out / rel, grid.cpu().numpy().astype(np.float32))
            feature_paths[kind] = rel
        cls_rel = f"cls/{rec.image_id}.lct"
        lct.write_tensor(out / cls_rel, feats["cls"][0].cpu().numpy().astype(np.float32))
        entries.append({
            "image_id": rec.image_id,
            "split": rec.split,
            "image_path": str(Path(rec.image_path).resolve()),
            "feature_paths": feature_paths,
            "cls_path": cls_rel,
            "gt_path": rec.gt_path,
            "width": width,
            "height": height,
        })
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    log.info("wrote %d entries to %s", len(entries), manifest_path)
    return manifest_path


def _read_jsonl(path: str | Path, required: tuple[str, ...]) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            missing = [f for f in required if f not in obj]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing {', '.join(missing)}")
            rows.append(obj)
    return rows


def extract_crop_tokens(
    cfg: ExtractorConfig, dataset_manifest: str | Path, crop_manifest: str | Path
) -> int:
    """Pass 2: one CLS token per crop-manifest row, written to cls_out_path
    (resolved against the crop manifest's directory)."""
    model = make_model(cfg)
    crop_root = Path(crop_manifest).parent
    data_root = Path(dataset_manifest).parent
    by_id = {}
    for row in _read_jsonl(dataset_manifest, ("image_id", "image_path")):
        path = Path(row["image_path"])
        by_id[str(row["image_id"])] = path if path.is_absolute() else data_root / path
    crops = _read_jsonl(crop_manifest, CROP_FIELDS)
    written = 0
    for row in crops:
        image_id = str(row["image_id"])
        if image_id not in by_id:
            raise ValueError(f"crop references unknown image_id {image_id!r}")
        im = protocol.load_image(by_id[image_id])
        bbox = (row["x0"], row["y0"], row["x1"], row["y1"])
        x, effective = protocol.crop_tensor(im, bbox, cfg.model)
        if effective != tuple(int(v) for v in bbox):
            log.warning("crop %s/%s clamped from %s to %s",
                        image_id, row["region_id"], bbox, effective)
        with torch.inference_mode():
            feats = model.forward_features(x.to(cfg.device))
        out_path = Path(row["cls_out_path"])
        if not out_path.is_absolute():
            out_path = crop_root / out_path
        out_path.parent.mkdir(parents=True, exist_ok=True)
        lct.write_tensor(out_path, feats["cls"][0].cpu().numpy().astype(np.float32))
        written += 1
    log.info("wrote %d crop tokens", written)
    return written
