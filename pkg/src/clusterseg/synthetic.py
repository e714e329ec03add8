"""Deterministic planted-scene fixtures.

Every image carries one rectangular foreground object whose patch features
sit near a shared foreground direction while background patches sit near
three mutually-close background directions, so foreground/background
separation is recoverable by clustering.  CLS tokens sit near superclass
centers, crop tokens near class centers.  All generators are pure functions
of the seed.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensorio
from .labeling import read_crop_manifest
from .refine import upsample_bilinear
from .tensorio import ManifestEntry

FEATURE_KINDS = ("query", "key", "value")

_PALETTE = [
    (220, 60, 60), (60, 210, 60), (70, 90, 230), (230, 220, 70),
    (220, 70, 220), (70, 220, 220), (240, 150, 70), (150, 70, 240),
]
_BG_COLOR = (35, 35, 35)


@dataclass
class SceneSpec:
    n_images: int = 20
    grid: int = 28
    dim: int = 32
    noise: float = 0.1
    num_superclasses: int = 2
    num_classes: int = 4
    image_size: int = 224
    seed: int = 0

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError("feature dim must be >= 4")
        if self.dim < max(self.num_classes, self.num_superclasses):
            raise ValueError("dim too small for orthogonal class centers")
        if self.n_images < self.num_classes:
            raise ValueError("need at least one image per class")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    fg_direction: np.ndarray
    bg_directions: np.ndarray          # (3, dim)
    class_centers: np.ndarray          # (num_classes, dim)
    superclass_centers: np.ndarray     # (num_superclasses, dim)
    image_ids: list[str]
    class_of: dict[str, int]
    superclass_of: dict[str, int]
    fg_rects: dict[str, tuple[int, int, int, int]]  # (r0, c0, r1, c1) patch units
    patch_masks: dict[str, np.ndarray] = field(default_factory=dict)
    features: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    cls_tokens: dict[str, np.ndarray] = field(default_factory=dict)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _directions(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Foreground direction orthogonal to a tight cluster of 3 bg directions."""
    e = np.eye(dim)
    fg = e[0]
    a = 0.5
    bg = np.stack([
        _unit(e[1] + a * e[2]),
        _unit(e[1] + a * e[3]),
        _unit(e[1] + a * (e[2] + e[3]) / np.sqrt(2.0)),
    ])
    return fg.astype(np.float64), bg.astype(np.float64)


def _orthonormal_centers(k: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xC3])
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:, :k].T.copy()


def _image_rng(seed: int, image_id: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode()), salt])


def plant_scene(spec: SceneSpec) -> SyntheticScene:
    """Build the full scene in memory (features, CLS tokens, patch masks)."""
    fg_dir, bg_dirs = _directions(spec.dim)
    class_centers = _orthonormal_centers(spec.num_classes, spec.dim, spec.seed)
    super_centers = _orthonormal_centers(
        spec.num_superclasses, spec.dim, spec.seed + 1
    )
    ids = [f"{i:04d}" for i in range(spec.n_images)]
    scene = SyntheticScene(
        spec=spec,
        fg_direction=fg_dir,
        bg_directions=bg_dirs,
        class_centers=class_centers,
        superclass_centers=super_centers,
        image_ids=ids,
        class_of={},
        superclass_of={},
        fg_rects={},
    )
    g = spec.grid
    for i, image_id in enumerate(ids):
        cls = i % spec.num_classes
        scene.class_of[image_id] = cls
        scene.superclass_of[image_id] = cls % spec.num_superclasses
        rng = _image_rng(spec.seed, image_id)

        # rectangle kept 2 patches off every border so corners stay background
        side_min, side_max = max(g // 5, 2), max(g // 2, 3)
        h = int(rng.integers(side_min, side_max + 1))
        w = int(rng.integers(side_min, side_max + 1))
        r0 = int(rng.integers(2, g - h - 1))
        c0 = int(rng.integers(2, g - w - 1))
        rect = (r0, c0, r0 + h, c0 + w)
        scene.fg_rects[image_id] = rect
        mask = np.zeros((g, g), dtype=bool)
        mask[r0:r0 + h, c0:c0 + w] = True
        scene.patch_masks[image_id] = mask

        bg_pick = rng.integers(0, 3, size=(g, g))
        dirs = bg_dirs[bg_pick]
        dirs[mask] = fg_dir
        scales = rng.uniform(0.5, 2.0, size=(g, g, 1))
        feats = {}
        for kind in FEATURE_KINDS:
            noise = rng.standard_normal((g, g, spec.dim)) * spec.noise
            feats[kind] = ((dirs + noise) * scales).astype(np.float32)
        scene.features[image_id] = feats

        cls_noise = rng.standard_normal(spec.dim) * spec.noise
        scene.cls_tokens[image_id] = (
            super_centers[scene.superclass_of[image_id]] + cls_noise
        ).astype(np.float32)
    return scene


def gt_pixel_mask(scene: SyntheticScene, image_id: str) -> np.ndarray:
    """Ground truth at evaluation resolution: upsampled rect painted with
    the image's class index + 1."""
    size = scene.spec.image_size
    up = upsample_bilinear(scene.patch_masks[image_id], size, size)
    return (up.astype(np.int32) * (scene.class_of[image_id] + 1))


def render_image(scene: SyntheticScene, image_id: str) -> np.ndarray:
    """RGB rendering: flat class color on the object, flat dark background,
    plus noise-scaled pixel jitter."""
    size = scene.spec.image_size
    up = upsample_bilinear(scene.patch_masks[image_id], size, size).astype(bool)
    color = np.array(_PALETTE[scene.class_of[image_id] % len(_PALETTE)], dtype=np.float64)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = np.array(_BG_COLOR, dtype=np.float64)
    img[up] = color
    rng = _image_rng(scene.spec.seed, image_id, salt=1)
    img += rng.standard_normal(img.shape) * (scene.spec.noise * 60.0)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def gen_synthetic_dataset(spec: SceneSpec, out_dir: str | Path) -> SyntheticScene:
    """Write manifest + feature/CLS tensors + gt masks + PNG images."""
    out = Path(out_dir)
    for sub in ("images", "feats", "cls", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scene = plant_scene(spec)
    entries = []
    for image_id in scene.image_ids:
        img = render_image(scene, image_id)
        Image.fromarray(img, mode="RGB").save(out / "images" / f"{image_id}.png")
        feature_paths = {}
        for kind in FEATURE_KINDS:
            rel = f"feats/{image_id}_{kind}.lct"
            tensorio.write_tensor(out / rel, scene.features[image_id][kind])
            feature_paths[kind] = rel
        tensorio.write_tensor(out / "cls" / f"{image_id}.lct", scene.cls_tokens[image_id])
        tensorio.write_tensor(out / "gt" / f"{image_id}.lct", gt_pixel_mask(scene, image_id))
        entries.append(ManifestEntry(
            image_id=image_id,
            split="val",
            image_path=f"images/{image_id}.png",
            feature_paths=feature_paths,
            cls_path=f"cls/{image_id}.lct",
            gt_path=f"gt/{image_id}.lct",
            width=spec.image_size,
            height=spec.image_size,
        ))
    tensorio.save_manifest(entries, out / "manifest.jsonl")
    return scene


def answer_crop_manifest(scene: SyntheticScene, crop_manifest_path: str | Path) -> int:
    """Stand-in for the extractor's crop pass: write one CLS token per crop,
    drawn near the class center of the crop's image.  Returns the number of
    tokens written."""
    crop_manifest_path = Path(crop_manifest_path)
    root = crop_manifest_path.parent
    entries = read_crop_manifest(crop_manifest_path)
    for e in entries:
        image_id = str(e["image_id"])
        cls = scene.class_of[image_id]
        rng = np.random.default_rng(
            [scene.spec.seed, zlib.crc32(image_id.encode()), 2, int(e["region_id"])]
        )
        token = scene.class_centers[cls] + rng.standard_normal(scene.spec.dim) * scene.spec.noise
        out_path = root / e["cls_out_path"]
        out_path.parent.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(out_path, token.astype(np.float32))
    return len(entries)
