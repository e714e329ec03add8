"""Run configuration: one dataclass tree, JSON config files, dotted
flag overrides (e.g. ``--crf.iterations 5``)."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .refine import CrfParams

FEATURE_KINDS = ("query", "key", "value")
LEVEL_NAMES = ("dataset", "category", "image")


@dataclass
class KmeansBlock:
    max_iters: int = 300
    rel_tol: float = 1e-4
    restarts_image: int = 10   # per-image / CLS-scale runs
    restarts_pooled: int = 3   # pooled category/dataset-scale runs


@dataclass
class SpectralBlock:
    sigma: float | None = None
    max_iters: int = 300
    rel_tol: float = 1e-4
    restarts: int = 10


@dataclass
class RefineBlock:
    out_size: int = 224
    threshold: float = 0.5
    min_area: int | None = None  # None = 1% of output area
    connectivity: int = 4
    crf_enabled: bool = True
    crf_method: str = "auto"
    final_cleanup: bool = True


@dataclass
class EvalBlock:
    objective: str = "intersection"  # intersection | iou
    pin_background: bool = True
    ignore_index: int = 255
    num_gt_classes: int | None = None  # None = num_classes + 1
    discovered_threshold: float = 0.20


@dataclass
class LabelBlock:
    bbox_margin: float = 0.10
    method: str = "spectral"  # spectral | kmeans (ablation)


@dataclass
class RunConfig:
    manifest: str = ""
    out: str = ""
    seed: int | None = None  # mandatory; every run is reproducible from it
    feature: str = "key"
    clusters: tuple[int, int, int] = (4, 3, 2)  # dataset, category, image
    num_superclasses: int = 4
    num_classes: int = 20
    batch_size: int = 1000
    levels: tuple[str, ...] = LEVEL_NAMES
    attention_metric: str = "cosine"  # cosine | euclidean (ablation)
    cls_method: str = "spectral"      # spectral | kmeans (ablation)
    pca_max_images: int | None = None
    kmeans: KmeansBlock = field(default_factory=KmeansBlock)
    spectral: SpectralBlock = field(default_factory=SpectralBlock)
    refine: RefineBlock = field(default_factory=RefineBlock)
    crf: CrfParams = field(default_factory=CrfParams)
    eval: EvalBlock = field(default_factory=EvalBlock)
    label: LabelBlock = field(default_factory=LabelBlock)

    def validate(self) -> None:
        if not self.manifest:
            raise ValueError("manifest path is required")
        if not self.out:
            raise ValueError("output directory is required")
        if self.seed is None:
            raise ValueError("seed is required (reproducibility contract)")
        if self.feature not in FEATURE_KINDS:
            raise ValueError(f"feature must be one of {FEATURE_KINDS}")
        if any(k < 1 for k in self.clusters):
            raise ValueError("cluster counts must be >= 1")
        if self.clusters[2] != 2:
            raise ValueError("image-level clustering must use 2 clusters")
        if not self.levels or any(l not in LEVEL_NAMES for l in self.levels):
            raise ValueError(f"levels must be a non-empty subset of {LEVEL_NAMES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def num_gt_classes(self) -> int:
        if self.eval.num_gt_classes is not None:
            return self.eval.num_gt_classes
        return self.num_classes + 1


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if current and isinstance(current[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    if current is None:
        if raw.lower() in ("none", "null"):
            return None
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def set_dotted(cfg: RunConfig, path: str, raw: str) -> None:
    """Apply one ``a.b.c=value`` override onto the config tree."""
    obj = cfg
    parts = path.split(".")
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise ValueError(f"unknown config section {p!r} in {path!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ValueError(f"unknown config field {path!r}")
    setattr(obj, leaf, _coerce(getattr(obj, leaf), raw))


def _apply_mapping(obj, mapping: dict, prefix: str = "") -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in mapping.items():
        if key not in names:
            raise ValueError(f"unknown config field {prefix}{key!r}")
        if isinstance(value, dict):
            _apply_mapping(getattr(obj, key), value, prefix=f"{prefix}{key}.")
        elif isinstance(value, list):
            setattr(obj, key, tuple(value))
        else:
            setattr(obj, key, value)


def load_config(path: str | Path | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            _apply_mapping(cfg, json.load(fh))
    return cfg


def config_dict(cfg) -> dict:
    """JSON-ready view of the config (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))
