"""Binary tensor files and dataset manifests.

Tensor file layout (magic "LCT1"), all integers little-endian:

    bytes 0..3   magic b"LCT1"
    byte  4      dtype code: 1 = f32, 2 = u8, 3 = i32
    byte  5      ndim (1..4)
    next         ndim x u32 dimension sizes, each >= 1
    rest         payload, row-major, little-endian

The manifest is line-delimited JSON, one entry per line, with fields
image_id, split, image_path, feature_paths, cls_path, gt_path, width,
height.  Relative paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LCT1"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<u1"), 3: np.dtype("<i4")}
_CODE_OF_DTYPE = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("int32"): 3}

_REQUIRED_FIELDS = (
    "image_id", "split", "image_path", "feature_paths",
    "cls_path", "gt_path", "width", "height",
)


class TensorFormatError(ValueError):
    """Malformed tensor file or tensor that violates the format contract."""


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


def write_tensor(path: str | Path, values: np.ndarray) -> None:
    """Write ``values`` to ``path`` in the LCT1 format.

    Accepts float32, uint8 or int32 arrays with 1 to 4 dimensions, every
    dimension >= 1.  Reading the file back yields bit-identical values.
    """
    arr = np.ascontiguousarray(values)
    if arr.dtype not in _CODE_OF_DTYPE:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; expected f32, u8 or i32")
    if not 1 <= arr.ndim <= 4:
        raise TensorFormatError(f"ndim must be in [1, 4], got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise TensorFormatError(f"every dimension must be >= 1, got shape {arr.shape}")
    header = MAGIC + struct.pack("<BB", _CODE_OF_DTYPE[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path: str | Path, strict_finite: bool = False) -> np.ndarray:
    """Read an LCT1 tensor file, the exact inverse of :func:`write_tensor`.

    With ``strict_finite`` any NaN/inf in a float payload is an error.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not an LCT1 tensor file")
    code, ndim = raw[4], raw[5]
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"{path}: ndim {ndim} outside [1, 4]")
    dims_end = 6 + 4 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", raw[6:dims_end])
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"{path}: zero-sized dimension in shape {shape}")
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = raw[dims_end:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if strict_finite and arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise TensorFormatError(f"{path}: non-finite values in strict mode")
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


@dataclass
class FeatureGrid:
    """Per-image patch features, shape (grid, grid, dim), float32, finite."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"feature grid must be 3-D, got shape {v.shape}")
        if v.shape[0] != v.shape[1]:
            raise ValueError(f"feature grid must be square, got {v.shape[0]}x{v.shape[1]}")
        if not np.isfinite(v).all():
            raise ValueError("feature grid contains non-finite values")

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        """Patches as an (grid_h * grid_w, dim) sample matrix, row-major."""
        return self.values.reshape(-1, self.values.shape[2])


def load_feature_grid(path: str | Path) -> FeatureGrid:
    arr = read_tensor(path, strict_finite=True)
    if arr.dtype != np.float32:
        raise TensorFormatError(f"{path}: feature grid must be f32, got {arr.dtype}")
    return FeatureGrid(arr)


def load_cls_token(path: str | Path) -> np.ndarray:
    """A D-dimensional f32 summary vector, strict-finite."""
    arr = read_tensor(path, strict_finite=True)
    if arr.ndim != 1 or arr.dtype != np.float32:
        raise TensorFormatError(f"{path}: CLS token must be a 1-D f32 tensor")
    return arr


@dataclass
class ManifestEntry:
    image_id: str
    split: str
    image_path: str
    feature_paths: dict[str, str]
    cls_path: str
    gt_path: str | None
    width: int
    height: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def resolve(self, path: str | Path) -> Path:
        """Resolve a manifest-relative path against the manifest directory."""
        p = Path(path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a line-delimited JSON manifest; duplicate image_id is an error."""
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [f for f in _REQUIRED_FIELDS if f not in obj]
            if missing:
                raise ManifestError(
                    f"{path}:{lineno}: missing fields: {', '.join(missing)}"
                )
            image_id = str(obj["image_id"])
            if image_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            entries.append(ManifestEntry(
                image_id=image_id,
                split=str(obj["split"]),
                image_path=str(obj["image_path"]),
                feature_paths={str(k): str(v) for k, v in obj["feature_paths"].items()},
                cls_path=str(obj["cls_path"]),
                gt_path=None if obj["gt_path"] is None else str(obj["gt_path"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
            ))
    return DatasetManifest(entries=entries, root=path.parent)


def save_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    """Write entries as line-delimited JSON in the documented field order."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({
                "image_id": e.image_id,
                "split": e.split,
                "image_path": e.image_path,
                "feature_paths": e.feature_paths,
                "cls_path": e.cls_path,
                "gt_path": e.gt_path,
                "width": e.width,
                "height": e.height,
            }) + "\n")
