"""Patch mask to pixel mask: bilinear upsampling, small-component removal,
and dense-CRF mean-field refinement.

Pixel masks are plain (H, W) integer arrays; RGB images are (H, W, 3) uint8.
The CRF runs mean-field inference with two Gaussian pairwise kernels
(appearance: position+color, smoothness: position) under a Potts model.
Messages are computed either with exact dense pairwise sums (small images)
or through a downsampled bilateral grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage


@dataclass
class CrfParams:
    iterations: int = 10
    w_appearance: float = 10.0
    w_smooth: float = 3.0
    sigma_xy_app: float = 80.0
    sigma_rgb: float = 13.0
    sigma_xy_smooth: float = 3.0
    unary_confidence: float = 0.9

    def __post_init__(self):
        positives = {
            "iterations": self.iterations,
            "w_appearance": self.w_appearance,
            "w_smooth": self.w_smooth,
            "sigma_xy_app": self.sigma_xy_app,
            "sigma_rgb": self.sigma_rgb,
            "sigma_xy_smooth": self.sigma_xy_smooth,
        }
        for name, v in positives.items():
            if v < 0 or (name.startswith("sigma") and v == 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if not 0.5 < self.unary_confidence < 1.0:
            raise ValueError(
                f"unary_confidence must lie in (0.5, 1), got {self.unary_confidence}"
            )


@dataclass
class RefineConfig:
    out_size: int = 224
    threshold: float = 0.5
    min_area: int | None = None  # None = 1% of output area
    connectivity: int = 4
    crf_enabled: bool = True
    crf_method: str = "auto"  # auto | exact | lattice
    final_cleanup: bool = True
    crf: CrfParams = field(default_factory=CrfParams)

    def resolved_min_area(self) -> int:
        if self.min_area is not None:
            return self.min_area
        return int(round(0.01 * self.out_size * self.out_size))


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation of a 2-D float field, align-corners=false."""
    src = np.asarray(src, dtype=np.float64)
    in_h, in_w = src.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    return (
        src[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + src[np.ix_(y0, x1)] * (1 - wy) * wx
        + src[np.ix_(y1, x0)] * wy * (1 - wx)
        + src[np.ix_(y1, x1)] * wy * wx
    )


def upsample_bilinear(
    patch_grid: np.ndarray, out_w: int, out_h: int, threshold: float = 0.5
) -> np.ndarray:
    """Treat a boolean patch grid as a {0,1} field, interpolate, threshold.

    Returns a (out_h, out_w) uint8 mask; field values >= threshold are
    foreground.
    """
    grid = np.asarray(patch_grid)
    if out_h < grid.shape[0] or out_w < grid.shape[1]:
        raise ValueError("output size must not be smaller than the patch grid")
    fld = bilinear_resize(grid.astype(np.float64), out_h, out_w)
    return (fld >= threshold).astype(np.uint8)


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor label resize (pixel-center convention, no mixing)."""
    labels = np.asarray(labels)
    in_h, in_w = labels.shape
    sy = np.minimum(((np.arange(out_h) + 0.5) * (in_h / out_h)).astype(np.int64), in_h - 1)
    sx = np.minimum(((np.arange(out_w) + 0.5) * (in_w / out_w)).astype(np.int64), in_w - 1)
    return labels[np.ix_(sy, sx)]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(
    mask: np.ndarray, connectivity: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Label foreground components (1..C); returns (labels, areas) where
    areas[i] is the pixel count of component i+1."""
    labeled, n = ndimage.label(np.asarray(mask) != 0, structure=_structure(connectivity))
    areas = np.bincount(labeled.ravel(), minlength=n + 1)[1:]
    return labeled, areas


def remove_small_components(
    mask: np.ndarray, min_area: int, connectivity: int = 4
) -> np.ndarray:
    """Zero out every foreground component smaller than min_area pixels."""
    labeled, areas = connected_components(mask, connectivity)
    if labeled.max() == 0:
        return (np.asarray(mask) != 0).astype(np.uint8)
    keep = np.concatenate([[False], areas >= min_area])
    return keep[labeled].astype(np.uint8)


def load_rgb_image(path, out_size: int | None = None) -> np.ndarray:
    """Decode a PNG/JPEG to (H, W, 3) uint8, optionally bilinear-resized to
    out_size x out_size."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if out_size is not None and im.size != (out_size, out_size):
            im = im.resize((out_size, out_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def save_mask_png(path, mask: np.ndarray, scale: int = 1) -> None:
    """Write a label map as 8-bit single-channel PNG (values scaled)."""
    arr = (np.asarray(mask) * scale).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# dense CRF mean field
# ---------------------------------------------------------------------------


def unary_from_mask(mask: np.ndarray, confidence: float) -> np.ndarray:
    """Negative log-likelihood unary for a binary mask, shape (n, 2)."""
    m = np.asarray(mask).ravel().astype(bool)
    u = np.empty((m.size, 2), dtype=np.float64)
    on, off = -np.log(confidence), -np.log1p(-confidence)
    u[:, 0] = np.where(m, off, on)
    u[:, 1] = np.where(m, on, off)
    return u


def _softmax_neg(energy: np.ndarray) -> np.ndarray:
    q = np.exp(-(energy - energy.min(axis=1, keepdims=True)))
    return q / q.sum(axis=1, keepdims=True)


def _pixel_coords(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)


class _DenseKernel:
    """Exact pairwise Gaussian kernel, O(n^2) memory; small images only."""

    def __init__(self, feats: np.ndarray):
        d2 = np.sum(feats ** 2, axis=1)
        sq = d2[:, None] + d2[None, :] - 2.0 * (feats @ feats.T)
        self.k = np.exp(-np.maximum(sq, 0.0) / 2.0)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.k @ values


class _SpatialKernel:
    """Separable truncated Gaussian over the pixel lattice (unnormalized)."""

    def __init__(self, h: int, w: int, sigma: float):
        self.h, self.w = h, w
        radius = max(int(np.ceil(4.0 * sigma)), 1)
        t = np.arange(-radius, radius + 1, dtype=np.float64)
        self.kernel = np.exp(-(t ** 2) / (2.0 * sigma ** 2))

    def apply(self, values: np.ndarray) -> np.ndarray:
        out = np.empty_like(values)
        for l in range(values.shape[1]):
            img = values[:, l].reshape(self.h, self.w)
            img = ndimage.correlate1d(img, self.kernel, axis=0, mode="constant")
            img = ndimage.correlate1d(img, self.kernel, axis=1, mode="constant")
            out[:, l] = img.ravel()
        return out


class _BilateralLattice:
    """Splat/blur/slice approximation of a Gaussian kernel on arbitrary
    feature points, on a grid downsampled to ``cells_per_sigma`` cells per
    unit standard deviation."""

    def __init__(self, feats: np.ndarray, cells_per_sigma: float = 1.0):
        n, f = feats.shape
        s = cells_per_sigma
        scaled = feats * s
        # blur compensates for the variance the two tent filters add; the
        # constant-mode correlation needs no grid padding
        blur_var = max(s * s - 1.0 / 3.0, 1e-3)
        radius = max(int(np.ceil(3.0 * np.sqrt(blur_var))), 1)
        t = np.arange(-radius, radius + 1, dtype=np.float64)
        self.kernel = np.exp(-(t ** 2) / (2.0 * blur_var))

        lo = scaled.min(axis=0)
        coords = scaled - lo
        base = np.floor(coords).astype(np.int64)
        frac = coords - base
        self.shape = tuple(int(b) for b in base.max(axis=0) + 2)
        strides = np.ones(f, dtype=np.int64)
        for d in range(f - 2, -1, -1):
            strides[d] = strides[d + 1] * self.shape[d + 1]
        corners = np.array(
            [[(c >> d) & 1 for d in range(f)] for c in range(2 ** f)], dtype=np.int64
        )
        # (n, 2^f) flat indices and multilinear weights, fixed across iterations
        self.idx = (base[:, None, :] + corners[None, :, :]) @ strides
        w = np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        self.weights = np.prod(w, axis=2)
        self.ncells = int(np.prod(self.shape))

    def apply(self, values: np.ndarray) -> np.ndarray:
        flat_idx = self.idx.ravel()
        out = np.empty_like(values)
        for l in range(values.shape[1]):
            contrib = (self.weights * values[:, l][:, None]).ravel()
            grid = np.bincount(flat_idx, weights=contrib, minlength=self.ncells)
            grid = grid.reshape(self.shape)
            for axis in range(grid.ndim):
                grid = ndimage.correlate1d(grid, self.kernel, axis=axis, mode="constant")
            out[:, l] = np.sum(self.weights * grid.ravel()[self.idx], axis=1)
        return out


def _build_kernels(image: np.ndarray, params: CrfParams, method: str):
    h, w = image.shape[:2]
    coords = _pixel_coords(h, w)
    app_feats = np.concatenate(
        [coords / params.sigma_xy_app,
         image.reshape(-1, 3).astype(np.float64) / params.sigma_rgb],
        axis=1,
    )
    if method == "exact":
        sm_feats = coords / params.sigma_xy_smooth
        return _DenseKernel(app_feats), _DenseKernel(sm_feats)
    return _BilateralLattice(app_feats), _SpatialKernel(h, w, params.sigma_xy_smooth)


def mean_field(
    unary: np.ndarray,
    kernels: list[tuple[float, object]],
    iterations: int,
    trace: list | None = None,
) -> np.ndarray:
    """Potts-model mean-field updates; returns the final Q, rows normalized."""
    q = _softmax_neg(unary)
    for _ in range(iterations):
        pairwise = np.zeros_like(unary)
        for weight, kernel in kernels:
            if weight == 0.0:
                continue
            msg = kernel.apply(q) - q  # k(i,i) = 1 contributes Q_i itself
            pairwise += weight * (msg.sum(axis=1, keepdims=True) - msg)
        q = _softmax_neg(unary + pairwise)
        if trace is not None:
            trace.append(q.copy())
    return q


def crf_refine(
    mask: np.ndarray,
    image: np.ndarray,
    params: CrfParams | None = None,
    method: str = "auto",
    trace: list | None = None,
) -> np.ndarray:
    """Refine a binary mask against its image with dense-CRF mean field.

    method: "exact" computes O(n^2) pairwise sums, "lattice" the bilateral
    grid approximation, "auto" picks exact for images up to 64x64.
    """
    params = params or CrfParams()
    mask = np.asarray(mask)
    image = np.asarray(image)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} vs image {image.shape[:2]} mismatch")
    if method not in ("auto", "exact", "lattice"):
        raise ValueError(f"unknown CRF method {method!r}")
    if method == "auto":
        method = "exact" if mask.size <= 64 * 64 else "lattice"
    unary = unary_from_mask(mask, params.unary_confidence)
    app, smooth = _build_kernels(image, params, method)
    q = mean_field(
        unary,
        [(params.w_appearance, app), (params.w_smooth, smooth)],
        params.iterations,
        trace=trace,
    )
    return np.argmax(q, axis=1).reshape(mask.shape).astype(np.uint8)


def refine_pipeline(
    patch_grid: np.ndarray,
    image: np.ndarray,
    cfg: RefineConfig | None = None,
) -> np.ndarray:
    """upsample -> drop small components -> CRF -> final cleanup."""
    cfg = cfg or RefineConfig()
    min_area = cfg.resolved_min_area()
    up = upsample_bilinear(patch_grid, cfg.out_size, cfg.out_size, cfg.threshold)
    out = remove_small_components(up, min_area, cfg.connectivity)
    if cfg.crf_enabled:
        out = crf_refine(out, image, cfg.crf, method=cfg.crf_method)
    if cfg.final_cleanup:
        out = remove_small_components(out, min_area, cfg.connectivity)
    return out
