"""Input protocol: every image is resized to 224x224, and patch-14 models
additionally get a bilinear upsample to 392x392 so all models produce the
same 28x28 patch grid.  Crops are square-resized through the same path."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .vit import MODEL_INPUT_SIDE, MODEL_SPECS

BASE_SIDE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_image(path: str | Path) -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB")


def base_frame(im: Image.Image, side: int = BASE_SIDE) -> Image.Image:
    """The 224x224 frame all masks, boxes, and evaluations live in."""
    return im.resize((side, side), Image.BILINEAR)


def to_model_tensor(im: Image.Image, model_name: str) -> torch.Tensor:
    """(1, 3, S, S) normalized tensor at the model's input side."""
    side = MODEL_INPUT_SIDE[model_name]
    base = base_frame(im)
    arr = np.asarray(base, dtype=np.float32) / 255.0
    x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
    if side != BASE_SIDE:
        x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def grid_side(model_name: str) -> int:
    return MODEL_INPUT_SIDE[model_name] // MODEL_SPECS[model_name].patch_size


def crop_tensor(
    im: Image.Image, bbox: tuple[int, int, int, int], model_name: str
) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    """Cut bbox (half-open, 224-frame coords) out of the base frame and
    resize it through the model protocol.  Degenerate or out-of-bounds boxes
    are clamped to at least 2x2 inside the frame; the effective box is
    returned alongside the tensor."""
    base = base_frame(im)
    x0, y0, x1, y1 = bbox
    x0 = min(max(int(x0), 0), BASE_SIDE - 2)
    y0 = min(max(int(y0), 0), BASE_SIDE - 2)
    x1 = min(max(int(x1), x0 + 2), BASE_SIDE)
    y1 = min(max(int(y1), y0 + 2), BASE_SIDE)
    crop = base.crop((x0, y0, x1, y1)).resize((BASE_SIDE, BASE_SIDE), Image.BILINEAR)
    side = MODEL_INPUT_SIDE[model_name]
    arr = np.asarray(crop, dtype=np.float32) / 255.0
    x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
    if side != BASE_SIDE:
        x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std, (x0, y0, x1, y1)
