"""Minimal ViT reimplementation with QKV capture at the final block.

Covers the two architectures this tool supports: DINO ViT-S/8 (plain
pre-norm blocks) and DINOv2 ViT-S/14 (LayerScale, optional register
tokens).  State dicts from the official releases load directly; common
checkpoint wrappers ("teacher", "module.", "backbone." ...) are unwrapped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class VitSpec:
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: float = 4.0
    layerscale: bool = False
    num_register_tokens: int = 0
    native_img_size: int = 224


MODEL_SPECS = {
    "dino_vits8": VitSpec(patch_size=8, embed_dim=384, depth=12, num_heads=6),
    "dino_vits16": VitSpec(patch_size=16, embed_dim=384, depth=12, num_heads=6),
    "dinov2_vits14": VitSpec(
        patch_size=14, embed_dim=384, depth=12, num_heads=6,
        layerscale=True, native_img_size=518,
    ),
    # tiny configuration for fast tests
    "vit_test8": VitSpec(patch_size=8, embed_dim=32, depth=2, num_heads=4,
                         native_img_size=64),
}

# model input side per the resize protocol: 28x28 patch grids either way
MODEL_INPUT_SIDE = {
    "dino_vits8": 224,
    "dino_vits16": 224,
    "dinov2_vits14": 392,
    "vit_test8": 64,
}


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, capture: dict | None = None):
        b, n, d = x.shape
        qkv = self.qkv(x)
        if capture is not None:
            # per-token projections, heads concatenated (raw linear layout)
            capture["query"], capture["key"], capture["value"] = (
                t.detach() for t in qkv.chunk(3, dim=-1)
            )
        qkv = qkv.reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(init * torch.ones(dim))

    def forward(self, x):
        return x * self.gamma


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, layerscale: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls1 = LayerScale(dim) if layerscale else nn.Identity()
        self.ls2 = LayerScale(dim) if layerscale else nn.Identity()

    def forward(self, x, capture: dict | None = None):
        x = x + self.ls1(self.attn(self.norm1(x), capture=capture))
        return x + self.ls2(self.mlp(self.norm2(x)))


class VisionTransformer(nn.Module):
    def __init__(self, spec: VitSpec):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        self.patch_embed_proj = nn.Conv2d(3, d, spec.patch_size, spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        n_native = (spec.native_img_size // spec.patch_size) ** 2
        self.pos_embed = nn.Parameter(torch.zeros(1, n_native + 1, d))
        if spec.num_register_tokens:
            self.register_tokens = nn.Parameter(
                torch.zeros(1, spec.num_register_tokens, d)
            )
        self.blocks = nn.ModuleList(
            Block(d, spec.num_heads, spec.mlp_ratio, spec.layerscale)
            for _ in range(spec.depth)
        )
        self.norm = nn.LayerNorm(d, eps=1e-6)

    def _pos_embed_for(self, grid: int) -> torch.Tensor:
        n = self.pos_embed.shape[1] - 1
        native = int(math.isqrt(n))
        if native == grid:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        d = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, native, native, d).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(
            patch_pos, size=(grid, grid), mode="bicubic", align_corners=False
        )
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid * grid, d)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward_features(self, images: torch.Tensor) -> dict:
        """images: (B, 3, S, S) with S a multiple of the patch size.

        Returns grids of shape (B, g, g, D) for query/key/value/patch plus
        (B, D) CLS tokens; q/k/v come from the final block's projections.
        """
        b, _, h, w = images.shape
        if h != w or h % self.spec.patch_size:
            raise ValueError(f"input side {h}x{w} incompatible with patch "
                             f"size {self.spec.patch_size}")
        grid = h // self.spec.patch_size
        x = self.patch_embed_proj(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = x + self._pos_embed_for(grid)
        n_reg = self.spec.num_register_tokens
        if n_reg:
            x = torch.cat(
                [x[:, :1], self.register_tokens.expand(b, -1, -1), x[:, 1:]], dim=1
            )
        capture: dict = {}
        for i, block in enumerate(self.blocks):
            x = block(x, capture=capture if i == len(self.blocks) - 1 else None)
        x = self.norm(x)
        d = self.spec.embed_dim

        def to_grid(tokens):
            return tokens[:, 1 + n_reg:].reshape(b, grid, grid, d)

        return {
            "query": to_grid(capture["query"]),
            "key": to_grid(capture["key"]),
            "value": to_grid(capture["value"]),
            "patch": to_grid(x),
            "cls": x[:, 0],
        }


def _unwrap_state_dict(obj) -> dict:
    if isinstance(obj, dict):
        for key in ("teacher", "model", "state_dict"):
            if key in obj and isinstance(obj[key], dict):
                return _unwrap_state_dict(obj[key])
    return obj


_KEY_RENAMES = {"patch_embed.proj": "patch_embed_proj"}


def _map_key(key: str) -> str | None:
    for prefix in ("module.", "backbone."):
        if key.startswith(prefix):
            key = key[len(prefix):]
    if key.startswith("head.") or key.startswith("mask_token"):
        return None
    for old, new in _KEY_RENAMES.items():
        if key.startswith(old):
            key = new + key[len(old):]
    return key


def load_checkpoint(model: VisionTransformer, path: str) -> None:
    """Load an official DINO / DINOv2 state dict from a local file."""
    raw = torch.load(path, map_location="cpu", weights_only=True)
    state = {}
    for key, value in _unwrap_state_dict(raw).items():
        mapped = _map_key(key)
        if mapped is not None:
            state[mapped] = value
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:8]} ...")
    if unexpected:
        raise ValueError(f"checkpoint has unknown parameters: {sorted(unexpected)[:8]} ...")


def build_model(
    name: str,
    checkpoint: str | None = None,
    random_init: bool = False,
    seed: int = 0,
) -> VisionTransformer:
    if name not in MODEL_SPECS:
        raise ValueError(f"unknown model {name!r}; choices: {sorted(MODEL_SPECS)}")
    model = VisionTransformer(MODEL_SPECS[name])
    if checkpoint:
        load_checkpoint(model, checkpoint)
    elif random_init:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
    else:
        raise ValueError(
            "no weights: pass checkpoint=<path to official state dict> or "
            "random_init=True (testing only)"
        )
    model.eval()
    return model
