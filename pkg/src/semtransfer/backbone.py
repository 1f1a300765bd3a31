"""Frozen ViT feature extractor.

Implements the standard pre-norm ViT forward pass (patch embedding, [CLS]
token, learned position embeddings, L transformer blocks) and exposes, for
any requested layer, the block's output tokens together with the query /
key / value projections and per-head attention maps of its self-attention
module.  The whole forward is differentiable with respect to the image
input; parameters are always frozen.

Layer indices are 1-based: layer ``l`` refers to block ``l``; its tokens are
the block output T^l, while its queries/keys/values are the projections of
the (layer-normalized) input tokens T^{l-1}.  Keys are returned as the full
d-dimensional projection with heads concatenated.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import WeightArchive, backbone_parameter_shapes, parameter_checksum
from .errors import InputError

LAYERNORM_EPS = 1e-6


@dataclass
class BackboneConfig:
    patch_size: int = 8
    num_layers: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    mlp_hidden: int = 3072
    num_positions: int = 785
    image_mean: tuple = (0.485, 0.456, 0.406)
    image_std: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 1 or self.patch_size < 1:
            raise ValueError("num_layers and patch_size must be positive")
        grid = round(math.sqrt(self.num_positions - 1))
        if grid * grid + 1 != self.num_positions:
            raise ValueError(
                f"num_positions {self.num_positions} does not correspond to a square patch grid"
            )

    @property
    def native_grid(self) -> int:
        return round(math.sqrt(self.num_positions - 1))

    @classmethod
    def from_archive_meta(cls, meta) -> "BackboneConfig":
        return cls(
            patch_size=int(meta["patch_size"]),
            num_layers=int(meta["num_layers"]),
            embed_dim=int(meta["embed_dim"]),
            num_heads=int(meta["num_heads"]),
            mlp_hidden=int(meta["mlp_hidden"]),
            num_positions=int(meta["num_positions"]),
            image_mean=tuple(meta["image_mean"]),
            image_std=tuple(meta["image_std"]),
        )


@dataclass
class LayerFeatures:
    """Per-layer capture: block output tokens plus the attention internals.

    All arrays carry a leading batch dimension; ``tokens``, ``queries``,
    ``keys`` and ``values`` are (B, n+1, d) with row 0 the [CLS] token,
    ``attention`` is (B, heads, n+1, n+1) row-stochastic maps (present only
    when attention capture was requested).
    """

    layer_index: int
    tokens: torch.Tensor
    queries: torch.Tensor
    keys: torch.Tensor
    values: torch.Tensor
    attention: Optional[torch.Tensor] = None


class _Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, need_attention=False):
        B, N, C = x.shape
        qkv = self.qkv(x)
        q, k, v = qkv.chunk(3, dim=-1)
        qh = q.view(B, N, self.num_heads, self.head_dim).transpose(1, 2)
        kh = k.view(B, N, self.num_heads, self.head_dim).transpose(1, 2)
        vh = v.view(B, N, self.num_heads, self.head_dim).transpose(1, 2)
        attn = None
        if need_attention:
            attn = ((qh @ kh.transpose(-2, -1)) * self.scale).softmax(dim=-1)
            out = attn @ vh
        else:
            out = F.scaled_dot_product_attention(qh, kh, vh)
        out = out.transpose(1, 2).reshape(B, N, C)
        return self.proj(out), (q, k, v, attn)


class _Mlp(nn.Module):
    # fc1/fc2 attribute names keep archive-compatible parameter paths
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_hidden):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.attn = _Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.mlp = _Mlp(dim, mlp_hidden)

    def forward(self, x, need_aux=False, need_attention=False):
        y, aux = self.attn(self.norm1(x), need_attention=need_attention)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, (aux if need_aux else None)


class FeatureViT(nn.Module):
    """ViT backbone with per-layer feature capture."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        c = config
        self.config = c
        self.patch_embed = nn.Module()
        self.patch_embed.proj = nn.Conv2d(3, c.embed_dim, kernel_size=c.patch_size,
                                          stride=c.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_positions, c.embed_dim))
        self.blocks = nn.ModuleList(
            [_Block(c.embed_dim, c.num_heads, c.mlp_hidden) for _ in range(c.num_layers)]
        )
        self.norm = nn.LayerNorm(c.embed_dim, eps=LAYERNORM_EPS)

    def _pos_embed_for_grid(self, gh, gw):
        g = self.config.native_grid
        if gh == g and gw == g:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        d = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, g, g, d).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(gh, gw), mode="bicubic",
                                  align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, gh * gw, d)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward_features(self, x, layers, capture_attention=False) -> Dict[int, LayerFeatures]:
        """Run the backbone on normalized input (B, 3, H, W) and capture the
        requested layers.  H and W must be multiples of the patch size."""
        c = self.config
        L = c.num_layers
        layers = sorted(set(int(l) for l in layers))
        for l in layers:
            if not 1 <= l <= L:
                raise ValueError(f"layer index {l} out of range 1..{L}")
        if x.dim() == 3:
            x = x.unsqueeze(0)
        B, _, H, W = x.shape
        if H % c.patch_size or W % c.patch_size:
            raise ValueError(
                f"input size {H}x{W} is not a multiple of patch size {c.patch_size}"
            )
        gh, gw = H // c.patch_size, W // c.patch_size

        t = self.patch_embed.proj(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(B, -1, -1), t], dim=1)
        t = t + self._pos_embed_for_grid(gh, gw)

        wanted = set(layers)
        out: Dict[int, LayerFeatures] = {}
        for i, block in enumerate(self.blocks, start=1):
            need = i in wanted
            t, aux = block(t, need_aux=need, need_attention=need and capture_attention)
            if need:
                q, k, v, attn = aux
                out[i] = LayerFeatures(layer_index=i, tokens=t, queries=q,
                                       keys=k, values=v, attention=attn)
        return out


def extract_cls(features: Dict[int, LayerFeatures], layer: int) -> torch.Tensor:
    """[CLS] row of the layer's output tokens, shape (B, d)."""
    if layer not in features:
        raise ValueError(f"layer {layer} not present in features (have {sorted(features)})")
    return features[layer].tokens[:, 0, :]


def extract_keys(features: Dict[int, LayerFeatures], layer: int) -> torch.Tensor:
    """Full-dimension key projections of the layer, shape (B, n+1, d)."""
    if layer not in features:
        raise ValueError(f"layer {layer} not present in features (have {sorted(features)})")
    return features[layer].keys


def preprocess(image: torch.Tensor, target_side: int, patch_size: int,
               mean, std) -> torch.Tensor:
    """Resize so the larger side equals ``target_side`` (bicubic, aspect
    preserved), center-crop both sides down to multiples of ``patch_size``,
    then apply the channel normalization.  Accepts (3, H, W) or (B, 3, H, W)
    and keeps the computation differentiable."""
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    B, C, H, W = x.shape
    if C != 3:
        raise ValueError(f"expected 3 channels, got {C}")
    if min(H, W) < patch_size:
        raise ValueError(f"image {H}x{W} smaller than patch size {patch_size}")
    if target_side <= patch_size:
        raise ValueError(f"target side {target_side} must exceed patch size {patch_size}")

    scale = target_side / max(H, W)
    nh, nw = max(1, round(H * scale)), max(1, round(W * scale))
    if (nh, nw) != (H, W):
        x = F.interpolate(x, size=(nh, nw), mode="bicubic", align_corners=False)
        x = x.clamp(0.0, 1.0)
    ch, cw = (nh // patch_size) * patch_size, (nw // patch_size) * patch_size
    if ch < patch_size or cw < patch_size:
        raise ValueError(f"resized image {nh}x{nw} smaller than patch size {patch_size}")
    top, left = (nh - ch) // 2, (nw - cw) // 2
    x = x[:, :, top:top + ch, left:left + cw]

    mean_t = torch.as_tensor(mean, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    std_t = torch.as_tensor(std, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    x = (x - mean_t) / std_t
    return x.squeeze(0) if single else x


class Backbone:
    """Frozen, immutable feature extractor bound to a loaded archive."""

    def __init__(self, model: FeatureViT, config: BackboneConfig, checksum: str):
        self.model = model
        self.config = config
        self.load_checksum = checksum

    @property
    def num_layers(self):
        return self.config.num_layers

    def checksum(self) -> str:
        return parameter_checksum(
            {k: v for k, v in self.model.state_dict().items()}
        )

    def preprocess(self, image, target_side=224):
        c = self.config
        return preprocess(image, target_side, c.patch_size, c.image_mean, c.image_std)

    def forward_features(self, image, layers, capture_attention=False):
        """Features at the requested layers for a preprocessed input."""
        return self.model.forward_features(image, layers,
                                           capture_attention=capture_attention)

    def features_from_raw(self, image, layers, target_side=224, capture_attention=False):
        """Convenience: preprocess a [0,1] image then extract features."""
        return self.forward_features(self.preprocess(image, target_side), layers,
                                     capture_attention=capture_attention)


def load_backbone(archive: WeightArchive, config: Optional[BackboneConfig] = None,
                  dtype: torch.dtype = torch.float32) -> Backbone:
    """Build a frozen backbone from a converted archive.

    Every expected parameter path must be present with a consistent shape;
    violations raise :class:`InputError` naming the offending path.
    """
    if config is None:
        try:
            config = BackboneConfig.from_archive_meta(archive.meta)
        except KeyError as e:
            raise InputError(f"archive metadata missing field {e}") from e
    expected = backbone_parameter_shapes(
        config.num_layers, config.embed_dim, config.num_heads, config.patch_size,
        config.num_positions, config.mlp_hidden,
    )
    for name, shape in expected.items():
        if name not in archive:
            raise InputError(f"archive is missing parameter '{name}'")
        actual = tuple(archive[name].shape)
        if actual != shape:
            raise InputError(
                f"parameter '{name}' has shape {actual}, expected {shape}"
            )

    model = FeatureViT(config)
    state = {name: torch.from_numpy(archive[name].copy()) for name in expected}
    model.load_state_dict(state, strict=True)
    model = model.to(dtype)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return Backbone(model, config, parameter_checksum(state))


def dump_features(features: Dict[int, LayerFeatures], out_dir) -> Path:
    """Write captured per-layer arrays plus a manifest to a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in sorted(features):
        feat = features[layer]
        facets = {
            "tokens": feat.tokens, "queries": feat.queries,
            "keys": feat.keys, "values": feat.values,
        }
        if feat.attention is not None:
            facets["attention"] = feat.attention
        for facet, tensor in facets.items():
            arr = tensor.detach().cpu().numpy()
            fname = f"layer{layer:02d}_{facet}.npy"
            np.save(out_dir / fname, arr)
            entries.append({
                "layer": layer, "facet": facet, "file": fname,
                "shape": list(arr.shape), "dtype": str(arr.dtype),
            })
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"arrays": entries}, indent=2))
    return out_dir
