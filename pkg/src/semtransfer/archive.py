"""Named-tensor weight archives.

A single ``.npz`` file holds every parameter under its path name
(``blocks.{i}.attn.qkv.weight`` etc.) together with a JSON metadata record
that stores the backbone geometry and the per-channel normalization
statistics the weights were trained with.  The same container format is
reused for generator checkpoints.
"""

import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np
import torch

from .errors import InputError

META_KEY = "__meta__"
FORMAT_VERSION = 1

# Normalization used by the published self-supervised ViT checkpoints.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# embed_dim -> head count for the published ViT variants; other widths need
# an explicit head count at conversion time.
KNOWN_HEAD_COUNTS = {384: 6, 768: 12, 1024: 16}


def backbone_parameter_shapes(num_layers, embed_dim, num_heads, patch_size, num_positions, mlp_hidden=None):
    """Expected parameter path -> shape map for a ViT backbone archive."""
    d = embed_dim
    h = mlp_hidden if mlp_hidden is not None else 4 * d
    shapes = {
        "cls_token": (1, 1, d),
        "pos_embed": (1, num_positions, d),
        "patch_embed.proj.weight": (d, 3, patch_size, patch_size),
        "patch_embed.proj.bias": (d,),
        "norm.weight": (d,),
        "norm.bias": (d,),
    }
    for i in range(num_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,), p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (3 * d, d), p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,), p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (h, d), p + "mlp.fc1.bias": (h,),
            p + "mlp.fc2.weight": (d, h), p + "mlp.fc2.bias": (d,),
        })
    return shapes


def parameter_checksum(params) -> str:
    """Order-independent sha256 over parameter names and raw float bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class WeightArchive:
    """In-memory view of a named-tensor container: ``params`` maps parameter
    paths to float32 numpy arrays, ``meta`` is a JSON-serializable dict."""

    def __init__(self, params, meta):
        self.params = {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}
        self.meta = dict(meta)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    @property
    def parameter_count(self):
        return int(sum(v.size for v in self.params.values()))

    def checksum(self) -> str:
        return parameter_checksum(self.params)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = dict(self.params)
        meta = dict(self.meta)
        meta["format_version"] = FORMAT_VERSION
        payload[META_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **payload)

    @classmethod
    def load(cls, path) -> "WeightArchive":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"weight archive not found: {path}")
        try:
            with np.load(path) as data:
                if META_KEY not in data:
                    raise InputError(f"{path} is not a weight archive (missing metadata record)")
                meta = json.loads(bytes(data[META_KEY].tobytes()).decode())
                params = {k: data[k] for k in data.files if k != META_KEY}
        except InputError:
            raise
        except Exception as e:
            raise InputError(f"cannot read weight archive {path}: {e}") from e
        return cls(params, meta)


def _infer_num_heads(embed_dim, num_heads):
    if num_heads is not None:
        return int(num_heads)
    if embed_dim in KNOWN_HEAD_COUNTS:
        return KNOWN_HEAD_COUNTS[embed_dim]
    raise InputError(
        f"cannot infer head count for embed_dim={embed_dim}; pass num_heads explicitly"
    )


def convert_vit_checkpoint(source, num_heads=None, image_mean=IMAGENET_MEAN,
                           image_std=IMAGENET_STD) -> WeightArchive:
    """Convert a published self-supervised ViT checkpoint into a WeightArchive.

    ``source`` is a path to a torch checkpoint file (a plain backbone state
    dict, as published for the ViT-B/8 model) or an already-loaded mapping.
    Geometry (layer count, embed dim, patch size) is read from the tensors;
    the head count comes from the known variant table unless given.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            raise InputError(f"checkpoint file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise InputError(f"cannot parse checkpoint {path}: {e}") from e
    else:
        state = source
    if isinstance(state, dict) and "state_dict" in state and "cls_token" not in state:
        state = state["state_dict"]
    if not isinstance(state, dict) or not state:
        raise InputError("checkpoint does not contain a parameter dictionary")

    state = {k: v for k, v in state.items()}
    for required in ("cls_token", "pos_embed", "patch_embed.proj.weight"):
        if required not in state:
            raise InputError(
                f"unrecognized checkpoint layout: missing '{required}'; "
                f"found keys like {sorted(state)[:5]}"
            )

    embed_dim = int(state["cls_token"].shape[-1])
    patch_size = int(state["patch_embed.proj.weight"].shape[-1])
    num_positions = int(state["pos_embed"].shape[1])
    block_ids = set()
    for k in state:
        if k.startswith("blocks."):
            block_ids.add(int(k.split(".")[1]))
    num_layers = (max(block_ids) + 1) if block_ids else 0
    if num_layers == 0:
        raise InputError("unrecognized checkpoint layout: no 'blocks.{i}.*' parameters")
    mlp_hidden = int(state[f"blocks.0.mlp.fc1.weight"].shape[0])
    heads = _infer_num_heads(embed_dim, num_heads)

    expected = backbone_parameter_shapes(num_layers, embed_dim, heads, patch_size,
                                         num_positions, mlp_hidden)
    missing = sorted(set(expected) - set(state))
    if missing:
        raise InputError(f"unrecognized checkpoint layout: missing keys {missing}")
    params = {}
    for name, shape in expected.items():
        arr = state[name].detach().cpu().numpy().astype(np.float32)
        if tuple(arr.shape) != shape:
            raise InputError(
                f"parameter '{name}' has shape {tuple(arr.shape)}, expected {shape}"
            )
        params[name] = arr
    extra = sorted(set(state) - set(expected))
    meta = {
        "kind": "vit_backbone",
        "patch_size": patch_size,
        "num_layers": num_layers,
        "embed_dim": embed_dim,
        "num_heads": heads,
        "mlp_hidden": mlp_hidden,
        "num_positions": num_positions,
        "image_mean": list(image_mean),
        "image_std": list(image_std),
        "ignored_source_keys": extra,
    }
    return WeightArchive(params, meta)


def _trunc_normal(shape, std, gen):
    # resample-outside-2-std truncation, matching the usual ViT init
    t = torch.empty(shape).normal_(0.0, std, generator=gen)
    while True:
        bad = t.abs() > 2 * std
        if not bad.any():
            return t
        t[bad] = torch.empty(int(bad.sum())).normal_(0.0, std, generator=gen)


def synthetic_vit_state_dict(num_layers=12, embed_dim=768, patch_size=8,
                             grid_size=28, mlp_ratio=4, seed=0):
    """Random backbone state dict in the published checkpoint layout.

    Used by tests and offline demos when the real pretrained checkpoint is
    not on disk; the geometry defaults match the ViT-B/8 configuration.
    """
    gen = torch.Generator().manual_seed(seed)
    d = embed_dim
    hidden = int(mlp_ratio * d)
    state = {
        "cls_token": _trunc_normal((1, 1, d), 0.02, gen),
        "pos_embed": _trunc_normal((1, 1 + grid_size * grid_size, d), 0.02, gen),
        "patch_embed.proj.weight": _trunc_normal((d, 3, patch_size, patch_size), 0.02, gen),
        "patch_embed.proj.bias": torch.zeros(d),
        "norm.weight": torch.ones(d),
        "norm.bias": torch.zeros(d),
    }
    for i in range(num_layers):
        p = f"blocks.{i}."
        state[p + "norm1.weight"] = torch.ones(d)
        state[p + "norm1.bias"] = torch.zeros(d)
        state[p + "attn.qkv.weight"] = _trunc_normal((3 * d, d), 0.02, gen)
        state[p + "attn.qkv.bias"] = torch.zeros(3 * d)
        state[p + "attn.proj.weight"] = _trunc_normal((d, d), 0.02, gen)
        state[p + "attn.proj.bias"] = torch.zeros(d)
        state[p + "norm2.weight"] = torch.ones(d)
        state[p + "norm2.bias"] = torch.zeros(d)
        state[p + "mlp.fc1.weight"] = _trunc_normal((hidden, d), 0.02, gen)
        state[p + "mlp.fc1.bias"] = torch.zeros(hidden)
        state[p + "mlp.fc2.weight"] = _trunc_normal((d, hidden), 0.02, gen)
        state[p + "mlp.fc2.bias"] = torch.zeros(d)
    return state


def synthetic_backbone_archive(num_layers=12, embed_dim=768, num_heads=None,
                               patch_size=8, grid_size=28, mlp_ratio=4,
                               seed=0, calibrated=False) -> WeightArchive:
    """Converted archive built from :func:`synthetic_vit_state_dict`.

    ``calibrated=True`` nudges the random weights toward trained-backbone
    feature statistics.  A fresh init responds to image content almost
    exclusively through its keys: the [CLS] token barely moves between
    images while random keys are near-orthogonal, so self-similarity
    distances dwarf [CLS] distances and the transfer objective degenerates.
    Two edits fix the balance without touching the attention pattern:

    * the last block's output projections are scaled up, amplifying how
      far the final [CLS] token travels between images;
    * every block's key bias is pointed along one shared unit vector, so
      keys concentrate in a cone the way trained keys do (a shift common
      to all keys adds a row-constant term to the attention logits, which
      the softmax cancels).
    """
    state = synthetic_vit_state_dict(num_layers, embed_dim, patch_size,
                                     grid_size, mlp_ratio, seed)
    if calibrated:
        d = embed_dim
        last = f"blocks.{num_layers - 1}."
        state[last + "attn.proj.weight"] = state[last + "attn.proj.weight"] * 100.0
        state[last + "mlp.fc2.weight"] = state[last + "mlp.fc2.weight"] * 100.0
        direction = torch.randn(d, generator=torch.Generator().manual_seed(seed + 42))
        direction = direction / direction.norm()
        for i in range(num_layers):
            bias = state[f"blocks.{i}.attn.qkv.bias"].clone()
            bias[d:2 * d] = 2.0 * direction
            state[f"blocks.{i}.attn.qkv.bias"] = bias
    if num_heads is None and embed_dim not in KNOWN_HEAD_COUNTS:
        num_heads = max(h for h in (1, 2, 4, 8) if embed_dim % h == 0)
    return convert_vit_checkpoint(state, num_heads=num_heads)
