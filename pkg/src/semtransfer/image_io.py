"""Image file I/O: 8-bit PNG/JPEG on disk, float tensors in [0,1] in memory."""

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError


def load_image(path) -> torch.Tensor:
    """Load a PNG/JPEG file as a (3, H, W) float32 tensor with values in [0,1]."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as e:
        raise InputError(f"cannot decode image {path}: {e}") from e
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path) -> None:
    """Save a (3, H, W) tensor in [0,1] as an 8-bit image file."""
    if img.dim() == 4:
        if img.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {img.shape[0]}")
        img = img[0]
    if img.dim() != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) tensor, got {tuple(img.shape)}")
    arr = img.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).cpu().numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def validate_image(img: torch.Tensor) -> torch.Tensor:
    """Check the (3, H, W), finite, [0,1] contract for raw input images."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image tensor, got {tuple(img.shape)}")
    if not torch.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    return img


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_sha256(t: torch.Tensor) -> str:
    """Content hash of a tensor, used for provenance records."""
    arr = np.ascontiguousarray(t.detach().cpu().numpy())
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
