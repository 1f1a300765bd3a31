"""Seeded view sampling: the internal-example generator for single-pair training.

Structure views get square random crops, horizontal flips, color jitter and
Gaussian blur; appearance views only crops and flips.  Every draw comes from
an explicit ``torch.Generator`` so the whole augmentation stream is
reproducible from the run seed.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

logger = logging.getLogger(__name__)


@dataclass
class AugmentationPolicy:
    crop_fraction_range: Tuple[float, float] = (0.95, 1.00)  # of image height
    flip_prob: float = 0.5
    jitter_prob: float = 0.5          # structure views only
    brightness_range: Tuple[float, float] = (0.8, 1.2)
    contrast_range: Tuple[float, float] = (0.8, 1.2)
    saturation_range: Tuple[float, float] = (0.8, 1.2)
    hue_range: Tuple[float, float] = (-0.05, 0.05)
    blur_prob: float = 0.5            # structure views only
    blur_kernel: int = 3
    blur_sigma_range: Tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        lo, hi = self.crop_fraction_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_fraction_range must lie in (0,1], got {self.crop_fraction_range}")
        slo, shi = self.blur_sigma_range
        if not (0.0 < slo <= shi):
            raise ValueError(f"blur_sigma_range must be positive, got {self.blur_sigma_range}")
        if self.blur_kernel % 2 != 1:
            raise ValueError("blur_kernel must be odd")


@dataclass
class ViewParams:
    """One sampled augmentation draw, sufficient to reproduce the view."""

    crop_size: int
    top: int
    left: int
    flip: bool
    brightness: Optional[float] = None
    contrast: Optional[float] = None
    saturation: Optional[float] = None
    hue: Optional[float] = None
    blur_sigma: Optional[float] = None


def _uniform(gen, lo, hi):
    return lo + (hi - lo) * torch.rand((), generator=gen).item()


def _bernoulli(gen, p):
    return torch.rand((), generator=gen).item() < p


def sample_view_params(policy: AugmentationPolicy, height: int, width: int,
                       gen: torch.Generator, structure: bool) -> ViewParams:
    """Draw crop/flip(/jitter/blur) parameters for one view."""
    lo, hi = policy.crop_fraction_range
    n = int(round(_uniform(gen, lo, hi) * height))
    n = max(1, min(n, height))
    if n > width:
        logger.warning("crop size %d exceeds image width %d; clamping", n, width)
        n = width
    top = int(torch.randint(0, height - n + 1, (), generator=gen))
    left = int(torch.randint(0, width - n + 1, (), generator=gen))
    flip = _bernoulli(gen, policy.flip_prob)
    params = ViewParams(crop_size=n, top=top, left=left, flip=flip)
    if structure:
        if _bernoulli(gen, policy.jitter_prob):
            params.brightness = _uniform(gen, *policy.brightness_range)
            params.contrast = _uniform(gen, *policy.contrast_range)
            params.saturation = _uniform(gen, *policy.saturation_range)
            params.hue = _uniform(gen, *policy.hue_range)
        if _bernoulli(gen, policy.blur_prob):
            params.blur_sigma = _uniform(gen, *policy.blur_sigma_range)
    return params


def gaussian_kernel(size: int, sigma: float) -> torch.Tensor:
    """Normalized 1D Gaussian filter taps (sums to 1)."""
    half = size // 2
    x = torch.arange(-half, half + 1, dtype=torch.float32)
    k = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _blur(img: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    k1 = gaussian_kernel(size, sigma).to(img.dtype)
    k2 = torch.outer(k1, k1)
    kernel = k2.expand(3, 1, size, size)
    pad = size // 2
    x = F.pad(img.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(x, kernel, groups=3).squeeze(0)


def apply_view(image: torch.Tensor, params: ViewParams,
               policy: AugmentationPolicy) -> torch.Tensor:
    """Apply a sampled draw to a (3, H, W) image in [0,1]."""
    n, t, l = params.crop_size, params.top, params.left
    out = image[:, t:t + n, l:l + n]
    if params.flip:
        out = torch.flip(out, dims=[-1])
    if params.brightness is not None:
        out = TF.adjust_brightness(out, params.brightness)
        out = TF.adjust_contrast(out, params.contrast)
        out = TF.adjust_saturation(out, params.saturation)
        out = TF.adjust_hue(out, params.hue)
    if params.blur_sigma is not None:
        out = _blur(out, policy.blur_kernel, params.blur_sigma)
    return out.clamp(0.0, 1.0)


def sample_structure_view(image: torch.Tensor, policy: AugmentationPolicy,
                          gen: torch.Generator) -> torch.Tensor:
    """Augmented structure view: crop, flip, color jitter, blur."""
    _check_image(image)
    params = sample_view_params(policy, image.shape[-2], image.shape[-1], gen,
                                structure=True)
    return apply_view(image, params, policy)


def sample_appearance_view(image: torch.Tensor, policy: AugmentationPolicy,
                           gen: torch.Generator) -> torch.Tensor:
    """Augmented appearance view: crop and flip only."""
    _check_image(image)
    params = sample_view_params(policy, image.shape[-2], image.shape[-1], gen,
                                structure=False)
    return apply_view(image, params, policy)


def _check_image(image):
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {tuple(image.shape)}")
    if image.shape[-2] < 16:
        raise ValueError(f"image height {image.shape[-2]} below minimum of 16")
