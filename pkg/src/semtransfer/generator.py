"""Trainable image-to-image generator.

A 5-level encoder / symmetric decoder convolutional network: 3x3 convolutions
with batch normalization and leaky-ReLU activations, stride-2 downsampling in
the encoder, nearest-neighbor upsampling in the decoder, a 1x1-projected skip
connection from every encoder level into the matching decoder level, and a
sigmoid on the final 1x1 convolution so outputs always land in [0,1].
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Set

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import WeightArchive, parameter_checksum
from .errors import InputError

CHECKPOINT_FORMAT_VERSION = 1
DOWNSAMPLE_FACTOR = 16  # four stride-2 steps between the five levels


@dataclass
class GeneratorConfig:
    encoder_channels: tuple = (3, 16, 32, 64, 128, 128)
    kernel_size: int = 3
    skip_kernel_size: int = 1
    leaky_slope: float = 0.2
    pad_inputs: bool = True  # reflection-pad to a multiple of 16, crop back
    seed: int = 0

    def __post_init__(self):
        ch = tuple(int(c) for c in self.encoder_channels)
        if len(ch) != 6:
            raise ValueError(
                f"encoder_channels must list 5 levels (6 entries), got {len(ch) - 1}"
            )
        if ch[0] != 3:
            raise ValueError("first encoder channel count must be 3 (RGB input)")
        if any(c < 1 for c in ch):
            raise ValueError("channel counts must be positive")
        self.encoder_channels = ch

    @property
    def decoder_channels(self):
        # reversed encoder widths, dropping the RGB entry
        return tuple(reversed(self.encoder_channels[1:]))


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel, stride, slope):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class UNetGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        k, sk, slope = config.kernel_size, config.skip_kernel_size, config.leaky_slope

        self.encoder = nn.ModuleList()
        for i in range(5):
            stride = 1 if i == 0 else 2
            self.encoder.append(_ConvBlock(ch[i], ch[i + 1], k, stride, slope))
        self.skips = nn.ModuleList(
            [nn.Conv2d(ch[i + 1], ch[i + 1], sk, padding=sk // 2) for i in range(5)]
        )

        dec = config.decoder_channels  # (128, 128, 64, 32, 16)
        self.decoder = nn.ModuleList()
        prev = ch[5]
        for i in range(5):
            skip_ch = ch[5 - i]
            self.decoder.append(_ConvBlock(prev + skip_ch, dec[i], k, 1, slope))
            prev = dec[i]
        self.out_conv = nn.Conv2d(dec[-1], 3, 1)

    def forward(self, x, disable_skips: Optional[Set[int]] = None):
        """Map (B, 3, H, W) to (B, 3, H, W) in [0,1].

        ``disable_skips`` zeroes the named skip connections (levels 1..5);
        it exists for ablation experiments only.
        """
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        _, _, H, W = x.shape
        hpad = (-H) % DOWNSAMPLE_FACTOR
        wpad = (-W) % DOWNSAMPLE_FACTOR
        if hpad or wpad:
            if not self.config.pad_inputs:
                raise ValueError(
                    f"input size {H}x{W} is not a multiple of {DOWNSAMPLE_FACTOR} "
                    "and input padding is disabled"
                )
            if hpad >= H or wpad >= W:
                raise ValueError(f"input size {H}x{W} too small to reflection-pad")
            x = F.pad(x, (0, wpad, 0, hpad), mode="reflect")

        disable_skips = disable_skips or set()
        feats = []
        h = x
        for block in self.encoder:
            h = block(h)
            feats.append(h)
        skips = []
        for level, (proj, f) in enumerate(zip(self.skips, feats), start=1):
            s = proj(f)
            if level in disable_skips:
                s = torch.zeros_like(s)
            skips.append(s)

        h = feats[-1]
        for i, block in enumerate(self.decoder):
            skip = skips[4 - i]
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        out = torch.sigmoid(self.out_conv(h))
        if hpad or wpad:
            out = out[:, :, :H, :W]
        return out.squeeze(0) if single else out


def init_generator(config: GeneratorConfig) -> UNetGenerator:
    """Build a generator with parameters fully determined by ``config.seed``.

    Convolution weights get Kaiming fan-in scaling for the leaky slope,
    biases start at zero, normalization layers at identity.
    """
    model = UNetGenerator(config)
    gen = torch.Generator().manual_seed(config.seed)
    gain = math.sqrt(2.0 / (1.0 + config.leaky_slope ** 2))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = gain / math.sqrt(fan_in)
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return model


def _config_to_dict(config: GeneratorConfig):
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder_channels": list(config.encoder_channels),
        "kernel_size": config.kernel_size,
        "skip_kernel_size": config.skip_kernel_size,
        "leaky_slope": config.leaky_slope,
        "pad_inputs": config.pad_inputs,
        "seed": config.seed,
    }


def _config_from_dict(d) -> GeneratorConfig:
    return GeneratorConfig(
        encoder_channels=tuple(d["encoder_channels"]),
        kernel_size=int(d["kernel_size"]),
        skip_kernel_size=int(d["skip_kernel_size"]),
        leaky_slope=float(d["leaky_slope"]),
        pad_inputs=bool(d["pad_inputs"]),
        seed=int(d["seed"]),
    )


def save_generator_checkpoint(model: UNetGenerator, out_dir) -> Path:
    """Write weights (named-tensor archive) plus a versioned config sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    params = {k: v.detach().cpu().numpy() for k, v in state.items()}
    archive = WeightArchive(params, {"kind": "generator"})
    archive.save(out_dir / "weights.npz")
    (out_dir / "config.json").write_text(
        json.dumps(_config_to_dict(model.config), indent=2)
    )
    return out_dir


def load_generator_checkpoint(ckpt_dir) -> UNetGenerator:
    ckpt_dir = Path(ckpt_dir)
    cfg_path = ckpt_dir / "config.json"
    if not cfg_path.is_file():
        raise InputError(f"generator checkpoint sidecar not found: {cfg_path}")
    cfg = json.loads(cfg_path.read_text())
    if cfg.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise InputError(
            f"unsupported generator checkpoint version {cfg.get('format_version')}"
        )
    config = _config_from_dict(cfg)
    model = UNetGenerator(config)
    archive = WeightArchive.load(ckpt_dir / "weights.npz")
    state = {}
    expected = model.state_dict()
    for name, ref in expected.items():
        if name not in archive:
            raise InputError(f"generator checkpoint missing parameter '{name}'")
        arr = torch.from_numpy(archive[name].copy())
        if tuple(arr.shape) != tuple(ref.shape):
            raise InputError(
                f"generator parameter '{name}' has shape {tuple(arr.shape)}, "
                f"expected {tuple(ref.shape)}"
            )
        state[name] = arr.to(ref.dtype)
    model.load_state_dict(state, strict=True)
    return model
