"""Transfer quality report.

Measures, at the evaluation resolution, how close the output sits to the
appearance image in [CLS] space and to the structure image in key
self-similarity space, against the untrained baselines (the structure
image itself for appearance, the appearance image resampled onto the
structure grid for structure).
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from . import manifest as run_manifest
from .backbone import Backbone, extract_cls, extract_keys
from .descriptors import key_self_similarity
from .image_io import validate_image


@dataclass
class TransferReport:
    appearance_distance: float
    appearance_baseline: float
    structure_distance: float
    structure_baseline: float
    feature_resize: int
    layer: int

    @property
    def appearance_improved(self) -> bool:
        return self.appearance_distance < self.appearance_baseline

    @property
    def structure_preserved(self) -> bool:
        return self.structure_distance < self.structure_baseline

    def as_dict(self) -> dict:
        d = asdict(self)
        d["appearance_improved"] = self.appearance_improved
        d["structure_preserved"] = self.structure_preserved
        return d


def _normalize(backbone: Backbone, image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(backbone.config.image_mean).view(3, 1, 1)
    std = torch.tensor(backbone.config.image_std).view(3, 1, 1)
    return (image - mean) / std


def _resample_to(backbone: Backbone, image: torch.Tensor, size) -> torch.Tensor:
    """Bicubic resample to an exact pixel size, then normalize."""
    x = F.interpolate(image.unsqueeze(0), size=size, mode="bicubic",
                      align_corners=False).clamp(0.0, 1.0)[0]
    return _normalize(backbone, x)


def evaluate_transfer(backbone: Backbone, structure_img: torch.Tensor,
                      appearance_img: torch.Tensor, output_img: torch.Tensor,
                      feature_resize: int = 224) -> TransferReport:
    """Compare output features against both inputs at a shared grid.

    The appearance image is resampled onto the structure image's processed
    grid so the two self-similarity matrices are directly comparable.
    """
    for img in (structure_img, appearance_img, output_img):
        validate_image(img)
    layer = backbone.num_layers
    with torch.no_grad():
        x_s = backbone.preprocess(structure_img, feature_resize)
        x_o = backbone.preprocess(output_img, feature_resize)
        if x_o.shape != x_s.shape:
            x_o = _resample_to(backbone, output_img, x_s.shape[-2:])
        x_t = _resample_to(backbone, appearance_img, x_s.shape[-2:])

        feats_s = backbone.forward_features(x_s, [layer])
        feats_t = backbone.forward_features(x_t, [layer])
        feats_o = backbone.forward_features(x_o, [layer])

        cls_t = extract_cls(feats_t, layer)
        cls_s = extract_cls(feats_s, layer)
        cls_o = extract_cls(feats_o, layer)
        sim_s = key_self_similarity(extract_keys(feats_s, layer)).values
        sim_t = key_self_similarity(extract_keys(feats_t, layer)).values
        sim_o = key_self_similarity(extract_keys(feats_o, layer)).values

    return TransferReport(
        appearance_distance=float(torch.linalg.vector_norm(cls_o - cls_t)),
        appearance_baseline=float(torch.linalg.vector_norm(cls_s - cls_t)),
        structure_distance=float(torch.linalg.vector_norm(sim_o - sim_s)),
        structure_baseline=float(torch.linalg.vector_norm(sim_t - sim_s)),
        feature_resize=feature_resize, layer=layer,
    )


def append_report(run_dir: Optional[Path], report: TransferReport) -> None:
    if run_dir is None:
        return
    run_manifest.append_event(Path(run_dir), "evaluation", **report.as_dict())
