"""Feature inversion through an image-space reparametrization.

Optimizes the weights of a freshly initialized generator applied to a fixed
noise input so that the backbone features of the produced image match a
frozen target.  Reuses the training generator as the image prior; a direct
pixel-space parametrization is available as a baseline.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from . import manifest as run_manifest
from .backbone import Backbone, extract_cls, extract_keys
from .errors import InputError, NumericalError
from .generator import GeneratorConfig, init_generator
from .image_io import save_image, tensor_sha256, validate_image

DISTANCE_LOG_NAME = "distances.log"
FACETS = ("keys", "cls")


@dataclass
class InversionTarget:
    """Frozen feature target plus enough provenance to audit it."""

    features: torch.Tensor
    layer: int
    facet: str
    image_sha256: str
    image_size: Tuple[int, int]

    def __post_init__(self):
        if self.facet not in FACETS:
            raise ValueError(f"facet must be one of {FACETS}, got {self.facet!r}")


@dataclass
class InversionConfig:
    iterations: int = 5000
    learning_rate: float = 1e-3
    output_size: int = 224
    feature_resize: int = 224
    seed: int = 0
    stop_ratio: Optional[float] = None
    pixel_baseline: bool = False
    log_period: int = 100
    divergence_factor: float = 50.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.stop_ratio is not None and not 0.0 < self.stop_ratio < 1.0:
            raise ValueError("stop_ratio must lie in (0, 1)")


@dataclass
class InversionResult:
    final_image: torch.Tensor
    best_image: torch.Tensor
    distances: List[float]
    initial_distance: float
    best_distance: float
    stopped_at: int
    reached_ratio: float


def capture_target(backbone: Backbone, image: torch.Tensor, layer: Optional[int] = None,
                   facet: str = "keys", feature_resize: int = 224) -> InversionTarget:
    """Extract and freeze the features the inversion will chase."""
    validate_image(image)
    if facet not in FACETS:
        raise InputError(f"unknown facet {facet!r}; expected one of {FACETS}")
    if layer is None:
        layer = backbone.num_layers
    if not 1 <= layer <= backbone.num_layers:
        raise InputError(
            f"layer {layer} out of range 1..{backbone.num_layers}"
        )
    with torch.no_grad():
        x = backbone.preprocess(image, feature_resize)
        feats = backbone.forward_features(x, [layer])
        tensor = extract_keys(feats, layer) if facet == "keys" else extract_cls(feats, layer)
    return InversionTarget(
        features=tensor.detach().clone(), layer=layer, facet=facet,
        image_sha256=tensor_sha256(image), image_size=tuple(image.shape[-2:]),
    )


def _extract(backbone, config, image, target: InversionTarget):
    x = backbone.preprocess(image, config.feature_resize)
    feats = backbone.forward_features(x, [target.layer])
    if target.facet == "keys":
        return extract_keys(feats, target.layer)
    return extract_cls(feats, target.layer)


class _PixelField(torch.nn.Module):
    """Direct pixel parametrization baseline, squashed to [0, 1]."""

    def __init__(self, size: int, gen: torch.Generator):
        super().__init__()
        init = torch.randn((1, 3, size, size), generator=gen) * 0.1
        self.logits = torch.nn.Parameter(init)

    def forward(self, _z):
        return torch.sigmoid(self.logits)


def invert(backbone: Backbone, target: InversionTarget, config: InversionConfig,
           run_dir: Optional[Path] = None) -> InversionResult:
    """Minimize the feature distance to ``target`` over the image prior.

    Tracks the best-so-far image, stops early once the distance falls to
    ``stop_ratio`` of its initial value, and aborts with a diagnostic if
    the optimization diverges.
    """
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    noise_gen = torch.Generator().manual_seed(config.seed + 2)
    z = torch.rand((1, 3, config.output_size, config.output_size), generator=noise_gen)
    if config.pixel_baseline:
        model = _PixelField(config.output_size, noise_gen)
    else:
        model = init_generator(GeneratorConfig(seed=config.seed + 1))
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    with torch.no_grad():
        initial_image = model(z)[0]
        initial = float(torch.linalg.vector_norm(
            _extract(backbone, config, initial_image, target) - target.features))
    if not initial > 0:
        raise NumericalError(
            f"initial feature distance is {initial!r}; nothing to optimize"
        )

    if run_dir is not None:
        run_manifest.append_event(
            run_dir, "inversion_started", facet=target.facet, layer=target.layer,
            seed=config.seed, iterations=config.iterations,
            pixel_baseline=config.pixel_baseline, initial_distance=initial,
        )
        log_file = open(run_dir / DISTANCE_LOG_NAME, "w")
    else:
        log_file = None

    distances = []
    best_distance = initial
    best_image = initial_image.detach().clone()
    stopped_at = config.iterations
    try:
        for it in range(1, config.iterations + 1):
            out = model(z)
            feats = _extract(backbone, config, out[0], target)
            dist = torch.linalg.vector_norm(feats - target.features)
            value = float(dist.detach())
            if not torch.isfinite(dist) or value > config.divergence_factor * initial:
                raise NumericalError(
                    f"inversion diverged at iteration {it}: distance {value:.4g} "
                    f"(initial {initial:.4g})"
                )
            optimizer.zero_grad(set_to_none=True)
            dist.backward()
            optimizer.step()
            distances.append(value)
            if value < best_distance:
                best_distance = value
                best_image = out[0].detach().clone()
            if log_file is not None:
                log_file.write(json.dumps(
                    {"iteration": it, "distance": value, "best": best_distance}) + "\n")
            if config.log_period and it % config.log_period == 0:
                print(f"iter {it}: distance={value:.5f} best={best_distance:.5f} "
                      f"ratio={best_distance / initial:.4f}")
            if config.stop_ratio is not None and best_distance <= config.stop_ratio * initial:
                stopped_at = it
                break
    finally:
        if log_file is not None:
            log_file.close()

    with torch.no_grad():
        final_image = model(z)[0].detach()
    result = InversionResult(
        final_image=final_image, best_image=best_image, distances=distances,
        initial_distance=initial, best_distance=best_distance,
        stopped_at=stopped_at, reached_ratio=best_distance / initial,
    )
    if run_dir is not None:
        save_image(final_image, run_dir / "final.png")
        save_image(best_image, run_dir / "best.png")
        run_manifest.append_event(
            run_dir, "inversion_finished", stopped_at=result.stopped_at,
            best_distance=best_distance, reached_ratio=result.reached_ratio,
        )
    return result


def invert_cls_across_layers(backbone: Backbone, image: torch.Tensor,
                             config: InversionConfig,
                             layers: Optional[Sequence[int]] = None,
                             run_dir: Optional[Path] = None
                             ) -> Dict[int, InversionResult]:
    """Invert the class token at each requested layer separately.

    Shallower layers retain more spatial detail of the source; the deepest
    layer keeps mostly global appearance.  Results are keyed by layer.
    """
    if layers is None:
        layers = range(1, backbone.num_layers + 1)
    results = {}
    for layer in layers:
        target = capture_target(backbone, image, layer=layer, facet="cls",
                                feature_resize=config.feature_resize)
        sub_dir = None if run_dir is None else Path(run_dir) / f"layer_{layer:02d}"
        results[layer] = invert(backbone, target, config, run_dir=sub_dir)
    return results
