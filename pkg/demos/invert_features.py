#!/usr/bin/env python3

"""Reconstruct an image from its frozen ViT features.

Freezes the deepest-layer features of a synthetic scene and optimizes a
generator (fed fixed noise) until its output matches them. Key targets
recover the scene's layout; the [CLS] target only pins global appearance,
which is exactly why it works as the appearance descriptor in training.
"""

import os

import torch

import semtransfer as st


def demo_backbone():
    path = os.environ.get("SEMTRANSFER_WEIGHTS")
    if path:
        print("loading weights archive:", path)
        return st.load_backbone(st.WeightArchive.load(path))
    print("SEMTRANSFER_WEIGHTS not set; using the calibrated synthetic backbone")
    archive = st.synthetic_backbone_archive(num_layers=12, embed_dim=32,
                                            patch_size=8, grid_size=28,
                                            seed=0, calibrated=True)
    return st.load_backbone(archive)


def scene(side=128):
    y, x = torch.meshgrid(torch.linspace(0, 1, side), torch.linspace(0, 1, side),
                          indexing="ij")
    img = torch.stack([0.3 + 0.5 * x, 0.35 + 0.3 * y, 0.7 - 0.3 * x])
    blob = ((x - 0.6) ** 2 + (y - 0.45) ** 2).sqrt() < 0.2
    img = torch.where(blob, torch.tensor([0.9, 0.85, 0.75]).view(3, 1, 1).expand_as(img), img)
    return img.clamp(0.0, 1.0)


def main():
    backbone = demo_backbone()
    image = scene()
    st.save_image(image, "demo_out/inversion/source.png")

    print("--- key inversion (layout should come back) ---")
    target = st.capture_target(backbone, image, facet="keys", feature_resize=128)
    config = st.InversionConfig(iterations=150, output_size=128,
                                feature_resize=128, log_period=50, seed=0)
    result = st.invert(backbone, target, config, run_dir="demo_out/inversion/keys")
    print(f"distance {result.initial_distance:.3f} -> {result.best_distance:.3f} "
          f"({100 * result.reached_ratio:.1f}% of initial)")

    print("--- [CLS] inversion (only global appearance is pinned) ---")
    target = st.capture_target(backbone, image, facet="cls", feature_resize=128)
    config = st.InversionConfig(iterations=150, output_size=128,
                                feature_resize=128, log_period=50,
                                stop_ratio=0.1, seed=0)
    result = st.invert(backbone, target, config, run_dir="demo_out/inversion/cls")
    print(f"distance {result.initial_distance:.3f} -> {result.best_distance:.3f} "
          f"after {result.stopped_at} iterations")
    print("reconstructions in demo_out/inversion/{keys,cls}/best.png")


if __name__ == "__main__":
    main()
