#!/usr/bin/env python3

"""Visualize what the frozen ViT sees: PCA maps of key self-similarity.

Runs the backbone on a synthetic scene, builds the pairwise cosine
similarity of the deepest layer's keys and writes the leading principal
component maps as grayscale images. Parts of the image that belong
together light up in the same component.
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


def scene(side=224):
    """A toy landscape: sky gradient, sun disc, ground band."""
    y, x = torch.meshgrid(torch.linspace(0, 1, side), torch.linspace(0, 1, side),
                          indexing="ij")
    img = torch.stack([0.45 + 0.2 * y, 0.6 + 0.2 * y, 0.85 * torch.ones_like(y)])
    sun = ((x - 0.3) ** 2 + (y - 0.3) ** 2).sqrt() < 0.12
    img = torch.where(sun, torch.tensor([0.95, 0.75, 0.2]).view(3, 1, 1).expand_as(img), img)
    ground = y > 0.7
    img = torch.where(ground, torch.tensor([0.25, 0.5, 0.2]).view(3, 1, 1).expand_as(img), img)
    return img.clamp(0.0, 1.0)


def main():
    backbone = demo_backbone()
    image = scene()
    layer = backbone.num_layers

    with torch.no_grad():
        x = backbone.preprocess(image)
        feats = backbone.forward_features(x, [layer])
    patch = backbone.config.patch_size
    grid = (x.shape[-2] // patch, x.shape[-1] // patch)
    keys = st.extract_keys(feats, layer)[0]
    sim = st.key_self_similarity(keys, source_layer=layer, grid=grid)
    print(f"self-similarity matrix: {tuple(sim.values.shape)} from layer {layer}")

    components = st.selfsim_pca(sim, 3, grid=grid)
    for j, ratio in enumerate(components.explained_variance_ratio):
        print(f"component {j}: {100 * ratio:.1f}% of variance")
    out = st.export_pca_maps(components, "demo_out/pca")
    st.save_image(image, "demo_out/pca/input.png")
    print("wrote component maps to", out)


if __name__ == "__main__":
    main()
