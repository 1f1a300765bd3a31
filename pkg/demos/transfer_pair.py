#!/usr/bin/env python3

"""Train the full appearance transfer on one synthetic image pair.

The structure image contributes its key self-similarity, the appearance
image its [CLS] token; the generator learns to paint the first with the
look of the second. With the default 300 iterations this takes a minute
or two on a CPU.
"""

import argparse
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


def structure_scene(side=128):
    """Shapes on a quiet background: two discs and a horizon band."""
    y, x = torch.meshgrid(torch.linspace(0, 1, side), torch.linspace(0, 1, side),
                          indexing="ij")
    img = torch.full((3, side, side), 0.75)
    for cx, cy, r in ((0.3, 0.35, 0.16), (0.7, 0.55, 0.12)):
        disc = ((x - cx) ** 2 + (y - cy) ** 2).sqrt() < r
        img = torch.where(disc, torch.tensor([0.35, 0.35, 0.4]).view(3, 1, 1).expand_as(img), img)
    band = y > 0.75
    img = torch.where(band, torch.tensor([0.55, 0.55, 0.6]).view(3, 1, 1).expand_as(img), img)
    return img.clamp(0.0, 1.0)


def appearance_scene(side=128):
    """A warm striped texture, the look to be transferred."""
    y, x = torch.meshgrid(torch.linspace(0, 1, side), torch.linspace(0, 1, side),
                          indexing="ij")
    wave = torch.sin(14.0 * (x + 0.6 * y))
    img = torch.stack([0.75 + 0.2 * wave, 0.45 + 0.25 * wave, 0.2 + 0.1 * wave])
    return img.clamp(0.0, 1.0)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--iterations", type=int, default=300)
    parser.add_argument("--out", default="demo_out/transfer")
    args = parser.parse_args()

    backbone = demo_backbone()
    s_img, t_img = structure_scene(), appearance_scene()
    st.save_image(s_img, f"{args.out}/structure.png")
    st.save_image(t_img, f"{args.out}/appearance.png")

    config = st.TrainConfig(total_iterations=args.iterations, seed=0,
                            checkpoint_period=0, log_period=25)
    result = st.train(s_img, t_img, config, backbone, args.out)

    report = st.evaluate_transfer(backbone, s_img, t_img, result.final_image)
    print(f"appearance distance {report.appearance_distance:.4f} "
          f"(doing nothing scores {report.appearance_baseline:.4f}, "
          f"improved={report.appearance_improved})")
    print(f"structure distance {report.structure_distance:.4f} "
          f"(copying the appearance image scores {report.structure_baseline:.4f}, "
          f"preserved={report.structure_preserved})")
    print("output in", result.run_dir / "outputs" / "final.png")


if __name__ == "__main__":
    main()
