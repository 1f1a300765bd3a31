"""Structure and appearance descriptors derived from backbone features.

The structure descriptor is the pairwise cosine similarity of a layer's
keys; its PCA over spatial tokens gives the component maps used for
visualization.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

ZERO_NORM_EPS = 1e-12


@dataclass
class SelfSimilarityMatrix:
    """(n+1) x (n+1) cosine-similarity matrix of one layer's keys.

    ``values`` may carry a leading batch dimension; row/column 0 corresponds
    to the [CLS] key.  ``grid`` records the spatial patch grid (gh, gw) when
    known, which the PCA visualization needs for reshaping.
    """

    values: torch.Tensor
    source_layer: int = 0
    grid: Optional[Tuple[int, int]] = None


def key_self_similarity(keys: torch.Tensor, source_layer: int = 0,
                        grid: Optional[Tuple[int, int]] = None) -> SelfSimilarityMatrix:
    """Cosine similarity between all pairs of key rows.

    ``keys`` is (n+1, d) or (B, n+1, d).  Differentiable with respect to the
    keys.  Rows with (numerically) zero norm raise instead of being smoothed
    away: an epsilon is only meaningful below the 1e-12 norm guard, and then
    the descriptor is undefined.
    """
    single = keys.dim() == 2
    k = keys.unsqueeze(0) if single else keys
    norms = k.norm(dim=-1)
    if (norms < ZERO_NORM_EPS).any():
        bad = torch.nonzero(norms < ZERO_NORM_EPS)[0]
        row = int(bad[-1])
        raise ValueError(f"key row {row} has zero norm; cosine similarity undefined")
    kn = k / norms.unsqueeze(-1)
    sim = kn @ kn.transpose(-2, -1)
    sim = sim.clamp(-1.0, 1.0)
    return SelfSimilarityMatrix(values=sim.squeeze(0) if single else sim,
                                source_layer=source_layer, grid=grid)


@dataclass
class PcaComponents:
    """Top-k principal component maps of the self-similarity rows.

    ``maps`` is (gh, gw, k), each component min-max normalized to [0,1];
    ``explained_variance_ratio`` sums to <= 1; ``degenerate`` flags a flat
    spectrum (no preferred directions, e.g. S = identity).
    """

    maps: np.ndarray
    explained_variance_ratio: np.ndarray
    degenerate: bool


def selfsim_pca(sim: SelfSimilarityMatrix, k: int,
                grid: Optional[Tuple[int, int]] = None) -> PcaComponents:
    """Project the spatial rows of S onto their top-k principal components.

    The [CLS] row and column are dropped first so every remaining row maps
    to one patch; components are reshaped to the (gh, gw) grid.  When no
    grid is given a square one is inferred.
    """
    values = sim.values
    if values.dim() != 2:
        raise ValueError("selfsim_pca expects an unbatched similarity matrix")
    s = values.detach().cpu().numpy().astype(np.float64)
    n = s.shape[0] - 1
    if not 1 <= k <= n:
        raise ValueError(f"component count k={k} out of range 1..{n}")
    grid = grid or sim.grid
    if grid is None:
        g = round(math.sqrt(n))
        if g * g != n:
            raise ValueError(f"cannot infer a square grid for n={n}; pass grid=(gh, gw)")
        grid = (g, g)
    gh, gw = grid
    if gh * gw != n:
        raise ValueError(f"grid {grid} does not match {n} spatial tokens")

    rows = s[1:, 1:]
    centered = rows - rows.mean(axis=0, keepdims=True)
    # SVD of the centered data matrix; the eigen-solver route is kept as an
    # independent check in the tests
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    var = svals ** 2 / max(n - 1, 1)
    total = var.sum()
    if total <= 0:
        ratio = np.zeros(len(var))
        degenerate = True
    else:
        ratio = var / total
        # leading direction is only meaningful when the top eigenvalue is
        # isolated; S = identity gives a tied spectrum and arbitrary maps
        degenerate = bool(len(var) > 1 and (var[0] - var[1]) <= 1e-6 * var[0])
    proj = centered @ vt[:k].T

    maps = np.empty((gh, gw, k))
    for j in range(k):
        comp = proj[:, j]
        lo, hi = comp.min(), comp.max()
        if hi - lo < 1e-12:
            comp = np.zeros_like(comp)
        else:
            comp = (comp - lo) / (hi - lo)
        maps[:, :, j] = comp.reshape(gh, gw)
    return PcaComponents(maps=maps, explained_variance_ratio=ratio[:k],
                         degenerate=degenerate)


def export_pca_maps(components: PcaComponents, out_dir) -> Path:
    """Write per-component PNGs plus the raw array and a manifest."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gh, gw, k = components.maps.shape
    files = []
    for j in range(k):
        img = (components.maps[:, :, j] * 255.0).round().astype(np.uint8)
        fname = f"component{j:02d}.png"
        Image.fromarray(img, mode="L").save(out_dir / fname)
        files.append(fname)
    np.save(out_dir / "components.npy", components.maps)
    manifest = {
        "grid": [gh, gw],
        "num_components": k,
        "explained_variance_ratio": [float(v) for v in components.explained_variance_ratio],
        "degenerate": components.degenerate,
        "component_images": files,
        "raw_array": "components.npy",
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir
