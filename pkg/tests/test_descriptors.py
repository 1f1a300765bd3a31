"""Key self-similarity descriptor and its PCA visualization."""

import json

import numpy as np
import pytest
import torch

import semtransfer as st
from semtransfer.descriptors import selfsim_pca


def rand_keys(n, d, seed=0):
    return torch.randn((n, d), generator=torch.Generator().manual_seed(seed))


def test_two_row_oracle():
    keys = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    sim = st.key_self_similarity(keys).values
    expected = torch.tensor([[1.0, 0.70710678], [0.70710678, 1.0]])
    torch.testing.assert_close(sim, expected, rtol=0, atol=1e-7)


def test_symmetry_unit_diagonal_bounds():
    sim = st.key_self_similarity(rand_keys(40, 16)).values
    torch.testing.assert_close(sim, sim.T, rtol=0, atol=1e-6)
    torch.testing.assert_close(sim.diagonal(), torch.ones(40), rtol=0, atol=1e-6)
    assert float(sim.max()) <= 1.0
    assert float(sim.min()) >= -1.0


def test_scale_invariance():
    keys = rand_keys(20, 8)
    base = st.key_self_similarity(keys).values
    scaled = st.key_self_similarity(keys * 37.5).values
    torch.testing.assert_close(scaled, base, rtol=0, atol=1e-6)
    per_row = keys * torch.rand((20, 1), generator=torch.Generator().manual_seed(1)).add(0.1)
    torch.testing.assert_close(st.key_self_similarity(per_row).values, base,
                               rtol=0, atol=1e-5)


def test_permutation_equivariance_exact():
    keys = rand_keys(15, 8)
    perm = torch.randperm(15, generator=torch.Generator().manual_seed(2))
    base = st.key_self_similarity(keys).values
    permuted = st.key_self_similarity(keys[perm]).values
    assert torch.equal(permuted, base[perm][:, perm])


def test_zero_norm_row_raises():
    keys = rand_keys(5, 4)
    keys[3] = 0.0
    with pytest.raises(ValueError, match="row 3"):
        st.key_self_similarity(keys)


def test_clamp_keeps_range_with_parallel_rows():
    row = torch.tensor([0.3, -1.7, 2.2, 0.9])
    keys = torch.stack([row, row * 3.0, row * 0.25])
    sim = st.key_self_similarity(keys).values
    assert float(sim.max()) <= 1.0
    torch.testing.assert_close(sim, torch.ones(3, 3), rtol=0, atol=1e-6)


def test_batched_matches_single():
    a, b = rand_keys(10, 6, seed=3), rand_keys(10, 6, seed=4)
    batched = st.key_self_similarity(torch.stack([a, b])).values
    torch.testing.assert_close(batched[0], st.key_self_similarity(a).values)
    torch.testing.assert_close(batched[1], st.key_self_similarity(b).values)


def test_gradients_flow():
    keys = rand_keys(8, 4).requires_grad_(True)
    st.key_self_similarity(keys).values.sum().backward()
    assert keys.grad is not None
    assert torch.isfinite(keys.grad).all()


def _pca_oracle(sim_values, k):
    """Independent eigen-decomposition of the covariance of the S rows."""
    rows = sim_values.numpy().astype(np.float64)[1:, 1:]
    centered = rows - rows.mean(axis=0, keepdims=True)
    n = rows.shape[0]
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    return centered @ evecs[:, :k], evals


def test_pca_matches_eigh_oracle():
    keys = rand_keys(17, 8, seed=5)  # 1 cls + 16 patches on a 4x4 grid
    sim = st.key_self_similarity(keys)
    result = selfsim_pca(sim, 3, grid=(4, 4))
    proj, evals = _pca_oracle(sim.values, 3)
    ratio_oracle = evals[:3] / evals.sum()
    np.testing.assert_allclose(result.explained_variance_ratio, ratio_oracle,
                               atol=1e-8)
    # maps are min-max normalized projections, up to a per-component sign
    for j in range(3):
        got = result.maps[:, :, j].reshape(-1)
        ref = proj[:, j]
        span = ref.max() - ref.min()
        ref_n = (ref - ref.min()) / span
        match = min(np.abs(got - ref_n).max(), np.abs(got - (1 - ref_n)).max())
        assert match < 1e-8


def test_pca_rank_one_structure():
    # two clusters of identical keys: S rows take two values, so the
    # centered row matrix is rank one and a single component explains it
    a = torch.tensor([1.0, 0.2, 0.0, 0.0])
    b = torch.tensor([0.0, 0.1, 1.0, 0.3])
    keys = torch.stack([torch.full((4,), 0.5)] + [a] * 8 + [b] * 8)
    sim = st.key_self_similarity(keys)
    result = selfsim_pca(sim, 2, grid=(4, 4))
    assert result.explained_variance_ratio[0] > 0.99
    assert not result.degenerate


def test_pca_normalized_range():
    sim = st.key_self_similarity(rand_keys(26, 8, seed=6))
    result = selfsim_pca(sim, 4, grid=(5, 5))
    assert result.maps.shape == (5, 5, 4)
    assert result.maps.min() >= 0.0
    assert result.maps.max() <= 1.0


def test_pca_degenerate_identity():
    sim = st.SelfSimilarityMatrix(values=torch.eye(10), source_layer=12)
    result = selfsim_pca(sim, 2, grid=(3, 3))
    assert result.degenerate


def test_pca_rejects_bad_grid():
    sim = st.key_self_similarity(rand_keys(17, 4))
    with pytest.raises(ValueError, match="grid"):
        selfsim_pca(sim, 2, grid=(3, 4))


def test_pca_rejects_bad_k():
    sim = st.key_self_similarity(rand_keys(10, 4))
    with pytest.raises(ValueError, match="k="):
        selfsim_pca(sim, 0, grid=(3, 3))
    with pytest.raises(ValueError, match="k="):
        selfsim_pca(sim, 10, grid=(3, 3))


def test_export_writes_images_and_manifest(tmp_path):
    sim = st.key_self_similarity(rand_keys(17, 8, seed=7))
    result = selfsim_pca(sim, 3, grid=(4, 4))
    out = st.export_pca_maps(result, tmp_path / "maps")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["grid"] == [4, 4]
    assert manifest["num_components"] == 3
    for fname in manifest["component_images"]:
        assert (out / fname).is_file()
    arr = np.load(out / manifest["raw_array"])
    np.testing.assert_array_equal(arr, result.maps)
