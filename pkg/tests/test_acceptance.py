"""Release acceptance suite.

Nine independent checks gate a release; each lives in one test whose verbose
pass/fail line is the record:

 1. full-width backbone forward parity against an independent numpy pass
 2. self-similarity invariants over random key matrices
 3. loss gradients against central finite differences, including the
    end-to-end pixel gradient through a small transformer
 4. ablation accounting: logged totals re-add from logged components
 5. a 300-iteration transfer run on one real 128x128 image pair
 6. the backbone stays frozen through that run
 7. feature inversion convergence for both facets
 8. augmentation stream statistics and reproducibility
 9. a deterministic repeat of the transfer run is bit-identical

The training and inversion checks use a synthetic calibrated backbone (no
checkpoint download at test time); parity and gradient checks run in float64.
"""

import time

import numpy as np
import pytest
import torch

import semtransfer as st
from semtransfer import manifest
from semtransfer.descriptors import key_self_similarity

import reference_vit

TOL_PARITY = 1e-4
TOL_SIM = 1e-6
TOL_ACCOUNTING = 1e-6
TOL_GRAD_REL = 5e-2


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_backbone_reference_parity():
    start = time.perf_counter()
    archive = st.synthetic_backbone_archive(num_layers=12, embed_dim=768,
                                            patch_size=8, grid_size=28, seed=0)
    backbone = st.load_backbone(archive, dtype=torch.float64)
    image = torch.rand(3, 224, 224, generator=torch.Generator().manual_seed(0))
    x = backbone.preprocess(image.double(), 224)

    with torch.no_grad():
        feats = backbone.forward_features(x, [12])
    cls_ours = st.extract_cls(feats, 12)[0].numpy()
    keys_ours = st.extract_keys(feats, 12)[0].numpy()

    params = {k: v.astype(np.float64) for k, v in archive.params.items()}
    ref = reference_vit.forward(params, x.numpy(), num_heads=12, patch_size=8,
                                layers=[12])
    cls_ref, keys_ref = ref[12]

    dev_cls = float(np.abs(cls_ours - cls_ref).max())
    dev_keys = float(np.abs(keys_ours - keys_ref).max())
    elapsed = time.perf_counter() - start
    print(f"parity: cls dev {dev_cls:.2e}, keys dev {dev_keys:.2e}, {elapsed:.0f}s")
    assert dev_cls <= TOL_PARITY
    assert dev_keys <= TOL_PARITY
    assert elapsed <= 60.0


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_self_similarity_invariants():
    gen = torch.Generator().manual_seed(0)
    for trial in range(100):
        n = int(torch.randint(2, 51, (), generator=gen))
        d = int(torch.randint(2, 33, (), generator=gen))
        keys = torch.randn(n, d, generator=gen)
        sim = key_self_similarity(keys).values

        assert float((sim - sim.T).abs().max()) <= TOL_SIM
        assert float((sim.diagonal() - 1.0).abs().max()) <= TOL_SIM
        assert float(sim.max()) <= 1.0 and float(sim.min()) >= -1.0

        scales = 0.1 + 9.9 * torch.rand(n, 1, generator=gen)
        scaled = key_self_similarity(keys * scales).values
        assert float((sim - scaled).abs().max()) <= TOL_SIM

        perm = torch.randperm(n, generator=gen)
        permuted = key_self_similarity(keys[perm]).values
        assert torch.equal(permuted, sim[perm][:, perm])


# ---------------------------------------------------------------- criterion 3

def _fd_fraction_ok(fn, x, samples, eps=1e-6, seed=123):
    """Fraction of sampled coordinates where the analytic gradient matches a
    central difference within the relative tolerance (float64 throughout)."""
    x = x.detach().double().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.reshape(-1)
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randperm(x.numel(), generator=gen)[:samples]
    rels = []
    with torch.no_grad():
        flat = x.detach().clone().reshape(-1)
        for coord in idx.tolist():
            save = float(flat[coord])
            flat[coord] = save + eps
            hi = float(fn(flat.reshape(x.shape)))
            flat[coord] = save - eps
            lo = float(fn(flat.reshape(x.shape)))
            flat[coord] = save
            fd = (hi - lo) / (2 * eps)
            an = float(analytic[coord])
            denom = max(abs(an), abs(fd), 1e-8)
            rels.append(abs(an - fd) / denom)
    ok = sum(r <= TOL_GRAD_REL for r in rels)
    return ok / len(rels), max(rels)


def test_criterion_3_loss_gradients():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(5)

    cls_t = torch.randn(8, generator=gen).double()
    frac, worst = _fd_fraction_ok(
        lambda v: st.appearance_loss(cls_t, v),
        torch.randn(8, generator=gen), samples=8)
    assert frac >= 0.95, f"appearance gradient: {frac:.0%} ok, worst {worst:.2e}"

    keys_ref = torch.randn(10, 6, generator=gen).double()
    sim_ref = key_self_similarity(keys_ref)
    frac, worst = _fd_fraction_ok(
        lambda v: st.structure_loss(sim_ref, key_self_similarity(v)),
        torch.randn(10, 6, generator=gen), samples=40)
    assert frac >= 0.95, f"structure gradient: {frac:.0%} ok, worst {worst:.2e}"

    frac, worst = _fd_fraction_ok(
        lambda v: st.identity_loss(keys_ref, v),
        torch.randn(10, 6, generator=gen), samples=40)
    assert frac >= 0.95, f"identity gradient: {frac:.0%} ok, worst {worst:.2e}"

    # end-to-end pixel gradient of the full weighted objective through a
    # 2-layer toy transformer (d=8, 3x3 patch grid): the candidate outputs
    # for both input images are free pixel fields
    bb = st.load_backbone(
        st.synthetic_backbone_archive(num_layers=2, embed_dim=8, num_heads=2,
                                      patch_size=8, grid_size=3, seed=1),
        dtype=torch.float64)
    side = 24
    weights = st.LossWeights()
    L = bb.num_layers

    def views(img):
        feats = bb.forward_features(bb.preprocess(img, side), [L])
        return st.extract_cls(feats, L)[0], st.extract_keys(feats, L)[0]

    with torch.no_grad():
        s_img = torch.rand(3, side, side, generator=gen).double()
        t_img = torch.rand(3, side, side, generator=gen).double()
        cls_target, keys_target = views(t_img)
        _, keys_source = views(s_img)
        sim_source = key_self_similarity(keys_source)

    def loss_of_pixels(flat):
        out_s = flat[:3 * side * side].reshape(3, side, side)
        out_t = flat[3 * side * side:].reshape(3, side, side)
        cls_o, keys_o = views(out_s)
        _, keys_rt = views(out_t)
        return st.transfer_loss(
            st.appearance_loss(cls_target, cls_o),
            st.structure_loss(sim_source, key_self_similarity(keys_o)),
            st.identity_loss(keys_target, keys_rt),
            weights,
        )

    candidates = torch.cat([
        torch.rand(3 * side * side, generator=gen),
        torch.rand(3 * side * side, generator=gen),
    ])
    frac, worst = _fd_fraction_ok(loss_of_pixels, candidates, samples=48,
                                  eps=1e-6)
    elapsed = time.perf_counter() - start
    print(f"end-to-end pixel gradient: {frac:.0%} ok, worst rel {worst:.2e}, "
          f"{elapsed:.0f}s")
    assert frac >= 0.95
    assert worst <= TOL_GRAD_REL, f"worst sampled relative error {worst:.2e}"
    assert elapsed <= 300.0


# ---------------------------------------------------------------- criterion 4

@pytest.mark.parametrize("label,kwargs", [
    ("alpha=0", dict(weights=st.LossWeights(alpha=0.0))),
    ("beta=0", dict(weights=st.LossWeights(beta=0.0))),
    ("app-off", dict(disable_app=True)),
])
def test_criterion_4_ablation_accounting(small_backbone, tmp_path, label, kwargs):
    gen = torch.Generator().manual_seed(0)
    s_img = torch.rand(3, 32, 32, generator=gen)
    t_img = torch.rand(3, 32, 32, generator=gen)
    config = st.TrainConfig(total_iterations=50, feature_resize=32, seed=0,
                            checkpoint_period=0, log_period=0,
                            deterministic=True, **kwargs)
    st.train(s_img, t_img, config, small_backbone, tmp_path)

    log = st.read_loss_log(tmp_path)
    assert len(log) == 50
    alpha, beta = config.weights.alpha, config.weights.beta
    worst = 0.0
    for entry in log:
        app = 0.0 if config.disable_app else entry["app"]
        expected = app + alpha * entry["structure"] + beta * entry["id"]
        worst = max(worst, abs(entry["total"] - expected))
        if config.disable_app:
            assert entry["app"] == 0.0
    print(f"{label}: worst accounting error {worst:.2e} over 50 steps")
    assert worst <= TOL_ACCOUNTING


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_desk_transfer(desk_run, small_backbone, desk_pair):
    s_img, t_img = desk_pair
    first, last = desk_run.loss_history[0], desk_run.loss_history[-1]
    report = st.evaluate_transfer(small_backbone, s_img, t_img,
                                  desk_run.final_image)
    print(f"total {first.total:.4f} -> {last.total:.4f}; "
          f"appearance {report.appearance_distance:.4f} vs baseline "
          f"{report.appearance_baseline:.4f}; structure "
          f"{report.structure_distance:.4f} vs baseline "
          f"{report.structure_baseline:.4f}; {desk_run.train_seconds:.0f}s")
    assert last.iteration == 300
    assert last.total < first.total, "(a) total loss did not decrease"
    assert report.appearance_improved, "(b) output no closer to the appearance image"
    assert report.structure_preserved, "(c) structure drifted past the appearance baseline"
    assert desk_run.train_seconds <= 3600.0


# ---------------------------------------------------------------- criterion 6

def test_criterion_6_backbone_frozen(desk_run):
    assert desk_run.backbone_checksum_before == desk_run.backbone_checksum_after
    finished = [e for e in manifest.read_events(desk_run.run_dir)
                if e["event"] == "training_finished"][-1]
    assert finished["backbone_frozen"] is True


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_inversion_convergence(small_backbone):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(7)

    img224 = torch.rand(3, 224, 224, generator=gen)
    target = st.capture_target(small_backbone, img224, facet="cls")
    result = st.invert(small_backbone, target,
                       st.InversionConfig(stop_ratio=0.1, log_period=0, seed=0))
    print(f"cls inversion: ratio {result.reached_ratio:.4f} "
          f"after {result.stopped_at} iterations")
    assert result.reached_ratio <= 0.10, (
        f"cls inversion only reached {result.reached_ratio:.1%} of the "
        f"initial distance within the default budget")

    img128 = torch.rand(3, 128, 128, generator=gen)
    target_k = st.capture_target(small_backbone, img128, facet="keys",
                                 feature_resize=128)
    rec = st.invert(small_backbone, target_k,
                    st.InversionConfig(iterations=100, output_size=128,
                                       feature_resize=128, log_period=0, seed=0))

    def sim_of(img):
        feats = small_backbone.features_from_raw(img, [12], target_side=128)
        return key_self_similarity(st.extract_keys(feats, 12)[0]).values

    with torch.no_grad():
        random_img = torch.rand(3, 128, 128,
                                generator=torch.Generator().manual_seed(99))
        d_rec = float(torch.linalg.vector_norm(sim_of(img128) - sim_of(rec.best_image)))
        d_rand = float(torch.linalg.vector_norm(sim_of(img128) - sim_of(random_img)))
    elapsed = time.perf_counter() - start
    print(f"key inversion: S distance {d_rec:.3f} vs random {d_rand:.3f}, "
          f"{elapsed:.0f}s")
    assert d_rec < d_rand
    assert elapsed <= 1800.0


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_augmentation_statistics():
    policy = st.AugmentationPolicy()
    height = width = 128

    def draw_stream(seed):
        gen = torch.Generator().manual_seed(seed)
        from semtransfer.augmentation import sample_view_params
        return [sample_view_params(policy, height, width, gen,
                                   structure=(i % 2 == 0))
                for i in range(10_000)]

    stream = draw_stream(0)
    flips = sum(p.flip for p in stream) / len(stream)
    fractions = [p.crop_size / height for p in stream]
    sigmas = [p.blur_sigma for p in stream if p.blur_sigma is not None]

    print(f"flip rate {flips:.4f}; crop fraction [{min(fractions):.4f}, "
          f"{max(fractions):.4f}]; sigma [{min(sigmas):.3f}, {max(sigmas):.3f}] "
          f"over {len(sigmas)} blurred views")
    assert abs(flips - 0.5) <= 0.02
    assert min(fractions) >= 0.95 and max(fractions) <= 1.00
    assert sigmas and min(sigmas) >= 0.1 and max(sigmas) <= 2.0
    assert draw_stream(0) == stream  # reproducible from the seed
    assert draw_stream(1) != stream


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_deterministic_repeat(desk_run, desk_run_repeat):
    log_a = st.read_loss_log(desk_run.run_dir)
    log_b = st.read_loss_log(desk_run_repeat.run_dir)
    assert len(log_a) == len(log_b) == 300
    assert log_a == log_b
    history_a = [r.as_dict() for r in desk_run.loss_history]
    history_b = [r.as_dict() for r in desk_run_repeat.loss_history]
    assert history_a == history_b
