"""Config files, run manifests and image file I/O."""

import json

import pytest
import torch

import semtransfer as st
from semtransfer import manifest
from semtransfer.config_file import (apply_overrides, augmentation_policy_from,
                                     format_config, generator_config_from,
                                     inversion_settings_from, load_config_file,
                                     loss_weights_from, parse_config_text,
                                     train_settings_from)
from semtransfer.errors import InputError, UsageError
from semtransfer.image_io import file_sha256, tensor_sha256

SAMPLE = """\
[train]
total_iterations = 500
learning_rate = 1e-3

[loss]
alpha = 0.2

[augmentation]
flip_prob = 0.25
"""


def test_parse_and_builders():
    cfg = parse_config_text(SAMPLE)
    settings = train_settings_from(cfg)
    assert settings["total_iterations"] == 500
    assert settings["learning_rate"] == pytest.approx(1e-3)
    assert settings["clean_pair_period"] == 75  # default preserved
    weights = loss_weights_from(cfg)
    assert weights.alpha == pytest.approx(0.2)
    assert weights.beta == pytest.approx(0.1)
    policy = augmentation_policy_from(cfg)
    assert policy.flip_prob == pytest.approx(0.25)
    assert policy.blur_sigma_range == (0.1, 2.0)


def test_defaults_without_file():
    settings = train_settings_from({})
    assert settings["learning_rate"] == pytest.approx(2e-3)
    assert settings["total_iterations"] == 2000
    assert settings["clean_pair_period"] == 75
    assert settings["feature_resize"] == 224
    inv = inversion_settings_from({})
    assert inv["iterations"] == 5000
    assert inv["learning_rate"] == pytest.approx(1e-3)
    gen_cfg = generator_config_from({}, seed=4)
    assert gen_cfg.encoder_channels == (3, 16, 32, 64, 128, 128)
    assert gen_cfg.seed == 4


def test_overrides():
    cfg = apply_overrides({}, ["train.seed=9", "loss.alpha=0.5"])
    assert cfg["train"]["seed"] == "9"
    assert loss_weights_from(cfg).alpha == pytest.approx(0.5)


def test_override_beats_file():
    cfg = apply_overrides(parse_config_text(SAMPLE), ["train.total_iterations=7"])
    assert train_settings_from(cfg)["total_iterations"] == 7


def test_malformed_override():
    with pytest.raises(UsageError, match="section.key=value"):
        apply_overrides({}, ["noequals"])
    with pytest.raises(UsageError, match="section.key=value"):
        apply_overrides({}, ["nosection=1"])


def test_bad_value_names_key():
    cfg = apply_overrides({}, ["train.total_iterations=soon"])
    with pytest.raises(InputError, match="train.total_iterations"):
        train_settings_from(cfg)


def test_config_file_round_trip(tmp_path):
    cfg = parse_config_text(SAMPLE)
    text = format_config(cfg)
    path = tmp_path / "run.cfg"
    path.write_text(text)
    again = load_config_file(path)
    assert train_settings_from(again) == train_settings_from(cfg)


def test_missing_config_file():
    with pytest.raises(InputError, match="not found"):
        load_config_file("/nonexistent/run.cfg")


def test_unparseable_config():
    with pytest.raises(InputError, match="parse"):
        parse_config_text("not a config\nat=all [")


def test_manifest_append_and_read(tmp_path):
    manifest.append_event(tmp_path, "started", seed=3)
    manifest.append_event(tmp_path, "finished", ok=True)
    events = manifest.read_events(tmp_path)
    assert [e["event"] for e in events] == ["started", "finished"]
    assert events[0]["seed"] == 3
    assert events[1]["ok"] is True
    for e in events:
        assert e["time"].endswith("Z")
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 2
    json.loads(lines[0])


def test_manifest_missing_returns_empty(tmp_path):
    assert manifest.read_events(tmp_path / "nope") == []


def test_image_round_trip(tmp_path):
    img = torch.rand(3, 20, 30, generator=torch.Generator().manual_seed(0))
    quantized = img.mul(255).round().div(255)
    path = tmp_path / "img.png"
    st.save_image(img, path)
    loaded = st.load_image(path)
    torch.testing.assert_close(loaded, quantized, rtol=0, atol=1e-6)


def test_save_accepts_singleton_batch(tmp_path):
    img = torch.rand(1, 3, 8, 8)
    st.save_image(img, tmp_path / "img.png")
    assert st.load_image(tmp_path / "img.png").shape == (3, 8, 8)


def test_save_clamps_out_of_range(tmp_path):
    img = torch.full((3, 4, 4), 2.0)
    st.save_image(img, tmp_path / "img.png")
    assert float(st.load_image(tmp_path / "img.png").max()) == 1.0


def test_load_missing_image():
    with pytest.raises(InputError, match="not found"):
        st.load_image("/nonexistent/img.png")


def test_load_undecodable_image(tmp_path):
    path = tmp_path / "junk.png"
    path.write_bytes(b"this is not an image file")
    with pytest.raises(InputError, match="decode"):
        st.load_image(path)


def test_validate_image_contract():
    from semtransfer.image_io import validate_image

    with pytest.raises(ValueError, match="3, H, W"):
        validate_image(torch.rand(4, 4))
    bad = torch.rand(3, 4, 4)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="finite"):
        validate_image(bad)
    with pytest.raises(ValueError, match="0,1"):
        validate_image(torch.full((3, 4, 4), 1.5))


def test_hashes_deterministic(tmp_path):
    t = torch.rand(3, 5, 5, generator=torch.Generator().manual_seed(1))
    assert tensor_sha256(t) == tensor_sha256(t.clone())
    assert tensor_sha256(t) != tensor_sha256(t + 1e-4)
    path = tmp_path / "blob.bin"
    path.write_bytes(b"abc123")
    assert file_sha256(path) == file_sha256(path)
