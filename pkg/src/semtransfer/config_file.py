"""Flat run configuration files.

Human-readable ``key = value`` text with one section per module, parsed with
the standard library.  Any entry can be overridden on the command line with
``--set section.key=value``.
"""

import configparser
import io
from pathlib import Path

from .augmentation import AugmentationPolicy
from .errors import InputError, UsageError
from .generator import GeneratorConfig
from .losses import LossWeights


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise InputError(f"cannot parse config: {e}") from e
    return {section: dict(parser.items(section)) for section in parser.sections()}


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of a parsed config."""
    out = {s: dict(kv) for s, kv in cfg.items()}
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got '{item}'")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value.strip()
    return out


def _get(cfg, section, key, default, convert):
    raw = cfg.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        return convert(raw)
    except (TypeError, ValueError) as e:
        raise InputError(f"bad value for {section}.{key}: {raw!r} ({e})") from e


def _to_bool(raw):
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw}")


def _to_int_list(raw):
    return tuple(int(v) for v in str(raw).replace(",", " ").split())


def loss_weights_from(cfg) -> LossWeights:
    return LossWeights(
        alpha=_get(cfg, "loss", "alpha", 0.1, float),
        beta=_get(cfg, "loss", "beta", 0.1, float),
    )


def generator_config_from(cfg, seed) -> GeneratorConfig:
    return GeneratorConfig(
        encoder_channels=_get(cfg, "generator", "encoder_channels",
                              (3, 16, 32, 64, 128, 128), _to_int_list),
        kernel_size=_get(cfg, "generator", "kernel_size", 3, int),
        skip_kernel_size=_get(cfg, "generator", "skip_kernel_size", 1, int),
        leaky_slope=_get(cfg, "generator", "leaky_slope", 0.2, float),
        pad_inputs=_get(cfg, "generator", "pad_inputs", True, _to_bool),
        seed=_get(cfg, "generator", "seed", seed, int),
    )


def augmentation_policy_from(cfg) -> AugmentationPolicy:
    g = lambda key, default, conv=float: _get(cfg, "augmentation", key, default, conv)
    return AugmentationPolicy(
        crop_fraction_range=(g("crop_min", 0.95), g("crop_max", 1.00)),
        flip_prob=g("flip_prob", 0.5),
        jitter_prob=g("jitter_prob", 0.5),
        brightness_range=(g("brightness_min", 0.8), g("brightness_max", 1.2)),
        contrast_range=(g("contrast_min", 0.8), g("contrast_max", 1.2)),
        saturation_range=(g("saturation_min", 0.8), g("saturation_max", 1.2)),
        hue_range=(g("hue_min", -0.05), g("hue_max", 0.05)),
        blur_prob=g("blur_prob", 0.5),
        blur_kernel=g("blur_kernel", 3, int),
        blur_sigma_range=(g("blur_sigma_min", 0.1), g("blur_sigma_max", 2.0)),
    )


def train_settings_from(cfg) -> dict:
    """Trainer scalars from the [train] section (defaults built in)."""
    return {
        "learning_rate": _get(cfg, "train", "learning_rate", 2e-3, float),
        "adam_beta1": _get(cfg, "train", "adam_beta1", 0.9, float),
        "adam_beta2": _get(cfg, "train", "adam_beta2", 0.999, float),
        "adam_eps": _get(cfg, "train", "adam_eps", 1e-8, float),
        "total_iterations": _get(cfg, "train", "total_iterations", 2000, int),
        "clean_pair_period": _get(cfg, "train", "clean_pair_period", 75, int),
        "feature_resize": _get(cfg, "train", "feature_resize", 224, int),
        "seed": _get(cfg, "train", "seed", 0, int),
        "checkpoint_period": _get(cfg, "train", "checkpoint_period", 500, int),
        "log_period": _get(cfg, "train", "log_period", 25, int),
        "deterministic": _get(cfg, "train", "deterministic", False, _to_bool),
        "disable_app": _get(cfg, "loss", "disable_app", False, _to_bool),
        "disable_structure": _get(cfg, "loss", "disable_structure", False, _to_bool),
        "disable_id": _get(cfg, "loss", "disable_id", False, _to_bool),
    }


def inversion_settings_from(cfg) -> dict:
    return {
        "iterations": _get(cfg, "inversion", "iterations", 5000, int),
        "learning_rate": _get(cfg, "inversion", "learning_rate", 1e-3, float),
        "output_size": _get(cfg, "inversion", "output_size", 224, int),
        "feature_resize": _get(cfg, "inversion", "feature_resize", 224, int),
        "stop_ratio": _get(cfg, "inversion", "stop_ratio", None, float),
        "pixel_baseline": _get(cfg, "inversion", "pixel_baseline", False, _to_bool),
    }


def backbone_settings_from(cfg) -> dict:
    return {
        "archive": cfg.get("backbone", {}).get("archive"),
        "feature_resize": _get(cfg, "backbone", "feature_resize", 224, int),
    }


def format_config(cfg: dict) -> str:
    """Render a parsed/merged config back to the flat text format."""
    parser = configparser.ConfigParser()
    for section in sorted(cfg):
        parser[section] = {k: str(v) for k, v in sorted(cfg[section].items())}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
