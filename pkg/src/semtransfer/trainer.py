"""Single-pair training loop.

Trains the generator so that its output matches the appearance descriptor
([CLS] token) of the target image and the structure descriptor (key
self-similarity) of the source image, with an identity term regularizing the
mapping on the appearance image.  The frozen backbone defines the loss
geometry; only generator parameters are ever updated.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from . import manifest as run_manifest
from .augmentation import AugmentationPolicy, sample_appearance_view, sample_structure_view
from .backbone import Backbone, extract_cls, extract_keys
from .descriptors import key_self_similarity
from .errors import InputError, NumericalError
from .generator import (GeneratorConfig, UNetGenerator, init_generator,
                        load_generator_checkpoint, save_generator_checkpoint)
from .image_io import save_image, validate_image
from .losses import LossReport, LossWeights, identity_loss, appearance_loss, structure_loss

LOSS_LOG_NAME = "losses.log"
RUN_STATE_NAME = "run_state.pt"


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    total_iterations: int = 2000
    clean_pair_period: int = 75
    feature_resize: int = 224
    seed: int = 0
    disable_app: bool = False
    disable_structure: bool = False
    disable_id: bool = False
    checkpoint_period: int = 500
    log_period: int = 25
    deterministic: bool = False

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.clean_pair_period < 1:
            raise ValueError("clean_pair_period must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def validate_against_backbone(self, backbone: Backbone):
        if self.feature_resize < 2 * backbone.config.patch_size:
            raise ValueError(
                f"feature_resize {self.feature_resize} below twice the patch size"
            )


@dataclass
class RunState:
    """Everything a training run needs to continue exactly where it stopped."""

    config: TrainConfig
    model: UNetGenerator
    optimizer: torch.optim.Optimizer
    aug_gen: torch.Generator
    policy: AugmentationPolicy
    iteration: int = 0
    loss_history: List[LossReport] = field(default_factory=list)
    clean_target_cache: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    run_dir: Path
    final_image: torch.Tensor
    checkpoint_dir: Path
    loss_history: List[LossReport]
    backbone_checksum_before: str
    backbone_checksum_after: str


def _feature_views(backbone: Backbone, config: TrainConfig, image, with_grad):
    """Deepest-layer cls and keys of an image resized to the feature size."""
    L = backbone.num_layers
    x = backbone.preprocess(image, config.feature_resize)
    if with_grad:
        feats = backbone.forward_features(x, [L])
    else:
        with torch.no_grad():
            feats = backbone.forward_features(x, [L])
    return extract_cls(feats, L), extract_keys(feats, L)


def compute_batch_losses(backbone: Backbone, config: TrainConfig, run: RunState,
                         batch) -> Tuple[torch.Tensor, dict]:
    """Per-example losses averaged over the batch.

    ``batch`` is a list of (structure_view, appearance_view, is_clean)
    triples; disabled terms are skipped entirely and reported as 0.
    """
    model = run.model
    need_app = not config.disable_app
    need_structure = not config.disable_structure
    need_id = not config.disable_id
    app_terms, structure_terms, id_terms = [], [], []

    for view_s, view_t, is_clean in batch:
        cache_key = ("clean", view_s.shape, view_t.shape) if is_clean else None
        if cache_key is not None and cache_key in run.clean_target_cache:
            cls_t, keys_t, sim_s = run.clean_target_cache[cache_key]
        else:
            cls_t = keys_t = sim_s = None
            if need_app or need_id:
                cls_t, keys_t = _feature_views(backbone, config, view_t, with_grad=False)
            if need_structure:
                _, keys_s = _feature_views(backbone, config, view_s, with_grad=False)
                sim_s = key_self_similarity(keys_s)
            if cache_key is not None:
                run.clean_target_cache[cache_key] = (cls_t, keys_t, sim_s)

        if need_app or need_structure:
            out_s = model(view_s.unsqueeze(0))[0]
            cls_o, keys_o = _feature_views(backbone, config, out_s, with_grad=True)
            if need_app:
                app_terms.append(appearance_loss(cls_t, cls_o))
            if need_structure:
                sim_o = key_self_similarity(keys_o)
                structure_terms.append(structure_loss(sim_s, sim_o))
        if need_id:
            out_t = model(view_t.unsqueeze(0))[0]
            _, keys_rt = _feature_views(backbone, config, out_t, with_grad=True)
            id_terms.append(identity_loss(keys_t, keys_rt))

    def _mean(terms):
        return sum(terms) / len(terms) if terms else torch.zeros(())

    app = _mean(app_terms)
    structure = _mean(structure_terms)
    ident = _mean(id_terms)
    # accumulate the weighted sum in double so the logged total re-adds
    # exactly from the logged components (the terms stay model precision)
    total = torch.zeros((), dtype=torch.float64)
    if need_app:
        total = total + app.double()
    if need_structure:
        total = total + config.weights.alpha * structure.double()
    if need_id:
        total = total + config.weights.beta * ident.double()
    components = {
        "app": float(app.detach()) if need_app else 0.0,
        "structure": float(structure.detach()) if need_structure else 0.0,
        "id": float(ident.detach()) if need_id else 0.0,
    }
    return total, components


def train_step(backbone: Backbone, run: RunState, batch,
               run_dir: Optional[Path] = None) -> LossReport:
    """One optimization step on a batch of view pairs."""
    config = run.config
    run.model.train()
    total, comps = compute_batch_losses(backbone, config, run, batch)
    if not torch.isfinite(total) or not all(math.isfinite(v) for v in comps.values()):
        _dump_diagnostics(run_dir, run.iteration + 1, batch, comps)
        raise NumericalError(
            f"non-finite loss at iteration {run.iteration + 1}: {comps}"
        )
    run.optimizer.zero_grad(set_to_none=True)
    total.backward()
    run.optimizer.step()
    run.iteration += 1
    report = LossReport(iteration=run.iteration, app=comps["app"],
                        structure=comps["structure"], id=comps["id"],
                        total=float(total.detach()))
    run.loss_history.append(report)
    return report


def _dump_diagnostics(run_dir, iteration, batch, comps):
    if run_dir is None:
        return
    out = Path(run_dir) / "diagnostics" / f"iter_{iteration}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "losses.json").write_text(json.dumps({"iteration": iteration, **comps}))
    for i, (vs, vt, clean) in enumerate(batch):
        save_image(vs, out / f"example{i}_structure{'_clean' if clean else ''}.png")
        save_image(vt, out / f"example{i}_appearance{'_clean' if clean else ''}.png")


def build_run_state(config: TrainConfig, generator_config: Optional[GeneratorConfig] = None,
                    policy: Optional[AugmentationPolicy] = None) -> RunState:
    """Fresh run state with streams derived from the run seed (augmentation
    uses the seed itself, generator init uses seed+1 unless pinned)."""
    if generator_config is None:
        generator_config = GeneratorConfig(seed=config.seed + 1)
    model = init_generator(generator_config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps,
    )
    aug_gen = torch.Generator().manual_seed(config.seed)
    return RunState(config=config, model=model, optimizer=optimizer,
                    aug_gen=aug_gen, policy=policy or AugmentationPolicy())


def save_run_state(run: RunState, path) -> None:
    payload = {
        "iteration": run.iteration,
        "model": run.model.state_dict(),
        "optimizer": run.optimizer.state_dict(),
        "aug_gen": run.aug_gen.get_state(),
        "loss_history": [r.as_dict() for r in run.loss_history],
        "train_config": asdict(run.config),
        "generator_config": asdict(run.model.config),
        "policy": asdict(run.policy),
    }
    torch.save(payload, path)


def load_run_state(path) -> RunState:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"run state file not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    tc = dict(payload["train_config"])
    tc["weights"] = LossWeights(**tc["weights"])
    config = TrainConfig(**tc)
    gc = dict(payload["generator_config"])
    gc["encoder_channels"] = tuple(gc["encoder_channels"])
    generator_config = GeneratorConfig(**gc)
    model = UNetGenerator(generator_config)
    model.load_state_dict(payload["model"])
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps,
    )
    optimizer.load_state_dict(payload["optimizer"])
    aug_gen = torch.Generator()
    aug_gen.set_state(payload["aug_gen"])
    pol = dict(payload["policy"])
    for key, value in pol.items():
        if isinstance(value, list):
            pol[key] = tuple(value)
    run = RunState(config=config, model=model, optimizer=optimizer,
                   aug_gen=aug_gen, policy=AugmentationPolicy(**pol),
                   iteration=int(payload["iteration"]))
    run.loss_history = [LossReport(**r) for r in payload["loss_history"]]
    return run


def _append_loss_line(run_dir, report: LossReport):
    with open(Path(run_dir) / LOSS_LOG_NAME, "a") as f:
        f.write(json.dumps(report.as_dict()) + "\n")


def _rewrite_loss_log(run_dir, history):
    with open(Path(run_dir) / LOSS_LOG_NAME, "w") as f:
        for r in history:
            f.write(json.dumps(r.as_dict()) + "\n")


def read_loss_log(run_dir) -> List[dict]:
    path = Path(run_dir) / LOSS_LOG_NAME
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _snapshot_output(run: RunState, structure_img, tag, run_dir):
    run.model.eval()
    with torch.no_grad():
        out = run.model(structure_img.unsqueeze(0))[0]
    save_image(out, Path(run_dir) / "outputs" / f"{tag}.png")
    run.model.train()
    return out


def _checkpoint(run: RunState, run_dir) -> Path:
    ckpt_dir = Path(run_dir) / "checkpoints" / f"iter_{run.iteration}"
    save_generator_checkpoint(run.model, ckpt_dir)
    save_run_state(run, ckpt_dir / RUN_STATE_NAME)
    return ckpt_dir


def latest_checkpoint(run_dir) -> Optional[Path]:
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        return None
    best = None
    for child in root.iterdir():
        if child.is_dir() and child.name.startswith("iter_"):
            try:
                k = int(child.name.split("_", 1)[1])
            except ValueError:
                continue
            if best is None or k > best[0]:
                best = (k, child)
    return best[1] if best else None


def train(structure_img: torch.Tensor, appearance_img: torch.Tensor,
          config: TrainConfig, backbone: Backbone, run_dir,
          generator_config: Optional[GeneratorConfig] = None,
          policy: Optional[AugmentationPolicy] = None,
          resume_state: Optional[RunState] = None) -> TrainResult:
    """Full training run over the single input pair.

    Each step draws one augmented view per image; every
    ``clean_pair_period`` iterations the unaugmented pair is appended to
    the batch.  Writes ``losses.log``, periodic checkpoints and outputs
    into ``run_dir`` and returns the final full-resolution output.
    """
    validate_image(structure_img)
    validate_image(appearance_img)
    config.validate_against_backbone(backbone)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    if config.deterministic:
        torch.use_deterministic_algorithms(True)

    checksum_before = backbone.checksum()
    if resume_state is not None:
        run = resume_state
        _rewrite_loss_log(run_dir, run.loss_history)
        run_manifest.append_event(run_dir, "resumed", iteration=run.iteration)
    else:
        run = build_run_state(config, generator_config, policy)
        _rewrite_loss_log(run_dir, [])
        run_manifest.append_event(
            run_dir, "training_started",
            seed=config.seed, total_iterations=config.total_iterations,
            backbone_checksum=checksum_before,
        )

    run.model.train()
    while run.iteration < config.total_iterations:
        upcoming = run.iteration + 1
        view_s = sample_structure_view(structure_img, run.policy, run.aug_gen)
        view_t = sample_appearance_view(appearance_img, run.policy, run.aug_gen)
        batch = [(view_s, view_t, False)]
        if upcoming % config.clean_pair_period == 0:
            batch.append((structure_img, appearance_img, True))
        report = train_step(backbone, run, batch, run_dir=run_dir)
        _append_loss_line(run_dir, report)
        if config.log_period and report.iteration % config.log_period == 0:
            print(f"iter {report.iteration}: total={report.total:.4f} "
                  f"app={report.app:.4f} structure={report.structure:.4f} "
                  f"id={report.id:.4f}")
        if (config.checkpoint_period and
                report.iteration % config.checkpoint_period == 0 and
                report.iteration < config.total_iterations):
            _checkpoint(run, run_dir)
            _snapshot_output(run, structure_img, f"intermediate_{report.iteration}", run_dir)

    ckpt_dir = _checkpoint(run, run_dir)
    run.model.eval()
    with torch.no_grad():
        final = run.model(structure_img.unsqueeze(0))[0]
    save_image(final, run_dir / "outputs" / "final.png")

    checksum_after = backbone.checksum()
    run_manifest.append_event(
        run_dir, "training_finished", iteration=run.iteration,
        final_total=run.loss_history[-1].total if run.loss_history else None,
        backbone_checksum=checksum_after,
        backbone_frozen=checksum_after == checksum_before,
    )
    return TrainResult(run_dir=run_dir, final_image=final, checkpoint_dir=ckpt_dir,
                       loss_history=run.loss_history,
                       backbone_checksum_before=checksum_before,
                       backbone_checksum_after=checksum_after)


def resume(run_dir, backbone: Backbone, structure_img, appearance_img,
           total_iterations: Optional[int] = None) -> TrainResult:
    """Continue a run from its newest checkpoint (bit-exact continuation)."""
    ckpt = latest_checkpoint(run_dir)
    if ckpt is None:
        raise InputError(f"no checkpoint to resume from in {run_dir}")
    run = load_run_state(ckpt / RUN_STATE_NAME)
    if total_iterations is not None:
        run.config.total_iterations = total_iterations
    return train(structure_img, appearance_img, run.config, backbone, run_dir,
                 resume_state=run)
