"""Training objective: appearance, structure and identity terms.

All three terms are raw (unnormalized) norms of feature differences, exactly
as the weighted objective expects; the default weights were tuned against
this convention, so no division by element count happens anywhere.
"""

from dataclasses import dataclass

import torch

from .descriptors import SelfSimilarityMatrix


@dataclass
class LossWeights:
    """Relative weights of the structure (alpha) and identity (beta) terms."""

    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = float(getattr(self, name))
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    """Per-iteration loss record; ``total`` is the weighted sum actually
    optimized (disabled terms are logged as 0)."""

    iteration: int
    app: float
    structure: float
    id: float
    total: float

    def as_dict(self):
        return {"iteration": self.iteration, "app": self.app,
                "structure": self.structure, "id": self.id, "total": self.total}


def appearance_loss(cls_target: torch.Tensor, cls_output: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between the two last-layer [CLS] tokens."""
    if cls_target.shape != cls_output.shape:
        raise ValueError(
            f"[CLS] dimension mismatch: {tuple(cls_target.shape)} vs {tuple(cls_output.shape)}"
        )
    return (cls_target - cls_output).norm(p=2, dim=-1).mean() \
        if cls_target.dim() > 1 else (cls_target - cls_output).norm(p=2)


def structure_loss(sim_source: SelfSimilarityMatrix, sim_output: SelfSimilarityMatrix) -> torch.Tensor:
    """Frobenius distance between the two key self-similarity matrices."""
    a, b = sim_source.values, sim_output.values
    if a.shape != b.shape:
        raise ValueError(
            f"self-similarity shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}: "
            "process both images at the same grid size before comparing"
        )
    diff = a - b
    if diff.dim() == 2:
        return diff.norm(p="fro")
    return diff.flatten(-2).norm(p=2, dim=-1).mean()


def identity_loss(keys_target: torch.Tensor, keys_regen: torch.Tensor) -> torch.Tensor:
    """Frobenius distance between target keys and regenerated-image keys."""
    if keys_target.shape != keys_regen.shape:
        raise ValueError(
            f"key matrix shape mismatch: {tuple(keys_target.shape)} vs {tuple(keys_regen.shape)}"
        )
    diff = keys_target - keys_regen
    if diff.dim() == 2:
        return diff.norm(p="fro")
    return diff.flatten(-2).norm(p=2, dim=-1).mean()


def transfer_loss(app, structure, id, weights: LossWeights):
    """Weighted total: app + alpha * structure + beta * id."""
    for name, value in (("app", app), ("structure", structure), ("id", id)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError(f"loss component '{name}' is non-finite: {v}")
    return app + weights.alpha * structure + weights.beta * id
