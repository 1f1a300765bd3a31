"""Semantic appearance transfer between a single image pair.

A frozen self-supervised ViT supplies the loss geometry: the deepest-layer
[CLS] token stands in for appearance and the self-similarity of deepest-layer
keys for structure.  A small U-Net generator is trained per image pair to
map the structure image onto the target appearance.
"""

from .archive import (WeightArchive, convert_vit_checkpoint, parameter_checksum,
                      synthetic_backbone_archive)
from .augmentation import (AugmentationPolicy, sample_appearance_view,
                           sample_structure_view)
from .backbone import (Backbone, BackboneConfig, FeatureViT, LayerFeatures,
                       dump_features, extract_cls, extract_keys, load_backbone,
                       preprocess)
from .descriptors import (PcaComponents, SelfSimilarityMatrix, export_pca_maps,
                          key_self_similarity, selfsim_pca)
from .errors import InputError, NumericalError, UsageError
from .generator import (GeneratorConfig, UNetGenerator, init_generator,
                        load_generator_checkpoint, save_generator_checkpoint)
from .image_io import load_image, save_image
from .inversion import (InversionConfig, InversionResult, InversionTarget,
                        capture_target, invert, invert_cls_across_layers)
from .losses import (LossReport, LossWeights, appearance_loss, identity_loss,
                     structure_loss, transfer_loss)
from .metrics import TransferReport, evaluate_transfer
from .trainer import (RunState, TrainConfig, TrainResult, build_run_state,
                      latest_checkpoint, load_run_state, read_loss_log, resume,
                      save_run_state, train, train_step)

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "Backbone", "BackboneConfig", "FeatureViT",
    "GeneratorConfig", "InputError", "InversionConfig", "InversionResult",
    "InversionTarget", "LayerFeatures", "LossReport", "LossWeights",
    "NumericalError", "PcaComponents", "RunState", "SelfSimilarityMatrix",
    "TrainConfig", "TrainResult", "TransferReport", "UNetGenerator",
    "UsageError", "WeightArchive", "appearance_loss", "build_run_state",
    "capture_target", "convert_vit_checkpoint", "dump_features", "evaluate_transfer",
    "export_pca_maps", "extract_cls", "extract_keys", "identity_loss",
    "init_generator", "invert", "invert_cls_across_layers", "key_self_similarity",
    "latest_checkpoint", "load_backbone", "load_generator_checkpoint", "load_image",
    "load_run_state", "parameter_checksum", "preprocess", "read_loss_log",
    "resume", "sample_appearance_view",
    "sample_structure_view", "save_generator_checkpoint", "save_image",
    "save_run_state", "selfsim_pca", "structure_loss",
    "synthetic_backbone_archive", "train", "train_step", "transfer_loss",
]
