"""Semi-supervised masked autoencoder: a ViT trained jointly on masked-patch
reconstruction and classification, with gated, consistency-filtered pseudo-labels."""
from .config import RunConfig, load_config
from .gate import GateConfig, GateState, gate_step
from .losses import LossWeights, ce_loss, cls_loss, recon_loss, total_loss
from .network import SSMAE, NetworkConfig
from .patches import MaskPlan, make_mask_plan, patchify, unpatchify
from .pseudo import filter_pseudo
from .trainer import Trainer, evaluate, export_reconstructions

__version__ = "0.1.0"

__all__ = [
    "GateConfig", "GateState", "LossWeights", "MaskPlan", "NetworkConfig", "RunConfig", "SSMAE",
    "Trainer", "ce_loss", "cls_loss", "evaluate", "export_reconstructions", "filter_pseudo",
    "gate_step", "load_config", "make_mask_plan", "patchify", "recon_loss", "total_loss", "unpatchify",
]
