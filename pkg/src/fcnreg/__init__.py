"""Unsupervised deformable registration of 3-D volumes with fully convolutional networks.

Everything runs on numpy: a small reverse-mode autodiff engine
(:mod:`fcnreg.tensor`), differentiable trilinear warping, an NCC + TV
objective, three network variants, Adam training, direct field optimisation,
synthetic data and evaluation metrics.
"""
from .evaluation import (
    dice,
    endpoint_error,
    evaluate_pairs,
    mean_volume,
    metrics_csv,
    ncc_value,
)
from .io import read_volume, write_volume
from .losses import LossWeights, multires_loss, ncc, registration_loss, tv_l1
from .network import ArchitectureConfig, Network, build_network, load_model, save_model
from .synth import SynthParams, make_base_texture, make_corpus, make_synthetic_pair, synth_field
from .training import (
    DirectConfig,
    TrainConfig,
    adam_step,
    preset,
    register_direct,
    register_infer,
    train_network,
)
from .volume import DisplacementField, Volume
from .warp import upsample_field, warp_nearest, warp_trilinear

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "DirectConfig", "DisplacementField", "LossWeights", "Network",
    "SynthParams", "TrainConfig", "Volume", "adam_step", "build_network", "dice",
    "endpoint_error", "evaluate_pairs", "load_model", "make_base_texture", "make_corpus",
    "make_synthetic_pair", "mean_volume", "metrics_csv", "multires_loss", "ncc",
    "ncc_value", "preset",
    "read_volume", "register_direct", "register_infer", "registration_loss", "save_model",
    "synth_field", "train_network", "tv_l1", "upsample_field", "warp_nearest",
    "warp_trilinear", "write_volume",
]
