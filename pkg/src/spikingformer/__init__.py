"""Spikingformer: spike-driven transformer with purity auditing and energy
estimation, on a minimal reverse-mode tensor engine."""

from .audit import PurityReport, firing_rate, record
from .energy import (
    EnergyReport,
    HardwareCostModel,
    LayerTrace,
    energy_neuromorphic,
    energy_static,
    sops,
    spikformer_recalc,
    trace_model,
)
from .layers import fuse_convbn
from .model import Model, ModelConfig, build, max_convbn_input, preset_config
from .neuron import LIFParams, MembraneState, lif_step, multistep_lif
from .tensor import Tensor, conv2d, heaviside, maxpool2d, surrogate_grad
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "EnergyReport",
    "HardwareCostModel",
    "LIFParams",
    "LayerTrace",
    "MembraneState",
    "Model",
    "ModelConfig",
    "PurityReport",
    "Tensor",
    "TrainConfig",
    "build",
    "conv2d",
    "energy_neuromorphic",
    "energy_static",
    "evaluate",
    "firing_rate",
    "fuse_convbn",
    "heaviside",
    "lif_step",
    "load_checkpoint",
    "max_convbn_input",
    "maxpool2d",
    "multistep_lif",
    "preset_config",
    "record",
    "save_checkpoint",
    "sops",
    "spikformer_recalc",
    "surrogate_grad",
    "trace_model",
    "train",
]
