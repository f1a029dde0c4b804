"""Constrained layout diffusion on CPU."""
from .conditioning import TaskKind
from .constraints import ConstraintWeightSchedule, solve_tau
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, make_linear_schedule
from .generate import generate, refine
from .kernels import BACKEND
from .layout import Element, Layout, decode_layout, encode_layout
from .metrics import evaluate
from .postprocess import PostConfig, postprocess
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConstraintWeightSchedule",
    "Denoiser",
    "DenoiserConfig",
    "Element",
    "Layout",
    "NoiseSchedule",
    "PostConfig",
    "SamplerConfig",
    "TaskKind",
    "TrainConfig",
    "ddim_sample",
    "decode_layout",
    "encode_layout",
    "evaluate",
    "generate",
    "load_checkpoint",
    "make_linear_schedule",
    "postprocess",
    "refine",
    "save_checkpoint",
    "solve_tau",
    "train",
]
