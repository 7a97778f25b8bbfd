"""Layout-controlled multi-view driving video generation at desk scale."""

from .diffusion import LAMBDA_INFER, LAMBDA_TRAIN, NoiseSchedule, sample
from .layout import ControlTensor, render_sequence
from .pipeline import LatentCodec, RunConfig, generate, super_resolve, train_stage1, train_stage2
from .scene import SceneSequence, load_scene, parse_scene

__all__ = [
    "LAMBDA_INFER",
    "LAMBDA_TRAIN",
    "ControlTensor",
    "LatentCodec",
    "NoiseSchedule",
    "RunConfig",
    "SceneSequence",
    "generate",
    "load_scene",
    "parse_scene",
    "render_sequence",
    "sample",
    "super_resolve",
    "train_stage1",
    "train_stage2",
]
