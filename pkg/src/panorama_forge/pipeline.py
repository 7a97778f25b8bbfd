"""Two-stage training / inference orchestration, latent codec and 2x upscaling.

Pixel tensors are ``(V, T, H, W, 3)`` float32 in roughly [-1, 1]. Latents
follow :mod:`panorama_forge.diffusion`: ``(T, C, h, V*w)``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.linalg import hadamard

from . import tensorio
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    TrainingBatch,
    build_network_input,
    loss_gradient,
    sgd_step,
)
from .diffusion import DDIM_STEPS, LAMBDA_INFER, LAMBDA_TRAIN, NoisePrior, NoiseSchedule, sample
from .layout import BOX, DEFAULT_DMAX, DEPTH, DEPTH_BINS, POSE, ROAD, render_sequence
from .rng import SeededRng
from .scene import SceneSequence, load_scene, text_attribute_embedding

log = logging.getLogger(__name__)

SR_MODES = ("none", "resize", "plugin")
SR_FACTOR = 2


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# -- codec -------------------------------------------------------------------


@dataclass(frozen=True)
class EncodedVideo:
    latent: torch.Tensor  # (T, C, h, V*w)
    detail: torch.Tensor  # (T, 3*f*f - C, h, V*w)
    views: int


class LatentCodec:
    """Exact patch codec standing in for a learned VAE.

    Each ``f x f`` RGB patch is transformed per colour by a Sylvester
    Hadamard matrix scaled to be orthogonal, then by ``1/f``. The latent keeps
    the three colour means and the green left/right contrast; the remaining
    coefficients travel as ``detail``. All entries are powers of two, so the
    round trip is bit-exact in float64 whenever a patch's non-zero values
    span less than 2**18 in magnitude (8/16-bit quantised images qualify).
    """

    def __init__(self, factor: int = 8, channels: int = 4):
        if factor < 1 or factor & (factor - 1):
            raise ConfigError(f"codec factor must be a power of two, got {factor}")
        n = factor * factor
        if not 1 <= channels <= 3 * n:
            raise ConfigError(f"latent channels must lie in [1, {3 * n}]")
        self.factor = factor
        self.channels = channels
        self._basis = hadamard(n).astype(np.float64) / factor  # orthogonal
        # coefficient index = colour * n + hadamard row
        preferred = [0, n, 2 * n] + ([n + factor // 2] if factor > 1 else [])
        order = [i for i in preferred if i < 3 * n][:channels]
        order += [i for i in range(3 * n) if i not in order]
        self._order = np.asarray(order)
        self._inverse_order = np.argsort(self._order)

    def _check_dims(self, H, W):
        if H % self.factor or W % self.factor:
            raise ValueError(f"image {H}x{W} not divisible by codec factor {self.factor}")

    def encode(self, images) -> EncodedVideo:
        imgs = np.asarray(images, dtype=np.float32).astype(np.float64)
        if imgs.ndim != 5 or imgs.shape[-1] != 3:
            raise ValueError(f"images must be (V, T, H, W, 3), got {imgs.shape}")
        V, T, H, W, _ = imgs.shape
        self._check_dims(H, W)
        f, h, w = self.factor, H // self.factor, W // self.factor
        patches = imgs.reshape(V, T, h, f, w, f, 3).transpose(1, 0, 2, 4, 6, 3, 5).reshape(T, V, h, w, 3, f * f)
        coeff = (patches @ self._basis.T) / f  # (T, V, h, w, 3, n)
        coeff = coeff.reshape(T, V, h, w, 3 * f * f)[..., self._order]
        # -> (T, K, h, V*w)
        coeff = coeff.transpose(0, 4, 2, 1, 3).reshape(T, -1, h, V * w)
        coeff = torch.from_numpy(np.ascontiguousarray(coeff))
        return EncodedVideo(coeff[:, : self.channels], coeff[:, self.channels:], V)

    def decode(self, latent: torch.Tensor, views: int, detail: Optional[torch.Tensor] = None) -> np.ndarray:
        lat = latent.detach().to(torch.float64)
        T, C, h, VW = lat.shape
        if C != self.channels:
            raise ValueError(f"latent has {C} channels, codec expects {self.channels}")
        if VW % views:
            raise ValueError(f"latent width {VW} not divisible by {views} views")
        f, n, w = self.factor, self.factor * self.factor, VW // views
        if detail is None:
            detail = torch.zeros(T, 3 * n - C, h, VW, dtype=torch.float64)
        coeff = torch.cat([lat, detail.detach().to(torch.float64)], dim=1).numpy()
        coeff = coeff.reshape(T, 3 * n, h, views, w).transpose(0, 3, 2, 4, 1)[..., self._inverse_order]
        patches = (coeff.reshape(T, views, h, w, 3, n) * f) @ self._basis  # basis is symmetric orthogonal
        imgs = patches.reshape(T, views, h, w, 3, f, f).transpose(1, 0, 2, 5, 3, 6, 4).reshape(views, T, h * f, w * f, 3)
        return imgs.astype(np.float32)

    def roundtrip(self, images) -> np.ndarray:
        enc = self.encode(images)
        return self.decode(enc.latent, enc.views, enc.detail)


def encode_frames(images, codec: LatentCodec) -> torch.Tensor:
    return codec.encode(images).latent


# -- super resolution ----------------------------------------------------------


def bilinear_sample(image, ys, xs) -> np.ndarray:
    """Bilinear lookup of an ``(H, W, C)`` image at fractional pixel centres.

    Coordinates are in source pixel units (integer = a pixel centre) and are
    clamped to the image, so edges replicate.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    y = np.clip(np.asarray(ys, dtype=np.float64), 0, H - 1)
    x = np.clip(np.asarray(xs, dtype=np.float64), 0, W - 1)
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    y1, x1 = np.minimum(y0 + 1, H - 1), np.minimum(x0 + 1, W - 1)
    wy, wx = (y - y0)[..., None], (x - x0)[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def super_resolve(frames, mode: str = "resize", plugin: Optional[Callable] = None) -> np.ndarray:
    """2x spatial upscaling of ``(V, T, H, W, 3)`` frames.

    ``resize`` is half-pixel-centred bilinear interpolation with edge clamping;
    ``plugin`` delegates to an injected callable with the same contract.
    """
    arr = np.asarray(frames, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("frames contain non-finite values")
    V, T, H, W, C = arr.shape
    if mode == "none":
        return arr
    if mode == "plugin":
        if plugin is None:
            raise ConfigError("super-resolution plugin selected but none was provided")
        out = np.asarray(plugin(arr), dtype=np.float32)
        if out.shape != (V, T, SR_FACTOR * H, SR_FACTOR * W, C):
            raise ValueError(f"plugin returned {out.shape}, expected {(V, T, SR_FACTOR * H, SR_FACTOR * W, C)}")
        return out
    if mode != "resize":
        raise ConfigError(f"unknown super-resolution mode {mode!r}")
    x = torch.from_numpy(arr.reshape(V * T, H, W, C)).permute(0, 3, 1, 2).to(torch.float64)
    up = F.interpolate(x, scale_factor=SR_FACTOR, mode="bilinear", align_corners=False)
    return up.permute(0, 2, 3, 1).reshape(V, T, SR_FACTOR * H, SR_FACTOR * W, C).numpy().astype(np.float32)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    width: int = 512  # per-view pixels before super-resolution
    height: int = 256
    frames: int = 8
    views: Optional[int] = None  # None: take from the scene
    ddim_steps: int = DDIM_STEPS
    lambda_train: float = LAMBDA_TRAIN
    lambda_infer: float = LAMBDA_INFER
    seed: int = 0
    schedule_steps: int = 1000
    schedule_offset: float = 0.008
    sr: str = "resize"
    d_max: float = DEFAULT_DMAX
    train_steps: int = 200
    lr: float = 0.05
    overfit: bool = False  # reuse one noise draw per batch (smoke tests)
    x0_clip: Optional[float] = 1.0  # codec latents lie in [-1, 1] for pixels in [-1, 1]; None disables
    codec_factor: int = 8
    latent_channels: int = 4
    # attention only at the coarse level keeps full-resolution sampling tractable on CPU
    denoiser: dict = field(default_factory=lambda: {"attention_levels": [1]})

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("width", "height", "frames", "ddim_steps", "schedule_steps", "codec_factor",
                     "latent_channels"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.train_steps < 0:
            raise ConfigError("train_steps must be >= 0")
        if self.views is not None and self.views < 1:
            raise ConfigError("views must be >= 1")
        if self.lambda_train < 0 or self.lambda_infer < 0:
            raise ConfigError("noise-prior lambdas must be non-negative")
        if self.sr not in SR_MODES:
            raise ConfigError(f"sr must be one of {SR_MODES}, got {self.sr!r}")
        if self.ddim_steps > self.schedule_steps:
            raise ConfigError("ddim_steps cannot exceed schedule_steps")
        if self.x0_clip is not None and not self.x0_clip > 0:
            raise ConfigError("x0_clip must be positive or null")
        if not self.d_max > 0 or not self.lr > 0:
            raise ConfigError("d_max and lr must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        try:
            cfg = self.denoiser_config(stage=2)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"denoiser: {exc}") from None
        mult = self.codec_factor * 2 ** (cfg.levels - 1)
        if self.width % mult or self.height % mult:
            raise ConfigError(f"resolution {self.width}x{self.height} must be divisible by {mult}")

    def denoiser_config(self, stage: int) -> DenoiserConfig:
        extra = dict(self.denoiser)
        for key in ("latent_channels", "cond_channels"):
            if key in extra:
                raise ConfigError(f"denoiser.{key} is derived from the run config")
        return DenoiserConfig(
            latent_channels=self.latent_channels,
            cond_channels=0 if stage == 1 else self.latent_channels,
            **extra,
        )

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.cosine(self.schedule_steps, self.schedule_offset)

    def codec(self) -> LatentCodec:
        return LatentCodec(self.codec_factor, self.latent_channels)

    @property
    def output_size(self) -> tuple:
        k = 1 if self.sr == "none" else SR_FACTOR
        return self.height * k, self.width * k

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field {unknown[0]!r}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


# -- data ----------------------------------------------------------------------


@dataclass
class Sample:
    scene: SceneSequence
    frames: Optional[np.ndarray] = None  # (V, T, H, W, 3) ground-truth pixels
    name: str = ""


def synthesize_frames(control) -> np.ndarray:
    """Deterministic stand-in camera frames painted from a control tensor.

    Used when a scene has no recorded imagery: a sky/ground gradient tinted
    by the ray direction, grey box bodies shaded by depth bin, category
    coloured box edges and lane coloured roads. Output in [-1, 1].
    """
    c = np.asarray(control.data if hasattr(control, "data") else control, dtype=np.float64)
    V, T, H, W, _ = c.shape
    rows = np.linspace(0.8, 0.2, H)[None, None, :, None, None]
    img = 0.6 * rows + 0.4 * c[..., POSE] / 255.0
    occ = c[..., DEPTH]
    filled = occ.max(-1, keepdims=True) > 0
    shade = 0.9 - 0.6 * np.argmax(occ, axis=-1)[..., None] / DEPTH_BINS
    img = np.where(filled, shade, img)
    road = c[..., ROAD]
    img = np.where(road.max(-1, keepdims=True) > 0, road, img)
    box = c[..., BOX]
    img = np.where(box.max(-1, keepdims=True) > 0, box, img)
    return (img * 2.0 - 1.0).astype(np.float32)


def load_dataset(directory) -> List[Sample]:
    """Scenes are ``*.json``; optional ground-truth frames sit beside them as ``<stem>.pnc``."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(directory)
    samples = []
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".json"):
            continue
        stem = name[:-5]
        scene = load_scene(os.path.join(directory, name))
        frames_path = os.path.join(directory, stem + ".pnc")
        frames = tensorio.load(frames_path) if os.path.exists(frames_path) else None
        samples.append(Sample(scene, frames, stem))
    if not samples:
        raise DatasetError(f"no scene files (*.json) in {directory}")
    return samples


def _window(scene: SceneSequence, n: int) -> SceneSequence:
    return SceneSequence(scene.frames[:n], scene.attributes) if scene.num_frames > n else scene


def prepare_batch(sample: Sample, config: RunConfig, stage: int, codec: Optional[LatentCodec] = None) -> TrainingBatch:
    codec = codec or config.codec()
    scene = _window(sample.scene, config.frames)
    T, V = scene.num_frames, scene.num_views
    if config.views is not None and config.views != V:
        raise DatasetError(f"{sample.name or 'scene'}: has {V} views, config expects {config.views}")
    if stage == 2 and T < 2:
        raise DatasetError(f"{sample.name or 'scene'}: stage-2 training needs >= 2 frames, got {T}")
    control = render_sequence(scene, config.width, config.height, config.d_max)
    if sample.frames is not None:
        frames = np.asarray(sample.frames, dtype=np.float32)[:, :T]
        expected = (V, T, config.height, config.width, 3)
        if frames.shape != expected:
            raise DatasetError(f"{sample.name}: frames have shape {frames.shape}, expected {expected}")
    else:
        frames = synthesize_frames(control)
    latent = codec.encode(frames).latent
    text = text_attribute_embedding(scene.attributes, config.denoiser_config(stage).text_dim)
    z1 = latent[:1].clone() if stage == 2 else None
    return TrainingBatch(x=latent, views=V, control=control.data, text=text, z1=z1)


@dataclass
class TrainResult:
    weights: Denoiser
    losses: List[float]
    stage: int


def _train(samples: Sequence[Sample], config: RunConfig, stage: int, init: Optional[Denoiser] = None,
           callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    if not samples:
        raise DatasetError("empty dataset")
    codec = config.codec()
    batches = [prepare_batch(s, config, stage, codec) for s in samples]
    lam = config.lambda_train if stage == 2 else 0.0
    log.info("stage %d training: %d steps, lr=%g, lambda_train=%g, seed=%d",
             stage, config.train_steps, config.lr, lam, config.seed)
    sched = config.schedule()
    weights = init if init is not None else Denoiser(config.denoiser_config(stage), seed=config.seed)
    root = SeededRng(config.seed).split("train", stage)
    losses = []
    for step in range(config.train_steps):
        bi = step % len(batches)
        rng = root.split("batch", bi) if config.overfit else root.split("step", step)
        grads, loss = loss_gradient(weights, batches[bi], sched, lam, rng=rng, return_loss=True)
        losses.append(float(loss))
        if callback is not None:
            callback(step, float(loss))
        weights = sgd_step(weights, grads, config.lr)
    return TrainResult(weights, losses, stage)


def train_stage1(samples: Sequence[Sample], config: RunConfig, **kw) -> TrainResult:
    """Multi-view image weights: every frame is an independent sample, temporal attention bypassed."""
    return _train(samples, config, 1, **kw)


def train_stage2(samples: Sequence[Sample], config: RunConfig, **kw) -> TrainResult:
    """Video weights conditioned on the ground-truth first-frame latent."""
    return _train(samples, config, 2, **kw)


# -- inference -----------------------------------------------------------------


@dataclass
class GenerationResult:
    frames: np.ndarray  # (V, T, H', W', 3)
    latent: torch.Tensor  # stage-2 output (T, C, h, V*w)
    first_frame_latent: torch.Tensor  # stage-1 output (1, C, h, V*w)
    control: np.ndarray


def stage2_denoiser(weights2: Denoiser, z1: torch.Tensor, text, control, views: int):
    """Noise predictor for video sampling with the first-frame latent held fixed as condition."""

    def predict(x, t):
        net_in = build_network_input(x, z1, weights2.cfg.cond_channels)
        return weights2(net_in, t, text=text, control=control, mode="video", views=views)

    return predict


def generate(scene: SceneSequence, weights1: Denoiser, weights2: Denoiser, config: RunConfig,
             plugin: Optional[Callable] = None, lambda_infer: Optional[float] = None) -> GenerationResult:
    """Stage 1 samples the first multi-view frame, stage 2 the whole clip from it."""
    lam = config.lambda_infer if lambda_infer is None else float(lambda_infer)
    if lam < 0:
        raise ConfigError("lambda_infer must be non-negative")
    if weights2.cfg.cond_channels != config.latent_channels:
        raise ConfigError("stage-2 weights must take the first-frame latent as extra input channels")
    scene = _window(scene, config.frames)
    T, V = scene.num_frames, scene.num_views
    if config.views is not None and config.views != V:
        raise ConfigError(f"scene has {V} views, config expects {config.views}")
    codec = config.codec()
    sched = config.schedule()
    control = render_sequence(scene, config.width, config.height, config.d_max).data
    text = text_attribute_embedding(scene.attributes, weights1.cfg.text_dim)
    text2 = text_attribute_embedding(scene.attributes, weights2.cfg.text_dim)
    h, w = config.height // codec.factor, config.width // codec.factor
    if weights1.cfg.cond_channels != 0:
        raise ConfigError("stage-1 weights must not expect condition channels")
    root = SeededRng(config.seed).split("generate")
    log.info("generate: T=%d V=%d steps=%d lambda_infer=%g seed=%d", T, V, config.ddim_steps, lam, config.seed)

    with torch.no_grad():
        first = control[:, :1]
        z1 = sample(
            lambda x, t: weights1(x, t, text=text, control=first, mode="image", views=V),
            sched, (1, codec.channels, h, V * w), root.split("stage1"), config.ddim_steps, views=V,
            clip_x0=config.x0_clip,
        )

        stage2 = stage2_denoiser(weights2, z1, text2, control, V)
        prior = NoisePrior(z1, lam) if lam > 0 else None
        video = sample(stage2, sched, (T, codec.channels, h, V * w), root.split("stage2"),
                       config.ddim_steps, prior=prior, views=V, clip_x0=config.x0_clip)
    frames = codec.decode(video, V)
    frames = super_resolve(frames, config.sr, plugin)
    return GenerationResult(frames, video, z1, control)
