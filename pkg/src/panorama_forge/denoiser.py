"""Noise-prediction UNet with decomposed 4D attention and a layout control branch.

Internally activations are kept per view, ``(T*V, C, H, W)``, so that
convolutions and normalisation never mix views; views interact only through
cross-view attention and frames only through cross-frame attention.
"""

from __future__ import annotations

import copy
import json
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorio
from .attention import cross_frame_attention, cross_view_attention, cyclic_adjacency, intra_view_attention
from .diffusion import NoiseSchedule, forward_diffuse, initial_noise
from .layout import NUM_CHANNELS, POSE
from .rng import SeededRng

MODES = ("image", "video")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    cond_channels: int = 0
    base_channels: int = 16
    levels: int = 2
    blocks_per_level: int = 1
    heads: int = 1
    control_channels: int = NUM_CHANNELS
    text_dim: int = 16
    groups: int = 4
    attention_levels: Optional[tuple] = None  # None: every level

    def __post_init__(self):
        if self.attention_levels is not None:
            object.__setattr__(self, "attention_levels", tuple(int(x) for x in self.attention_levels))
        for name in ("latent_channels", "base_channels", "levels", "blocks_per_level", "heads",
                     "control_channels", "text_dim", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.cond_channels < 0:
            raise ValueError("cond_channels must be >= 0")
        for ch in self.channels:
            if ch % self.heads or ch % self.groups:
                raise ValueError(f"channel width {ch} must be divisible by heads={self.heads} and groups={self.groups}")

    @property
    def channels(self) -> tuple:
        return tuple(self.base_channels * (lvl + 1) for lvl in range(self.levels))

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.cond_channels

    @property
    def emb_dim(self) -> int:
        return 4 * self.base_channels

    def has_attention(self, level: int) -> bool:
        return self.attention_levels is None or level in self.attention_levels

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["attention_levels"] is not None:
            d["attention_levels"] = list(d["attention_levels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


# -- layout helpers ----------------------------------------------------------


def to_views(x: torch.Tensor, views: int) -> torch.Tensor:
    """(T, C, H, V*W) -> (T*V, C, H, W)."""
    T, C, H, VW = x.shape
    if VW % views:
        raise ValueError(f"panoramic width {VW} not divisible by {views} views")
    W = VW // views
    return x.reshape(T, C, H, views, W).permute(0, 3, 1, 2, 4).reshape(T * views, C, H, W)


def from_views(y: torch.Tensor, views: int) -> torch.Tensor:
    """(T*V, C, H, W) -> (T, C, H, V*W)."""
    TV, C, H, W = y.shape
    T = TV // views
    return y.reshape(T, views, C, H, W).permute(0, 2, 3, 1, 4).reshape(T, C, H, views * W)


def _tokens(h: torch.Tensor, views: int) -> torch.Tensor:
    TV, C, H, W = h.shape
    return h.reshape(TV // views, views, C, H * W).transpose(-1, -2)


def _untokens(tok: torch.Tensor, H: int, W: int) -> torch.Tensor:
    T, V, S, C = tok.shape
    return tok.transpose(-1, -2).reshape(T * V, C, H, W)


def timestep_embedding(t, dim: int, dtype=torch.float64) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1))
    args = torch.as_tensor(t, dtype=dtype).reshape(-1, 1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# -- blocks ------------------------------------------------------------------


@dataclass
class _Ctx:
    """Per-call state threaded through every block."""

    emb: torch.Tensor
    frames: int
    views: int
    mode: str
    adjacency: list
    trace: Optional[dict] = None
    prefix: str = ""

    def record(self, name, value):
        if self.trace is not None:
            self.trace[f"{self.prefix}{name}"] = value


class ConvSubBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, in_ch)
        self.film = nn.Linear(emb_dim, 2 * in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else nn.Identity()

    def forward(self, x, ctx: _Ctx):
        scale, shift = self.film(ctx.emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm(x) * (1 + scale) + shift
        return self.skip(x) + self.conv(F.silu(h))


class AttnSubBlock(nn.Module):
    """Pre-norm residual attention restricted by one of the decomposed kernels."""

    def __init__(self, ch, groups, heads, kind):
        super().__init__()
        assert kind in ("intra", "view", "frame")
        self.kind = kind
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, h, ctx: _Ctx):
        if self.kind == "view" and not any(ctx.adjacency):
            return h
        _, _, H, W = h.shape
        tok = _tokens(self.norm(h), ctx.views)
        q, k, v = self.to_q(tok), self.to_k(tok), self.to_v(tok)
        if self.kind == "intra":
            a = intra_view_attention(q, k, v, heads=self.heads)
        elif self.kind == "view":
            a = cross_view_attention(q, k, v, ctx.adjacency, heads=self.heads)
        elif ctx.mode == "image":
            # temporal module bypassed: each token sees only itself
            a = v
        else:
            a = cross_frame_attention(q, k, v, heads=self.heads)
        upd = self.to_out(a)
        if self.kind == "view":
            lonely = [i for i, nb in enumerate(ctx.adjacency) if not nb]
            if lonely:
                keep = torch.ones(ctx.views, dtype=upd.dtype)
                keep[lonely] = 0
                upd = upd * keep[None, :, None, None]
        return h + _untokens(upd, H, W)


class FeedForward(nn.Module):
    def __init__(self, ch, groups, mult=2):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.fc1 = nn.Conv2d(ch, mult * ch, 1)
        self.fc2 = nn.Conv2d(mult * ch, ch, 1)

    def forward(self, h, ctx: _Ctx):
        return h + self.fc2(F.gelu(self.fc1(self.norm(h))))


class Block(nn.Module):
    """conv -> intra-view -> cross-view -> cross-frame -> feed-forward, all residual."""

    def __init__(self, in_ch, out_ch, cfg: DenoiserConfig, attention: bool):
        super().__init__()
        self.conv = ConvSubBlock(in_ch, out_ch, cfg.emb_dim, cfg.groups)
        if attention:
            self.intra = AttnSubBlock(out_ch, cfg.groups, cfg.heads, "intra")
            self.view = AttnSubBlock(out_ch, cfg.groups, cfg.heads, "view")
            self.frame = AttnSubBlock(out_ch, cfg.groups, cfg.heads, "frame")
        self.attention = attention
        self.ff = FeedForward(out_ch, cfg.groups)

    def forward(self, x, ctx: _Ctx, name=""):
        h = self.conv(x, ctx)
        ctx.record(f"{name}.conv", h)
        if self.attention:
            for sub in ("intra", "view", "frame"):
                h = getattr(self, sub)(h, ctx)
                ctx.record(f"{name}.{sub}", h)
        h = self.ff(h, ctx)
        ctx.record(f"{name}.ff", h)
        return h


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chs = cfg.channels
        self.conv_in = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chs[0]
        for lvl, ch in enumerate(chs):
            level = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                level.append(Block(prev, ch, cfg, cfg.has_attention(lvl)))
                prev = ch
            self.blocks.append(level)
            if lvl < cfg.levels - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = Block(chs[-1], chs[-1], cfg, cfg.has_attention(cfg.levels - 1))

    def forward(self, x, ctx: _Ctx, hint=None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = []
        for lvl, level in enumerate(self.blocks):
            for i, blk in enumerate(level):
                h = blk(h, ctx, f"enc{lvl}.{i}")
                skips.append(h)
            if lvl < len(self.downs):
                h = self.downs[lvl](h)
        return skips, self.mid(h, ctx, "mid")


def _zero_conv(ch):
    conv = nn.Conv2d(ch, ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class Denoiser(nn.Module):
    """The full noise predictor; its parameters are one weight set (stage 1 or 2)."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.time_mlp = nn.Sequential(
                nn.Linear(cfg.base_channels, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim)
            )
            self.text_proj = nn.Linear(cfg.text_dim, cfg.emb_dim)
            self.encoder = Encoder(cfg)
            self.dec_blocks = nn.ModuleList()
            self.ups = nn.ModuleList()
            prev = chs[-1]
            for lvl in reversed(range(cfg.levels)):
                level = nn.ModuleList()
                for _ in range(cfg.blocks_per_level):
                    level.append(Block(prev + chs[lvl], chs[lvl], cfg, cfg.has_attention(lvl)))
                    prev = chs[lvl]
                self.dec_blocks.append(level)
                if lvl > 0:
                    self.ups.append(Upsample(chs[lvl]))
            self.out_norm = nn.GroupNorm(cfg.groups, chs[0])
            self.out_conv = nn.Conv2d(chs[0], cfg.latent_channels, 3, padding=1)

            self.control_adapter = nn.Sequential(
                nn.Conv2d(cfg.control_channels, chs[0], 3, padding=1), nn.SiLU(), nn.Conv2d(chs[0], chs[0], 3, padding=1)
            )
            self.control_encoder = copy.deepcopy(self.encoder)
            self.control_zero = nn.ModuleList(
                [_zero_conv(chs[lvl]) for lvl in range(cfg.levels) for _ in range(cfg.blocks_per_level)]
            )
            self.control_zero_mid = _zero_conv(chs[-1])
        self.double()

    @property
    def dtype(self):
        return self.out_conv.weight.dtype

    def embed(self, t, text) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels, self.dtype))
        if text is not None:
            text = torch.as_tensor(np.asarray(text), dtype=self.dtype).reshape(1, -1)
            if text.shape[-1] != self.cfg.text_dim:
                raise ValueError(f"text embedding has dim {text.shape[-1]}, expected {self.cfg.text_dim}")
            emb = emb + self.text_proj(text)
        return emb

    def _control_input(self, control, frames, views, H, W):
        c = torch.as_tensor(np.asarray(control) if not torch.is_tensor(control) else control, dtype=self.dtype)
        if c.dim() != 5 or c.shape[-1] != self.cfg.control_channels:
            raise ValueError(f"control must be (V, T, H, W, {self.cfg.control_channels}), got {tuple(c.shape)}")
        if c.shape[0] != views or c.shape[1] != frames:
            raise ValueError(f"control covers {c.shape[0]} views x {c.shape[1]} frames, latent has {views} x {frames}")
        c = c.permute(1, 0, 4, 2, 3).reshape(frames * views, c.shape[-1], c.shape[2], c.shape[3])
        scale = torch.ones(self.cfg.control_channels, dtype=self.dtype)
        scale[POSE] = 1.0 / 255.0
        c = c * scale[None, :, None, None]
        fh, fw = c.shape[2] // H, c.shape[3] // W
        if fh < 1 or fh != fw or c.shape[2] != fh * H or c.shape[3] != fw * W:
            raise ValueError(f"control resolution {tuple(c.shape[2:])} is not an integer multiple of latent {(H, W)}")
        if fh > 1:
            c = F.avg_pool2d(c, fh)
        return self.control_adapter(c)

    def forward(self, x_in, t, text=None, control=None, mode="video", views=1, adjacency=None, trace=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if x_in.dim() != 4 or x_in.shape[1] != self.cfg.in_channels:
            raise ValueError(f"input must be (T, {self.cfg.in_channels}, H, V*W), got {tuple(x_in.shape)}")
        T = x_in.shape[0]
        mult = 2 ** (self.cfg.levels - 1)
        if x_in.shape[2] % mult or (x_in.shape[3] // max(views, 1)) % mult:
            raise ValueError(f"latent height and per-view width must be divisible by {mult}")
        adjacency = cyclic_adjacency(views) if adjacency is None else [list(a) for a in adjacency]
        ctx = _Ctx(self.embed(t, text), T, views, mode, adjacency, trace)
        h = to_views(x_in.to(self.dtype), views)
        skips, mid = self.encoder(h, ctx)
        if control is not None:
            hint = self._control_input(control, T, views, h.shape[2], h.shape[3])
            ctx.prefix = "control."
            cskips, cmid = self.control_encoder(h, ctx, hint=hint)
            ctx.prefix = ""
            skips = [s + z(cs) for s, cs, z in zip(skips, cskips, self.control_zero)]
            mid = mid + self.control_zero_mid(cmid)
        h = mid
        for i, level in enumerate(self.dec_blocks):
            lvl = self.cfg.levels - 1 - i
            for j, blk in enumerate(level):
                h = blk(torch.cat([h, skips.pop()], dim=1), ctx, f"dec{lvl}.{j}")
            if i < len(self.ups):
                h = self.ups[i](h)
        out = self.out_conv(F.silu(self.out_norm(h)))
        return from_views(out, views)

    def reset_control_branch(self) -> None:
        """Re-copy the backbone encoder into the control branch and zero its projections."""
        self.control_encoder.load_state_dict(self.encoder.state_dict())
        with torch.no_grad():
            for conv in list(self.control_zero) + [self.control_zero_mid]:
                conv.weight.zero_()
                conv.bias.zero_()


def predict_noise(weights: Denoiser, x_in, t, text=None, control=None, mode="video", views=1, **kw):
    return weights(x_in, t, text=text, control=control, mode=mode, views=views, **kw)


# -- training ----------------------------------------------------------------


@dataclass
class TrainingBatch:
    """One scene window. ``z1`` present means stage-2 (video) training."""

    x: torch.Tensor  # (T, C, H, V*W) clean latent
    views: int
    control: Optional[np.ndarray] = None  # (V, T, Hp, Wp, 19)
    text: Optional[np.ndarray] = None
    z1: Optional[torch.Tensor] = None  # (1, C, H, V*W)

    @property
    def mode(self) -> str:
        return "image" if self.z1 is None else "video"


@dataclass
class TrainingDraw:
    t: int
    eps: torch.Tensor


def draw_training_noise(batch: TrainingBatch, sched: NoiseSchedule, rng: SeededRng) -> TrainingDraw:
    t = int(rng.split("timestep").integers(0, sched.steps))
    eps = initial_noise(tuple(batch.x.shape), rng.split("eps"), views=batch.views, dtype=batch.x.dtype)
    return TrainingDraw(t, eps)


def training_target(batch: TrainingBatch, draw: TrainingDraw, lam: float) -> torch.Tensor:
    """The noise actually added: Gaussian, plus lam * z1 on frames after the first."""
    if batch.z1 is None or lam == 0 or batch.x.shape[0] < 2:
        return draw.eps
    if batch.z1.shape != (1,) + tuple(batch.x.shape[1:]):
        raise ValueError(f"z1 shape {tuple(batch.z1.shape)} does not match one latent frame")
    mixed = draw.eps.clone()
    mixed[1:] = mixed[1:] + lam * batch.z1.to(mixed.dtype)
    return mixed


def build_network_input(x_t: torch.Tensor, z1: Optional[torch.Tensor], cond_channels: int) -> torch.Tensor:
    """Concatenate the first-frame condition at frame 0 and zeros elsewhere."""
    if cond_channels == 0:
        return x_t
    cond = torch.zeros(x_t.shape[0], cond_channels, *x_t.shape[2:], dtype=x_t.dtype)
    if z1 is not None:
        if z1.shape[1] != cond_channels:
            raise ValueError(f"condition has {z1.shape[1]} channels, network expects {cond_channels}")
        cond[0] = z1[0].to(x_t.dtype)
    return torch.cat([x_t, cond], dim=1)


def training_loss(weights: Denoiser, batch: TrainingBatch, sched: NoiseSchedule, lambda_train: float = 0.05,
                  rng: Optional[SeededRng] = None, draw: Optional[TrainingDraw] = None, return_parts: bool = False):
    if draw is None:
        if rng is None:
            raise ValueError("training_loss needs either rng or an explicit draw")
        draw = draw_training_noise(batch, sched, rng)
    if draw.eps.shape != batch.x.shape:
        raise ValueError(f"noise shape {tuple(draw.eps.shape)} != latent shape {tuple(batch.x.shape)}")
    target = training_target(batch, draw, lambda_train)
    x_t = forward_diffuse(batch.x, draw.t, sched, target)
    net_in = build_network_input(x_t, batch.z1, weights.cfg.cond_channels)
    pred = weights(net_in, draw.t, text=batch.text, control=batch.control, mode=batch.mode, views=batch.views)
    loss = torch.mean((pred - target) ** 2)
    if return_parts:
        return loss, {"target": target, "input": net_in, "prediction": pred, "draw": draw}
    return loss


def loss_gradient(weights: Denoiser, batch: TrainingBatch, sched: NoiseSchedule, lambda_train: float = 0.05,
                  rng: Optional[SeededRng] = None, draw: Optional[TrainingDraw] = None,
                  return_loss: bool = False):
    """Gradients of ``training_loss`` for every named parameter (reverse-mode autodiff)."""
    names, params = zip(*weights.named_parameters())
    with torch.enable_grad():
        loss = training_loss(weights, batch, sched, lambda_train, rng=rng, draw=draw)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = OrderedDict(
        (n, g.detach() if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)
    )
    return (out, loss.detach()) if return_loss else out


def sgd_step(weights: Denoiser, grads: Dict[str, torch.Tensor], lr: float) -> Denoiser:
    if not lr >= 0:
        raise ValueError("learning rate must be non-negative")
    params = dict(weights.named_parameters())
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"gradient names do not match parameters: {missing[:3]}")
    new = copy.deepcopy(weights)
    with torch.no_grad():
        for name, p in new.named_parameters():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            if lr != 0:
                p.sub_(lr * g.to(p.dtype))
    return new


# -- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.json"


def save_checkpoint(weights: Denoiser, directory, extra: Optional[dict] = None) -> None:
    """Write ``manifest.json`` plus one PNC1 blob per parameter tensor."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, (name, tensor) in enumerate(weights.state_dict().items()):
        fname = f"t{i:04d}.pnc"
        tensorio.save(os.path.join(directory, fname), tensor)
        entries.append({"name": name, "shape": list(tensor.shape), "file": fname})
    manifest = {"format": "PNC1", "config": weights.cfg.to_dict(), "tensors": entries, "meta": extra or {}}
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(directory) -> Denoiser:
    with open(os.path.join(directory, MANIFEST)) as fh:
        manifest = json.load(fh)
    model = Denoiser(DenoiserConfig.from_dict(manifest["config"]))
    state = model.state_dict()
    loaded = OrderedDict()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in state:
            raise KeyError(f"checkpoint tensor {name!r} is not a model parameter")
        arr = tensorio.load(os.path.join(directory, entry["file"]))
        if list(arr.shape) != list(state[name].shape) or list(arr.shape) != entry["shape"]:
            raise ValueError(f"{name}: shape {arr.shape} does not match {tuple(state[name].shape)}")
        loaded[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
    missing = set(state) - set(loaded)
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:3]}")
    model.load_state_dict(loaded)
    return model
