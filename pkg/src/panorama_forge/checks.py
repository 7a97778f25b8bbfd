"""Randomised self-checks: factorised attention kernels against the dense
masked oracle, and autograd gradients against central finite differences.

Each attention trial ``i`` of a run with seed ``s`` uses case seed ``s + i``,
so a failure can be replayed alone with ``seed=<case seed>, trials=1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import torch

from .attention import (
    AttnMask,
    cross_frame_attention,
    cross_view_attention,
    cyclic_adjacency,
    intra_view_attention,
    joint_attention_oracle,
)
from .denoiser import Denoiser, DenoiserConfig, TrainingBatch, TrainingDraw, loss_gradient, training_loss
from .diffusion import NoiseSchedule
from .rng import SeededRng

ATTN_TOL = 1e-6
GRAD_TOL = 1e-3
FD_STEP = 1e-4

# stage-2 shaped network used by the gradient suite and the smoke tests
TINY_CONFIG = DenoiserConfig(latent_channels=4, cond_channels=4, base_channels=16, levels=2, heads=2)


@dataclass
class CaseFailure:
    suite: str
    seed: int
    detail: str
    deviation: float


@dataclass
class CheckReport:
    max_attention_dev: float = 0.0
    max_grad_rel_err: float = 0.0
    attention_cases: int = 0
    grad_entries: int = 0
    failures: List[CaseFailure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _kernels(adjacency):
    return {
        "intra_view": (lambda q, k, v, h: intra_view_attention(q, k, v, heads=h), AttnMask.intra_view()),
        "cross_view": (lambda q, k, v, h: cross_view_attention(q, k, v, adjacency, heads=h),
                       AttnMask.cross_view(adjacency)),
        "cross_frame": (lambda q, k, v, h: cross_frame_attention(q, k, v, heads=h), AttnMask.cross_frame()),
    }


def attention_case(case_seed: int, max_t=4, max_v=4, max_s=9, channels=8, fault: Optional[str] = None) -> Dict[str, float]:
    """Max-abs deviation of each kernel from the oracle on one random grid.

    ``fault`` names a kernel whose output is perturbed (checker self-test).
    """
    gen = SeededRng(case_seed).numpy()
    T = int(gen.integers(1, max_t + 1))
    V = int(gen.integers(2, max_v + 1))  # cross-view needs at least one neighbour
    S = int(gen.integers(1, max_s + 1))
    heads = int(gen.choice([h for h in (1, 2, 4) if channels % h == 0]))
    q, k, v = (torch.from_numpy(gen.standard_normal((T, V, S, channels)) * 2.0) for _ in range(3))
    devs = {}
    for name, (kernel, mask) in _kernels(cyclic_adjacency(V)).items():
        out = kernel(q, k, v, heads)
        if name == fault:
            out = out + 1e-3
        ref = joint_attention_oracle(q, k, v, mask, heads=heads)
        devs[name] = float((out - ref).abs().max())
    return devs


def tiny_grad_setup(seed: int = 0):
    """A small stage-2 network with every weight perturbed away from its
    initial value (zero projections included) and one fixed training draw."""
    cfg = TINY_CONFIG
    model = Denoiser(cfg, seed=seed)
    rng = SeededRng(seed).split("gradcheck")
    with torch.no_grad():
        for i, (_, p) in enumerate(model.named_parameters()):
            p.add_(0.1 * rng.split("perturb", i).normal(p.shape))
    T, V, h, w = 2, 2, 8, 16
    x = rng.split("x").normal((T, cfg.latent_channels, h, V * w))
    control = rng.split("control").uniform((V, T, 2 * h, 2 * w, cfg.control_channels)).numpy()
    text = rng.split("text").normal((cfg.text_dim,)).numpy()
    batch = TrainingBatch(x=x, views=V, control=control, text=text, z1=x[:1].clone())
    sched = NoiseSchedule.cosine(1000)
    draw = TrainingDraw(t=437, eps=rng.split("eps").normal(tuple(x.shape)))
    return model, batch, sched, draw


def gradient_check(seed: int = 0, per_tensor: int = 1, h: float = FD_STEP, lam: float = 0.05):
    """Relative errors between autograd and central differences, one record per sampled entry."""
    model, batch, sched, draw = tiny_grad_setup(seed)
    grads = loss_gradient(model, batch, sched, lam, draw=draw)
    gen = SeededRng(seed).split("pick").numpy()
    params = dict(model.named_parameters())
    records = []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            for idx in gen.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                idx = int(idx)
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(training_loss(model, batch, sched, lam, draw=draw))
                flat[idx] = orig - h
                down = float(training_loss(model, batch, sched, lam, draw=draw))
                flat[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = float(grads[name].view(-1)[idx])
                records.append((name, idx, analytic, numeric, abs(analytic - numeric) / (abs(analytic) + 1e-6)))
    return records


def run_checks(trials: int = 100, seed: int = 0, fault: Optional[str] = None, grad: bool = True,
               progress: Optional[Callable[[str], None]] = None) -> CheckReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = CheckReport()
    for i in range(trials):
        case = seed + i
        for name, dev in attention_case(case, fault=fault).items():
            report.max_attention_dev = max(report.max_attention_dev, dev)
            if not dev < ATTN_TOL:
                report.failures.append(CaseFailure("attention", case, name, dev))
        report.attention_cases += 1
    if grad:
        for name, idx, a, n, rel in gradient_check(seed):
            report.max_grad_rel_err = max(report.max_grad_rel_err, rel)
            report.grad_entries += 1
            if not rel < GRAD_TOL:
                report.failures.append(CaseFailure("gradient", seed, f"{name}[{idx}] autograd={a:.6g} fd={n:.6g}", rel))
    if progress is not None:
        progress(f"attention cases={report.attention_cases} max_dev={report.max_attention_dev:.3e}")
        if grad:
            progress(f"gradient entries={report.grad_entries} max_rel_err={report.max_grad_rel_err:.3e}")
    return report
