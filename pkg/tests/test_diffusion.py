import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from panorama_forge.diffusion import (
    DDIM_STEPS,
    LAMBDA_INFER,
    LAMBDA_TRAIN,
    NoisePrior,
    NoiseSchedule,
    ScheduleError,
    apply_noise_prior,
    ddim_step,
    forward_diffuse,
    initial_noise,
    sample,
    timestep_schedule,
)
from panorama_forge.rng import SeededRng

SCHED = NoiseSchedule.cosine(1000)


def test_constants():
    assert (DDIM_STEPS, LAMBDA_TRAIN, LAMBDA_INFER) == (25, 0.05, 0.07)


class TestSchedule:
    def test_variance_preserving(self):
        assert np.max(np.abs(SCHED.alpha ** 2 + SCHED.sigma ** 2 - 1)) <= 1e-9

    def test_monotone_and_endpoints(self):
        assert SCHED.steps == 1000
        assert np.all(np.diff(SCHED.alpha) < 0) and np.all(np.diff(SCHED.sigma) > 0)
        assert SCHED.alpha[0] == 1.0 and SCHED.sigma[0] == 0.0
        assert 0 < SCHED.alpha[-1] < 0.01

    def test_matches_cosine_formula(self):
        s = 0.008
        f = lambda t: math.cos((t / 1000 + s) / (1 + s) * math.pi / 2)  # noqa: E731
        for t in (0, 1, 250, 500, 999):
            assert SCHED.alpha[t] == pytest.approx(f(t) / f(0), abs=1e-14)

    @pytest.mark.parametrize("alpha, sigma", [
        ([1.0, 1.0], [0.0, 0.0]),
        ([1.0, 0.5], [0.0, 0.5]),
        ([1.0, 1.1], [0.0, 0.1]),
        ([1.0], [0.0, 0.0]),
    ])
    def test_invalid_schedules_rejected(self, alpha, sigma):
        with pytest.raises(ScheduleError):
            NoiseSchedule(np.array(alpha), np.array(sigma))


class TestForward:
    def test_t0_is_identity(self):
        x = torch.randn(2, 3, 4, 5, dtype=torch.float64)
        assert forward_diffuse(x, 0, SCHED, torch.randn_like(x)).equal(x)

    def test_zero_signal(self):
        eps = torch.randn(2, 3, 4, 5, dtype=torch.float64)
        assert forward_diffuse(torch.zeros_like(eps), 400, SCHED, eps).equal(float(SCHED.sigma[400]) * eps)

    @pytest.mark.parametrize("t", [1, 300, 700, 999])
    def test_unit_variance(self, t):
        rng = SeededRng(t)
        x, eps = rng.split("x").normal((100_000,)), rng.split("e").normal((100_000,))
        assert abs(float(forward_diffuse(x, t, SCHED, eps).var()) - 1.0) < 0.02

    def test_errors(self):
        x = torch.zeros(2, 2)
        with pytest.raises(ValueError):
            forward_diffuse(x, 1, SCHED, torch.zeros(3))
        with pytest.raises(IndexError):
            forward_diffuse(x, 1000, SCHED, x)


class TestPrior:
    def test_lambda_zero_identity(self):
        eps = [torch.randn(4, 2, 6, dtype=torch.float64) for _ in range(3)]
        out = apply_noise_prior(torch.randn(4, 2, 6, dtype=torch.float64), eps, 0.0)
        assert all(o is e for o, e in zip(out, eps))

    def test_constant_example(self):
        out = apply_noise_prior(torch.ones(2, 3), [torch.zeros(2, 3)] * 4, 0.07)
        assert all(torch.all(o == 0.07) for o in out)

    def test_monte_carlo_mean(self):
        z1 = SeededRng(1).normal((4, 3, 5))
        rng = SeededRng(2)
        draws = torch.stack(apply_noise_prior(z1, [rng.split(i).normal((4, 3, 5)) for i in range(10_000)], 0.07))
        # the added noise is standard normal, so each mean has std 1/sqrt(n)
        assert torch.all((draws.mean(0) - 0.07 * z1).abs() < 3 / math.sqrt(10_000))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_noise_prior(torch.zeros(2, 3), [torch.zeros(3, 2)], 0.05)
        with pytest.raises(ValueError):
            apply_noise_prior(torch.zeros(2), [torch.zeros(2)], -0.1)


class TestDdim:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 999), st.integers(0, 2**32 - 1))
    def test_exact_eps_inverts_forward(self, t, seed):
        rng = SeededRng(seed)
        x, eps = rng.split("x").normal((2, 4, 3, 6)), rng.split("e").normal((2, 4, 3, 6))
        back = ddim_step(forward_diffuse(x, t, SCHED, eps), eps, t, 0, SCHED)
        assert float((back - x).abs().max()) <= 1e-6

    def test_same_step_is_noop(self):
        x = torch.randn(3, 3, dtype=torch.float64)
        assert ddim_step(x, torch.randn_like(x), 500, 500, SCHED) is x

    def test_zero_eps_scales(self):
        x = torch.randn(3, 3, dtype=torch.float64)
        out = ddim_step(x, torch.zeros_like(x), 700, 300, SCHED)
        torch.testing.assert_close(out, float(SCHED.alpha[300] / SCHED.alpha[700]) * x, rtol=1e-14, atol=0)

    def test_matches_hand_formula(self):
        x, e = torch.full((1,), 0.3, dtype=torch.float64), torch.full((1,), -1.2, dtype=torch.float64)
        a, s, ap, sp = SCHED.alpha[640], SCHED.sigma[640], SCHED.alpha[600], SCHED.sigma[600]
        assert float(ddim_step(x, e, 640, 600, SCHED)) == pytest.approx(ap * (0.3 + 1.2 * s) / a - 1.2 * sp, abs=1e-15)

    def test_clip_inactive_inside_range(self):
        rng = SeededRng(11)
        x = rng.split("x").uniform((2, 3, 4)) * 2 - 1
        eps = rng.split("e").normal((2, 3, 4))
        xt = forward_diffuse(x, 800, SCHED, eps)
        torch.testing.assert_close(ddim_step(xt, eps, 800, 400, SCHED, clip_x0=1.0),
                                   ddim_step(xt, eps, 800, 400, SCHED), rtol=0, atol=1e-12)

    def test_clip_hand_values(self):
        # x0 estimate (x - s*e)/a lands far outside [-1, 1]; it is clamped and eps re-derived
        a, s, ap, sp = (float(v) for v in (SCHED.alpha[900], SCHED.sigma[900], SCHED.alpha[500], SCHED.sigma[500]))
        x = torch.tensor([0.9, -0.9, 0.0], dtype=torch.float64)
        e = torch.tensor([-2.0, 2.0, 0.0], dtype=torch.float64)
        out = ddim_step(x, e, 900, 500, SCHED, clip_x0=1.0)
        for i, x0 in enumerate([1.0, -1.0, 0.0]):
            eps = (float(x[i]) - a * x0) / s
            assert float(out[i]) == pytest.approx(ap * x0 + sp * eps, abs=1e-14)

    def test_clip_to_t0_returns_clamped_estimate(self):
        x = torch.tensor([5.0, -5.0], dtype=torch.float64)
        out = ddim_step(x, torch.zeros_like(x), 200, 0, SCHED, clip_x0=1.0)
        assert out.tolist() == [1.0, -1.0]

    def test_clip_must_be_positive(self):
        with pytest.raises(ValueError):
            ddim_step(torch.zeros(2), torch.zeros(2), 10, 5, SCHED, clip_x0=0.0)

    def test_order_and_tiny_alpha(self):
        x = torch.zeros(2)
        with pytest.raises(ValueError):
            ddim_step(x, x, 10, 20, SCHED)
        # a validated schedule cannot reach this (sigma would round to 1), so use a bare stand-in
        tiny = SimpleNamespace(alpha=np.array([1.0, 1e-13]), sigma=np.array([0.0, 1.0]), steps=2)
        with pytest.raises(ArithmeticError):
            ddim_step(x, x, 1, 0, tiny)


def test_timestep_schedule():
    steps = timestep_schedule(25, 1000)
    assert steps == list(range(999, 0, -40))
    assert steps[0] == 999 and steps[-1] == 39 and len(set(steps)) == 25
    assert timestep_schedule(1000, 1000) == list(range(999, -1, -1))
    with pytest.raises(ValueError):
        timestep_schedule(1001, 1000)


class TestSample:
    SHAPE = (8, 4, 3, 2 * 5)

    def test_deterministic(self):
        den = lambda x, t: 0.1 * x + 0.01 * t  # noqa: E731
        a = sample(den, SCHED, self.SHAPE, SeededRng(9), views=2)
        b = sample(den, SCHED, self.SHAPE, SeededRng(9), views=2)
        assert a.shape == self.SHAPE
        assert a.numpy().tobytes() == b.numpy().tobytes()
        assert not a.equal(sample(den, SCHED, self.SHAPE, SeededRng(10), views=2))

    @pytest.mark.parametrize("prior", [None, 0.07])
    def test_perfect_oracle_returns_zero(self, prior):
        rng = SeededRng(4)
        z1 = SeededRng(5).normal((1,) + self.SHAPE[1:])
        noise = initial_noise(self.SHAPE, rng, views=2)
        if prior:
            noise[1:] += prior * z1[0]
        p = NoisePrior(z1, prior) if prior else None
        out = sample(lambda x, t: noise, SCHED, self.SHAPE, rng, prior=p, views=2)
        assert float(out.abs().max()) <= 1e-4

    def test_prior_shifts_initial_state_of_later_frames_only(self):
        seen = []
        z1 = torch.ones((1,) + self.SHAPE[1:], dtype=torch.float64)

        def den(x, t):
            seen.append(x.clone())
            return torch.zeros_like(x)

        sample(den, SCHED, self.SHAPE, SeededRng(2), num_steps=1, views=2)
        sample(den, SCHED, self.SHAPE, SeededRng(2), num_steps=1, prior=NoisePrior(z1, 0.5), views=2)
        diff = seen[1] - seen[0]
        assert torch.all(diff[0] == 0)
        torch.testing.assert_close(diff[1:], torch.full_like(diff[1:], 0.5 * float(SCHED.sigma[999])))

    def test_perfect_oracle_with_clip_returns_zero(self):
        rng = SeededRng(4)
        noise = initial_noise(self.SHAPE, rng, views=2)
        out = sample(lambda x, t: noise, SCHED, self.SHAPE, rng, views=2, clip_x0=1.0)
        assert float(out.abs().max()) <= 1e-4

    def test_clip_bounds_result_for_bad_denoiser(self):
        out = sample(lambda x, t: torch.full_like(x, 3.0), SCHED, self.SHAPE, SeededRng(0), views=2, clip_x0=1.0)
        assert float(out.abs().max()) <= 1.0

    def test_bad_denoiser_shape(self):
        with pytest.raises(ValueError):
            sample(lambda x, t: x[:1], SCHED, self.SHAPE, SeededRng(0), views=2)

    def test_noise_is_keyed_by_frame_and_view(self):
        a = initial_noise((2, 1, 2, 6), SeededRng(3), views=3)
        b = initial_noise((3, 1, 2, 6), SeededRng(3), views=3)
        assert a.equal(b[:2])
        assert a[0, :, :, 2:4].equal(SeededRng(3).split("noise", 0, 1).normal((1, 2, 2)))
