import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from idportrait.diffusion import (
    ConvAutoencoder,
    LatentCodec,
    NoiseSchedule,
    ancestral_step,
    build_schedule,
    forward_diffuse,
    recover_z0,
    sample,
    sample_timesteps,
)
from idportrait.errors import ConfigurationError, NumericalError, RangeError, ShapeError


def make_schedule(alpha_bars):
    """Schedule from explicit alpha_bars (1-based)."""
    abar = np.asarray(alpha_bars, dtype=np.float64)
    alphas = abar / np.concatenate(([1.0], abar[:-1]))
    return NoiseSchedule(len(abar), alphas, abar, np.zeros(len(abar)))


class TestBuildSchedule:
    def test_single_step(self):
        sched = build_schedule(1, 0.5, 0.5)
        assert sched.alphas.tolist() == [0.5]
        assert sched.alpha_bars.tolist() == [0.5]

    def test_alpha_bars_strictly_decreasing(self):
        sched = build_schedule(50, 1e-3, 0.1)
        assert np.all(np.diff(sched.alpha_bars) < 0)

    def test_linear_1000_matches_independent_product(self):
        # frozen from a plain-python cumulative product over the linspace betas
        sched = build_schedule(1000, 1e-4, 0.02, kind="linear")
        assert sched.alpha_bar(1000) == pytest.approx(4.0358297653756754e-05, rel=1e-10)

    def test_cumprod_invariant(self):
        for kind in ("linear", "cosine"):
            sched = build_schedule(200, 1e-4, 0.05, kind=kind)
            np.testing.assert_allclose(sched.alpha_bars, np.cumprod(sched.alphas), rtol=1e-12)

    def test_invalid_ranges(self):
        with pytest.raises(RangeError):
            build_schedule(0, 1e-4, 0.02)
        with pytest.raises(RangeError):
            build_schedule(10, 0.0, 0.02)
        with pytest.raises(RangeError):
            build_schedule(10, 0.1, 0.05)
        with pytest.raises(ConfigurationError):
            build_schedule(10, 1e-4, 0.02, kind="quadratic")

    def test_ancestral_sigmas(self):
        sched = build_schedule(10, 1e-2, 0.1, sigma_mode="ancestral")
        assert sched.sigma(1) == 0.0  # abar_prev = 1 at t=1
        assert np.all(sched.sigmas[1:] > 0)
        assert not sched.deterministic

    @given(
        beta_start=st.floats(1e-6, 0.01),
        spread=st.floats(0.0, 0.3),
        T=st.integers(1, 300),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_property(self, beta_start, spread, T):
        sched = build_schedule(T, beta_start, min(beta_start + spread, 0.99))
        assert np.all(sched.alpha_bars > 0) and np.all(sched.alpha_bars < 1)
        assert np.all(np.diff(sched.alpha_bars) < 0)


class TestForwardDiffuse:
    def test_near_one_endpoint(self):
        sched = make_schedule([1 - 1e-15])
        z0 = torch.randn(4, 4)
        out = forward_diffuse(z0, torch.randn(4, 4), 1, sched)
        assert torch.allclose(out, z0, atol=1e-6)

    def test_near_zero_endpoint(self):
        sched = make_schedule([1e-14])
        eps = torch.randn(4, 4)
        out = forward_diffuse(torch.randn(4, 4), eps, 1, sched)
        assert torch.allclose(out, eps, atol=1e-6)

    def test_hand_evaluation(self):
        sched = make_schedule([0.25])
        out = forward_diffuse(torch.tensor(1.0), torch.tensor(1.0), 1, sched)
        assert out.item() == pytest.approx(1.3660254037844386)

    def test_shape_and_range_errors(self):
        sched = build_schedule(10)
        with pytest.raises(ShapeError):
            forward_diffuse(torch.zeros(2), torch.zeros(3), 1, sched)
        with pytest.raises(RangeError):
            forward_diffuse(torch.zeros(2), torch.zeros(2), 11, sched)

    def test_marginal_variance_law(self):
        sched = build_schedule(100)
        t = 60
        gen = torch.Generator().manual_seed(0)
        n = 100_000
        z0 = torch.randn(n, generator=gen)
        eps = torch.randn(n, generator=gen)
        zt = forward_diffuse(z0, eps, t, sched)
        abar = sched.alpha_bar(t)
        expected = abar * 1.0 + (1 - abar)
        assert zt.var().item() == pytest.approx(expected, rel=0.02)


class TestRecoverZ0:
    def test_roundtrip_identity_all_t(self):
        sched = build_schedule(50)
        z0 = torch.randn(3, 8, 8, dtype=torch.float64)
        eps = torch.randn(3, 8, 8, dtype=torch.float64)
        for t in range(1, 51):
            back = recover_z0(forward_diffuse(z0, eps, t, sched), eps, t, sched)
            assert (back - z0).norm() / z0.norm() < 1e-6

    def test_hand_evaluation(self):
        sched = make_schedule([0.25])
        zt = torch.tensor(2.0)
        out = recover_z0(zt, zt, 1, sched)
        assert out.item() == pytest.approx(2.0 * (1 - math.sqrt(0.75)) / 0.5)

    def test_degenerate_endpoint(self):
        sched = make_schedule([1 - 1e-15])
        zt = torch.randn(4)
        out = recover_z0(zt, torch.randn(4), 1, sched)
        assert torch.allclose(out, zt, atol=1e-6)

    def test_alpha_bar_floor(self):
        sched = make_schedule([1e-9])
        with pytest.raises(NumericalError):
            recover_z0(torch.zeros(2), torch.zeros(2), 1, sched)


class TestAncestralStep:
    def test_exact_final_step_inversion(self):
        sched = build_schedule(30)
        z0 = torch.randn(2, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 4, 4, dtype=torch.float64)
        z1 = forward_diffuse(z0, eps, 1, sched)
        out = ancestral_step(z1, eps, 1, sched)
        assert torch.allclose(out, z0, atol=1e-10)

    def test_identity_step(self):
        sched = make_schedule([1 - 1e-15])
        zt = torch.randn(5)
        out = ancestral_step(zt, torch.zeros(5), 1, sched)
        assert torch.allclose(out, zt, atol=1e-6)

    def test_hand_evaluation(self):
        sched = make_schedule([0.5, 0.25])  # alpha_2 = 0.5, abar_2 = 0.25
        out = ancestral_step(torch.tensor(1.0), torch.tensor(1.0), 2, sched)
        assert out.item() == pytest.approx(0.5977169814453689)

    def test_chain_to_z0_with_true_eps(self):
        sched = build_schedule(40)
        z0 = torch.randn(2, 6, 6, dtype=torch.float64)
        for t_start in (1, 7, 40):
            zt = forward_diffuse(z0, torch.randn_like(z0), t_start, sched)
            for t in range(t_start, 0, -1):
                abar = sched.alpha_bar(t)
                true_eps = (zt - math.sqrt(abar) * z0) / math.sqrt(1 - abar)
                zt = ancestral_step(zt, true_eps, t, sched)
            assert (zt - z0).norm() / z0.norm() < 1e-4

    def test_t0_is_range_error(self):
        sched = build_schedule(10)
        with pytest.raises(RangeError):
            ancestral_step(torch.zeros(2), torch.zeros(2), 0, sched)

    def test_stochastic_needs_noise(self):
        sched = build_schedule(10, sigma_mode="ancestral")
        with pytest.raises(ShapeError):
            ancestral_step(torch.zeros(2), torch.zeros(2), 5, sched)


class TestSample:
    def oracle(self, z0, sched):
        def fn(zt, t, cond):
            abar = sched.alpha_bar(t)
            return (zt - math.sqrt(abar) * z0) / math.sqrt(1 - abar)

        return fn

    def test_full_steps_recovers_z0(self):
        sched = build_schedule(50)
        z0 = torch.randn(1, 4, 4)
        out = sample(self.oracle(z0, sched), z0.shape, sched, steps=50, seed=3)
        assert (out - z0).norm() / z0.norm() < 1e-4

    def test_ancestral_rule_recovers_z0(self):
        sched = build_schedule(50)
        z0 = torch.randn(1, 4, 4)
        out = sample(self.oracle(z0, sched), z0.shape, sched, steps=50, seed=3, step_rule="ancestral")
        assert (out - z0).norm() / z0.norm() < 1e-4

    def test_determinism(self):
        sched = build_schedule(100)
        z0 = torch.randn(2, 3, 3)
        a = sample(self.oracle(z0, sched), z0.shape, sched, steps=10, seed=7)
        b = sample(self.oracle(z0, sched), z0.shape, sched, steps=10, seed=7)
        assert torch.equal(a, b)

    def test_eight_step_invocation_count(self):
        sched = build_schedule(1000)
        calls = []

        def fn(zt, t, cond):
            calls.append(t)
            return torch.zeros_like(zt)

        sample(fn, (1, 2, 2), sched, steps=8, seed=0)
        assert len(calls) == 8
        assert calls[0] == 1000 and calls[-1] == 1

    def test_timestep_stride(self):
        ts = sample_timesteps(1000, 8)
        assert ts == [1000, 875, 750, 625, 500, 375, 250, 1]

    def test_shape_error_from_denoiser(self):
        sched = build_schedule(10)
        with pytest.raises(ShapeError):
            sample(lambda zt, t, c: torch.zeros(1), (1, 2, 2), sched, steps=5, seed=0)

    def test_ancestral_rule_requires_full_steps(self):
        sched = build_schedule(10)
        with pytest.raises(ConfigurationError):
            sample(lambda zt, t, c: zt, (1, 2, 2), sched, steps=5, seed=0, step_rule="ancestral")


class TestLatentCodec:
    def test_roundtrip_exact(self):
        codec = LatentCodec(factor=4)
        img = torch.rand(3, 32, 32)
        lat = codec.encode(img)
        assert lat.shape == (48, 8, 8)
        assert torch.allclose(codec.decode(lat), img, atol=1e-7)

    def test_latent_shape(self):
        codec = LatentCodec(factor=8)
        assert codec.latent_shape(64) == (192, 8, 8)
        with pytest.raises(ShapeError):
            codec.latent_shape(60)

    def test_indivisible_image_rejected(self):
        codec = LatentCodec(factor=8)
        with pytest.raises(ShapeError):
            codec.encode(torch.rand(3, 30, 30))

    def test_learned_mode_reconstruction_bound(self):
        torch.manual_seed(0)
        ae = ConvAutoencoder(factor=2, latent_channels=12, hidden=16)
        imgs = torch.rand(16, 3, 16, 16)
        opt = torch.optim.Adam(ae.parameters(), lr=2e-3)
        for _ in range(150):
            opt.zero_grad()
            loss = torch.nn.functional.mse_loss(ae.decode(ae.encode(imgs * 2 - 1)), imgs * 2 - 1)
            loss.backward()
            opt.step()
        codec = LatentCodec(factor=2, mode="learned-autoencoder", autoencoder=ae)
        x = imgs[0]
        mae = (codec.decode(codec.encode(x)) - x).abs().mean().item()
        assert mae < 0.15  # loose desk-scale bound; identity mode is exact
