import math

import numpy as np
import pytest

from patchfusion.schedule import (DecayParams, GuidanceSpec, build_schedule,
                                  cfg_combine, cosine_decay, ddim_step,
                                  diffuse_closed_form, diffuse_trajectory,
                                  sigma_at)
from patchfusion.tensor import RngStream


@pytest.fixture(scope="module")
def schedule():
    return build_schedule()


class TestBuildSchedule:
    def test_default_inference_sequence(self, schedule):
        seq = schedule.timestep_sequence
        assert len(seq) == 50
        assert seq[0] >= 980
        assert all(a > b for a, b in zip(seq, seq[1:]))
        assert all(1 <= t <= 1000 for t in seq)
        strides = {a - b for a, b in zip(seq, seq[1:])}
        assert strides == {20}

    def test_constant_beta_closed_form(self):
        b = 0.004
        sched = build_schedule(T_train=200, beta_start=b, beta_end=b,
                               inference_steps=20)
        # independent sequential product
        expected = np.empty(201)
        expected[0] = 1.0
        for t in range(1, 201):
            expected[t] = expected[t - 1] * (1.0 - b)
        np.testing.assert_array_equal(sched.alpha_bars, expected)

    def test_alpha_bars_match_product_oracle(self, schedule):
        # recompute betas and the cumulative product independently
        a, b = math.sqrt(0.00085), math.sqrt(0.012)
        acc = 1.0
        for i in range(1000):
            beta = (a + (b - a) * i / 999.0) ** 2
            acc *= 1.0 - beta
            assert abs(schedule.alpha_bars[i + 1] - acc) <= 1e-7
        assert schedule.alpha_bars[0] == 1.0

    def test_alpha_bars_strictly_decreasing(self, schedule):
        diffs = np.diff(schedule.alpha_bars)
        assert (diffs < 0).all()

    def test_too_many_steps_rejected(self):
        with pytest.raises(ValueError):
            build_schedule(T_train=10, inference_steps=11)
        with pytest.raises(ValueError):
            build_schedule(beta_start=0.0)
        with pytest.raises(ValueError):
            build_schedule(beta_start=0.5, beta_end=0.1)

    def test_uneven_stride_still_strictly_decreasing(self):
        sched = build_schedule(T_train=1000, inference_steps=7)
        seq = sched.timestep_sequence
        assert len(seq) == 7
        assert seq[0] == 1000
        assert all(a > b for a, b in zip(seq, seq[1:]))
        assert seq[-1] >= 1


class TestDiffuseTrajectory:
    def test_t0_entry_is_z0(self, schedule):
        z0 = RngStream(4).standard_normal((1, 6, 6))
        traj = diffuse_trajectory(z0, schedule, RngStream(4).child(1))
        entries = dict(traj)
        np.testing.assert_array_equal(entries[0], z0)
        assert set(entries) == {0} | set(schedule.timestep_sequence)

    def test_variance_tracks_one_minus_alpha_bar(self, schedule):
        z0 = np.zeros((4, 64, 64), dtype=np.float32)
        traj = dict(diffuse_trajectory(z0, schedule, RngStream(123).child(1)))
        for t in (960, 980, 1000):
            target = 1.0 - schedule.alpha_bar(t)
            sample = float(traj[t].var())
            assert abs(sample - target) <= 0.03 * target

    def test_deterministic(self, schedule):
        z0 = RngStream(9).standard_normal((2, 8, 8))
        a = diffuse_trajectory(z0, schedule, RngStream(10).child(1, 2))
        b = diffuse_trajectory(z0, schedule, RngStream(10).child(1, 2))
        for (ta, za), (tb, zb) in zip(a, b):
            assert ta == tb
            np.testing.assert_array_equal(za, zb)


class TestClosedFormAndDdim:
    def test_t0_returns_z0(self, schedule):
        z0 = RngStream(2).standard_normal((1, 4, 4))
        eps = RngStream(3).standard_normal((1, 4, 4))
        np.testing.assert_array_equal(diffuse_closed_form(z0, 0, eps, schedule), z0)

    def test_zero_signal_formula(self, schedule):
        z0 = np.zeros((1, 3, 3), dtype=np.float32)
        eps = np.ones((1, 3, 3), dtype=np.float32)
        for t in (1, 500, 1000):
            out = diffuse_closed_form(z0, t, eps, schedule)
            expected = math.sqrt(1.0 - schedule.alpha_bar(t))
            np.testing.assert_allclose(out, expected, rtol=0, atol=1e-7)

    def test_ddim_inverts_closed_form_to_t0(self, schedule):
        z0 = RngStream(21).standard_normal((2, 5, 5))
        eps = RngStream(22).standard_normal((2, 5, 5))
        for t in (20, 500, 1000):
            z_t = diffuse_closed_form(z0, t, eps, schedule)
            back = ddim_step(z_t, eps, t, 0, schedule)
            np.testing.assert_allclose(back, z0, rtol=0, atol=1e-5)

    def test_ddim_zero_inputs(self, schedule):
        z = np.zeros((1, 2, 2), dtype=np.float32)
        out = ddim_step(z, z, 1000, 980, schedule)
        np.testing.assert_array_equal(out, z)

    def test_one_step_algebraic_consistency(self, schedule):
        # step down then re-noise with the same epsilon returns the input
        rng = RngStream(31)
        seq = schedule.timestep_sequence
        z = rng.standard_normal((2, 6, 6))
        for t, t_prev in zip(seq[:6], seq[1:7]):
            eps = rng.standard_normal((2, 6, 6))
            down = ddim_step(z, eps, t, t_prev, schedule)
            # closed-form consistency: down = sqrt(abar_prev) x0 + sqrt(1-abar_prev) eps
            a_t = schedule.alpha_bar(t)
            a_p = schedule.alpha_bar(t_prev)
            x0 = (z - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
            redone = math.sqrt(a_t) * ((down - math.sqrt(1 - a_p) * eps)
                                       / math.sqrt(a_p)) + math.sqrt(1 - a_t) * eps
            np.testing.assert_allclose(redone, z, rtol=0, atol=1e-5)
            np.testing.assert_allclose(
                down, math.sqrt(a_p) * x0 + math.sqrt(1 - a_p) * eps,
                rtol=0, atol=1e-6)

    def test_fifty_step_oracle_chain_converges(self, schedule):
        # epsilon chosen each step so the clean-latent prediction equals a
        # fixed target: the chain must land on the target
        rng = RngStream(77)
        target = rng.standard_normal((4, 16, 16))
        z = rng.standard_normal((4, 16, 16)) * 3.0
        seq = schedule.timestep_sequence
        for k, t in enumerate(seq):
            t_prev = seq[k + 1] if k + 1 < len(seq) else 0
            a_t = schedule.alpha_bar(t)
            eps = (z - math.sqrt(a_t) * target) / math.sqrt(1.0 - a_t)
            z = ddim_step(z, eps, t, t_prev, schedule)
        assert np.abs(z - target).max() <= 1e-4

    def test_invalid_order_rejected(self, schedule):
        z = np.zeros((1, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError):
            ddim_step(z, z, 500, 500, schedule)
        with pytest.raises(ValueError):
            ddim_step(z, z, 500, 600, schedule)
        with pytest.raises(ValueError):
            diffuse_closed_form(z, 1001, z, schedule)


class TestCfgCombine:
    def test_endpoints_exact(self):
        rng = RngStream(41)
        eu = rng.standard_normal((2, 4, 4)) * 1e8
        ec = rng.standard_normal((2, 4, 4))
        np.testing.assert_array_equal(cfg_combine(eu, ec, 1.0), ec)
        np.testing.assert_array_equal(cfg_combine(eu, ec, 0.0), eu)

    def test_default_scale_arithmetic(self):
        eu = np.zeros((1, 2, 2), dtype=np.float32)
        ec = np.ones((1, 2, 2), dtype=np.float32)
        np.testing.assert_allclose(cfg_combine(eu, ec, 7.5), 7.5, rtol=0, atol=0)

    def test_linear_and_fixed_point(self):
        rng = RngStream(43)
        e = rng.standard_normal((1, 3, 3))
        for g in (0.0, 0.5, 1.0, 7.5):
            np.testing.assert_allclose(cfg_combine(e, e, g), e, rtol=0, atol=1e-6)
        a = rng.standard_normal((1, 3, 3))
        b = rng.standard_normal((1, 3, 3))
        lhs = cfg_combine(2.0 * a, 2.0 * b, 3.0)
        np.testing.assert_allclose(lhs, 2.0 * cfg_combine(a, b, 3.0),
                                   rtol=0, atol=1e-5)


class TestDecayCurves:
    @pytest.mark.parametrize("alpha", [1.0, 3.0, 5.0])
    def test_endpoints(self, alpha):
        assert cosine_decay(1000, 1000, alpha) == 1.0
        assert cosine_decay(0, 1000, alpha) == 0.0

    def test_midpoint_alpha3(self):
        assert cosine_decay(500, 1000, 3.0) == pytest.approx(0.125, abs=1e-12)

    @pytest.mark.parametrize("alpha", [1.0, 3.0, 5.0])
    def test_monotone_over_inference_sequence(self, schedule, alpha):
        values = [cosine_decay(t, 1000, alpha)
                  for t in schedule.timestep_sequence]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_sigma_endpoints_exact(self):
        params = DecayParams()
        assert sigma_at(1000, 1000, params) == 1.0
        assert sigma_at(0, 1000, params) == 0.01

    def test_sigma_midpoint(self):
        params = DecayParams()
        assert sigma_at(500, 1000, params) == pytest.approx(0.505, abs=1e-12)

    def test_domain_validated(self):
        with pytest.raises(ValueError):
            cosine_decay(-1, 1000, 1.0)
        with pytest.raises(ValueError):
            cosine_decay(1001, 1000, 1.0)
        with pytest.raises(ValueError):
            cosine_decay(1, 1000, 0.0)


class TestParamTypes:
    def test_decay_defaults(self):
        params = DecayParams()
        assert (params.alpha1, params.alpha2, params.alpha3) == (3.0, 1.0, 1.0)
        assert (params.sigma1, params.sigma2) == (1.0, 0.01)

    def test_decay_validation(self):
        with pytest.raises(ValueError):
            DecayParams(sigma1=0.01, sigma2=0.5)
        with pytest.raises(ValueError):
            DecayParams(alpha1=0.0)

    def test_guidance_defaults(self):
        spec = GuidanceSpec()
        assert spec.scale == 7.5
        with pytest.raises(ValueError):
            GuidanceSpec(scale=-1.0)
