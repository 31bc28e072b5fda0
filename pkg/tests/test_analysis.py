import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpnkit import analysis
from lpnkit.analysis import (ActionTrace, GainSchedule, action_smoothness, evaluate_policy, export_schedule,
                             high_freq_ratio, motion_jerk, perturb_eval, playback, read_schedule,
                             reduce_gains, write_schedule)
from lpnkit.errors import CheckpointError, ConfigError
from lpnkit.numerics import Rng, svd
from lpnkit.policy import Policy
from lpnkit.sim import make_env


def stiff_lpn(env, seed=0, scale=0.05):
    """LPN with small random gains: stable yet far from the zero policy."""
    s = env.spec
    pol = Policy.create("lpn", s.n, s.m, s.n_ref, 8, Rng(seed))
    net = pol.net.copy()
    net.w3[:] = scale * Rng(seed + 1).normal(net.w3.shape)
    net.b3[:] = scale * Rng(seed + 2).normal(net.b3.shape)
    return pol.with_net(net)


def tone(freq, n=300, rate=30.0):
    return np.sin(2 * np.pi * freq * np.arange(n) / rate)


class TestSmoothness:
    def test_constant(self):
        assert action_smoothness(ActionTrace([np.full((10, 2), 0.3)])) == 0.0

    def test_alternating_hand_case(self):
        trace = ActionTrace([np.array([0.0, 1.0] * 6)[:, None]])
        assert action_smoothness(trace) == pytest.approx(1.1, abs=0.0)

    def test_episodes_do_not_mix(self):
        a = np.r_[np.zeros(5), np.ones(5)]
        assert action_smoothness(ActionTrace.from_matrix(a, boundaries=[5])) == 0.0

    def test_short_episode_skipped(self, caplog):
        trace = ActionTrace([np.array([[1.0]]), np.array([0.0, 1.0, 0.0, 1.0])[:, None]])
        assert action_smoothness(trace) == pytest.approx(3 / 2)
        assert "skipping" in caplog.text

    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 60), st.integers(1, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
    def test_homogeneity_and_translation(self, n, m, c, seed):
        a = Rng(seed).normal((n, m))
        base = action_smoothness(ActionTrace([a]))
        assert action_smoothness(ActionTrace([c * a])) == pytest.approx(c * c * base, rel=1e-10, abs=1e-14)
        shift = Rng(seed + 1).normal(m)
        assert action_smoothness(ActionTrace([a + shift])) == pytest.approx(base, rel=1e-10)


class TestHighFreq:
    def test_low_tone(self):
        assert high_freq_ratio(ActionTrace([tone(3)[:, None]])) == pytest.approx(0.0, abs=1e-10)

    def test_high_tone(self):
        assert high_freq_ratio(ActionTrace([tone(12)[:, None]])) == pytest.approx(1.0, abs=1e-10)

    def test_equal_two_tones(self):
        x = tone(3) + tone(12)
        assert high_freq_ratio(ActionTrace([x[:, None]])) == pytest.approx(0.5, abs=1e-10)

    def test_constant_is_zero(self):
        assert high_freq_ratio(ActionTrace([np.full((40, 1), 2.0)])) == 0.0

    def test_dc_offset_ignored(self):
        assert high_freq_ratio(ActionTrace([(5.0 + tone(12))[:, None]])) == pytest.approx(1.0, abs=1e-10)

    def test_averages_dimensions(self):
        x = np.stack([tone(3), tone(12)], axis=1)
        assert high_freq_ratio(ActionTrace([x])) == pytest.approx(0.5, abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(32, 200), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_unit_interval(self, n, m, seed):
        r = high_freq_ratio(ActionTrace([Rng(seed).normal((n, m))]))
        assert 0.0 <= r <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 14), st.floats(0.01, 100.0))
    def test_single_tone_scale_invariant(self, k, amp):
        x = tone(k)
        assert high_freq_ratio(ActionTrace([amp * x[:, None]])) == pytest.approx(
            high_freq_ratio(ActionTrace([x[:, None]])), abs=1e-10)


class TestJerk:
    @staticmethod
    def sine_trace(omega, seconds=2.0, rate=120.0):
        t = np.arange(int(seconds * rate)) / rate
        return {"q": np.sin(omega * t)[:, None], "qd": (omega * np.cos(omega * t))[:, None], "rate_hz": rate}

    def test_sinusoid_limit(self):
        w = 2 * np.pi
        assert motion_jerk(self.sine_trace(w)) == pytest.approx(2 / np.pi * w * w, rel=0.02)

    def test_frequency_scaling(self):
        w = 2 * np.pi
        ratio = motion_jerk(self.sine_trace(2 * w)) / motion_jerk(self.sine_trace(w))
        assert ratio == pytest.approx(4.0, rel=0.05)

    def test_constant_velocity(self):
        tr = {"qd": np.full((50, 1), 0.7), "rate_hz": 120.0}
        assert motion_jerk(tr) == 0.0

    def test_static_joint_excluded(self, caplog):
        w = 2 * np.pi
        tr = self.sine_trace(w)
        tr["qd"] = np.concatenate([tr["qd"], np.zeros_like(tr["qd"])], axis=1)
        assert motion_jerk(tr) == pytest.approx(motion_jerk(self.sine_trace(w)))
        assert "zero peak speed" in caplog.text

    def test_position_offset_invariant(self):
        env = make_env("acrobot-track")
        env.enable_trace()
        env.reset_at(0.0)
        for _ in range(30):
            env.step(env.ref.action)
        tr = env.sim_trace()
        shifted = dict(tr, q=tr["q"] + 1.0)
        assert motion_jerk(shifted) == motion_jerk(tr)


class TestSchedule:
    def test_full_rank_unchanged(self):
        env = make_env("acrobot-track")
        sched = export_schedule(stiff_lpn(env), env)
        red = reduce_gains(sched, 2)
        np.testing.assert_allclose(red.k_mat, sched.k_mat, atol=1e-10)
        np.testing.assert_array_equal(red.k_ff, sched.k_ff)

    def test_rank_and_eckart_young(self):
        env = make_env("hopper2d")
        sched = export_schedule(stiff_lpn(env, seed=3, scale=1.0), env)
        red = reduce_gains(sched, 1)
        for km, kr in zip(sched.k_mat, red.k_mat):
            assert np.linalg.matrix_rank(kr, tol=1e-8) <= 1
            sig = svd(km).sigma
            assert np.linalg.norm(km - kr) == pytest.approx(sig[1], rel=1e-9)

    @pytest.mark.parametrize("k", [0, 3])
    def test_rank_out_of_range(self, k):
        env = make_env("acrobot-track")
        with pytest.raises(ConfigError):
            reduce_gains(export_schedule(stiff_lpn(env), env), k)

    def test_hold_at_half_rate(self):
        env = make_env("pendulum-track")
        sched = export_schedule(stiff_lpn(env, scale=1.0), env, gain_hz=15)
        assert sched.hold == 2
        for i in range(0, sched.steps, 2):
            assert sched.k_mat[i].tobytes() == sched.k_mat[i + 1].tobytes()
        assert sched.k_mat[0].tobytes() != sched.k_mat[2].tobytes()

    def test_rate_must_divide(self):
        env = make_env("pendulum-track")
        with pytest.raises(ConfigError):
            export_schedule(stiff_lpn(env), env, gain_hz=20)

    def test_ff_rejected(self):
        env = make_env("pendulum-track")
        s = env.spec
        with pytest.raises(ConfigError):
            export_schedule(Policy.zeros("ff", s.n, s.m, s.n_ref, 4), env)

    def test_file_round_trip(self, tmp_path):
        env = make_env("hopper2d")
        sched = export_schedule(stiff_lpn(env, scale=1.0), env, gain_hz=15)
        write_schedule(sched, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "n,m,steps,gain_hz,action_hz"
        assert lines[1] == "10,2,18,15,30"
        back = read_schedule(tmp_path / "s.csv")
        for name in ("k_mat", "k_ff", "ref_action"):
            assert getattr(back, name).tobytes() == getattr(sched, name).tobytes()
        assert (back.gain_hz, back.action_hz) == (15, 30)

    def test_bad_file(self, tmp_path):
        (tmp_path / "s.csv").write_text("n,m,steps,gain_hz,action_hz\n2,1,3,30,30\n0,1,2,3,4\n")
        with pytest.raises(CheckpointError):
            read_schedule(tmp_path / "s.csv")


class TestPlayback:
    def test_export_equivalence(self):
        env = make_env("pendulum-track")
        pol = stiff_lpn(env, seed=4)
        online = evaluate_policy(pol, env, episodes=3, seed=7)
        replay = playback(export_schedule(pol, env), env, episodes=3, seed=7)
        assert abs(online.reward - replay.reward) <= 1e-9
        for a, b in zip(online.actions.episodes, replay.actions.episodes):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_schedule_is_reference_playback(self):
        env = make_env("pendulum-track")
        s = env.spec
        sched = export_schedule(Policy.zeros("lpn", s.n, s.m, s.n_ref, 4), env)
        res = playback(sched, env, episodes=2, seed=1)
        ref_only = analysis.run_episodes(lambda st, ref, idx: ref.action, env, 2, seed=1)
        assert abs(res.reward - ref_only.reward) <= 1e-9
        for a, b in zip(res.actions.episodes, ref_only.actions.episodes):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_dimension_mismatch(self):
        env = make_env("acrobot-track")
        sched = export_schedule(stiff_lpn(env), env)
        with pytest.raises(ConfigError):
            playback(sched, make_env("hopper2d"))

    def test_horizon_is_five_cycles(self):
        env = make_env("pendulum-track")
        res = playback(export_schedule(stiff_lpn(env), env), env, episodes=1)
        if res.failures == 0:
            assert len(res.actions.episodes[0]) == 150
            assert len(res.sim_traces[0]["q"]) == 600


class TestPerturb:
    def test_zero_push_matches_evaluation(self):
        env = make_env("pendulum-track")
        pol = stiff_lpn(env)
        p = perturb_eval(pol, env, 0.0, episodes=4, seed=3)
        assert p.mean_reward == evaluate_policy(pol, env, episodes=4, seed=3).reward

    def test_deterministic(self):
        env = make_env("pendulum-track")
        pol = stiff_lpn(env)
        assert perturb_eval(pol, env, 80.0, episodes=5, seed=2) == perturb_eval(pol, env, 80.0, episodes=5, seed=2)

    def test_failure_monotone_in_push(self):
        env = make_env("acrobot-track")
        s = env.spec
        sched = export_schedule(Policy.zeros("lpn", s.n, s.m, s.n_ref, 4), env)
        rates = [perturb_eval(sched, env, f, episodes=50, seed=0).failure_rate for f in (0.0, 80.0, 300.0)]
        assert rates == sorted(rates)
        assert rates[-1] > rates[0]


def test_metrics_report():
    env = make_env("pendulum-track")
    res = evaluate_policy(stiff_lpn(env), env, episodes=2)
    m = analysis.smoothness_metrics(res)
    assert list(m) == ["reward", "action_smoothness", "high_freq_ratio", "motion_jerk"]
    assert m["action_smoothness"] == action_smoothness(res.actions)
    text = analysis.format_metrics_csv(m)
    assert text.splitlines()[0] == "metric,value"
    assert "reward" in analysis.summarize(m)
