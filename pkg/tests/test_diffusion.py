import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from loop_rl.diffusion import (
    Context,
    PretrainConfig,
    Trajectory,
    TrajectoryGroup,
    evaluate_transitions,
    forward_noising,
    gaussian_logpdf,
    load_dataset,
    load_policy,
    make_mixture_dataset,
    make_policy,
    make_schedule,
    posterior_mean,
    pretrain_ddpm,
    reverse_step,
    rollout,
    rollout_batch,
    save_dataset,
    save_policy,
    trajectory_logprob_grad,
    trajectory_logprob_sum,
)
from loop_rl.errors import ConfigError, NumericError, ShapeError
from loop_rl.rewards import quadrant_reward


def small_policy(T=4, hidden=(8,), seed=0, data_dim=2, num_contexts=4,
                 beta_end=0.35):
    schedule = make_schedule(T, 1e-4, beta_end)
    return make_policy(
        data_dim=data_dim,
        num_contexts=num_contexts,
        schedule=schedule,
        hidden_dims=hidden,
        rng=np.random.default_rng(seed),
    )


class _ZeroNoise:
    """Stand-in generator that always returns zeros."""

    def standard_normal(self, size=None):
        return np.zeros(size) if size is not None else 0.0


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.5, 0.5)
        assert np.array_equal(s.beta, [0.5])
        assert np.array_equal(s.alpha, [0.5])
        assert np.array_equal(s.alpha_bar, [0.5])

    def test_two_step_product(self):
        s = make_schedule(2, 0.1, 0.2)
        assert np.allclose(s.alpha_bar, [0.9, 0.72], atol=1e-15)

    def test_twenty_steps_decreasing_and_matches_direct_product(self):
        s = make_schedule(20, 1e-4, 0.2)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[-1] < 0.2
        direct = 1.0
        for b in s.beta:
            direct *= 1.0 - b
        assert abs(s.alpha_bar[-1] - direct) < 1e-15

    def test_bounds_checked(self):
        with pytest.raises(ConfigError):
            make_schedule(0, 0.1, 0.2)
        with pytest.raises(ConfigError):
            make_schedule(5, 0.0, 0.2)
        with pytest.raises(ConfigError):
            make_schedule(5, 0.3, 0.2)
        with pytest.raises(ConfigError):
            make_schedule(5, 0.1, 1.0)


class TestForwardNoising:
    def test_zero_data_leaves_scaled_noise(self):
        s = make_schedule(3, 0.1, 0.3)
        n = np.array([0.5, -1.0])
        out = forward_noising(s, np.zeros(2), 2, n)
        assert np.allclose(out, np.sqrt(1 - s.alpha_bar[1]) * n, atol=1e-15)

    def test_hand_evaluated(self):
        s = make_schedule(2, 0.1, 0.2)  # alpha_bar[1] = 0.72
        x0 = np.array([1.0, 0.0])
        noise = np.array([0.3, -0.2])
        out = forward_noising(s, x0, 2, noise)
        expected = np.sqrt(0.72) * x0 + np.sqrt(0.28) * noise
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_t_out_of_range(self):
        s = make_schedule(2, 0.1, 0.2)
        with pytest.raises(ConfigError):
            forward_noising(s, np.zeros(2), 3, np.zeros(2))


class TestGaussianLogpdf:
    def test_at_mean_unit_sigma(self):
        assert abs(gaussian_logpdf(np.zeros(1), np.zeros(1), 1.0)
                   - (-0.9189385332046727)) < 1e-12

    def test_unit_offset(self):
        assert abs(gaussian_logpdf(np.ones(1), np.zeros(1), 1.0)
                   - (-1.4189385332046727)) < 1e-12

    def test_matches_scipy(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(2)
        mean = rng.standard_normal(2)
        sigma = 0.7
        ours = gaussian_logpdf(x, mean, sigma)
        ref = stats.multivariate_normal(mean=mean, cov=sigma**2 * np.eye(2)).logpdf(x)
        assert abs(ours - ref) < 1e-12

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ConfigError):
            gaussian_logpdf(np.zeros(1), np.zeros(1), 0.0)


class TestReverseStep:
    def test_zero_noise_returns_mean(self):
        policy = small_policy()
        x_t = np.array([0.4, -0.2])
        x_prev, lp = reverse_step(policy, Context(1, 4), 2, x_t, _ZeroNoise())
        # with zero noise the sample IS the mean, so the log-density is the peak
        sigma = policy.sigma[1]
        assert abs(lp - gaussian_logpdf(x_prev, x_prev, sigma)) < 1e-12

    def test_zero_weight_network_passes_noise(self):
        policy = small_policy()
        policy = replace(policy, params=np.zeros_like(policy.params),
                         sigma=np.ones_like(policy.sigma))

        class _Fixed:
            def standard_normal(self, size=None):
                return np.array([0.7, -0.3])

        x_prev, _ = reverse_step(policy, Context(0, 4), 1, np.ones(2), _Fixed())
        assert np.array_equal(x_prev, np.array([0.7, -0.3]))

    def test_deterministic_replay(self):
        policy = small_policy()
        a = reverse_step(policy, Context(2, 4), 3, np.ones(2), np.random.default_rng(5))
        b = reverse_step(policy, Context(2, 4), 3, np.ones(2), np.random.default_rng(5))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_non_finite_mean_raises(self):
        policy = small_policy()
        bad = policy.params.copy()
        bad[0] = np.nan
        policy = replace(policy, params=bad)
        with pytest.raises(NumericError):
            reverse_step(policy, Context(0, 4), 1, np.ones(2), np.random.default_rng(0))


class TestRollout:
    def test_structure(self):
        policy = small_policy(T=6)
        traj = rollout(policy, Context(0, 4), quadrant_reward, np.random.default_rng(0))
        assert traj.states.shape == (7, 2)
        assert traj.step_logprobs.shape == (6,)
        assert traj.sampler_version == policy.version

    def test_reward_is_terminal_only(self):
        policy = small_policy()
        calls = []

        def spy(x0, context):
            calls.append(np.array(x0))
            return 0.25

        traj = rollout(policy, Context(3, 4), spy, np.random.default_rng(1))
        assert len(calls) == 1
        assert np.array_equal(calls[0], traj.states[-1])
        assert traj.reward == 0.25
        # mutating an intermediate state record cannot change the reward
        traj.states[2] += 100.0
        assert spy(traj.states[-1], traj.context) == 0.25

    def test_single_step_logprob_recomputable(self):
        policy = small_policy(T=1)
        traj = rollout(policy, Context(1, 4), quadrant_reward, np.random.default_rng(3))
        expected = gaussian_logpdf(traj.states[1], _mu_of(policy, traj), policy.sigma[0])
        assert abs(trajectory_logprob_sum(policy, traj) - expected) < 1e-10
        assert abs(float(traj.step_logprobs[0]) - expected) < 1e-10

    def test_deterministic(self):
        policy = small_policy()
        a = rollout(policy, Context(0, 4), quadrant_reward, np.random.default_rng(7))
        b = rollout(policy, Context(0, 4), quadrant_reward, np.random.default_rng(7))
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.step_logprobs, b.step_logprobs)


def _mu_of(policy, traj):
    from loop_rl.diffusion import step_features
    from loop_rl.nn import mlp_forward

    feats = step_features(policy, traj.states[0], [traj.context.id], policy.schedule.T)
    mu, _ = mlp_forward(policy.spec, policy.params, feats[0])
    return mu


class TestRolloutBatch:
    def test_matches_sequential_rollouts(self):
        policy = small_policy(T=5)
        n = 6
        ctx_ids = np.array([0, 1, 2, 3, 0, 1])
        noises = np.stack([
            np.random.default_rng([11, i]).standard_normal((6, 2)) for i in range(n)
        ])
        states, logps = rollout_batch(policy, ctx_ids, noises)
        for i in range(n):
            traj = rollout(policy, Context(int(ctx_ids[i]), 4), lambda x, c: 0.0,
                           np.random.default_rng([11, i]))
            assert np.max(np.abs(states[i] - traj.states)) < 1e-12
            assert np.max(np.abs(logps[i] - traj.step_logprobs)) < 1e-10

    def test_shape_validation(self):
        policy = small_policy(T=5)
        with pytest.raises(ShapeError):
            rollout_batch(policy, np.zeros(2, dtype=int), np.zeros((2, 3, 2)))


class TestLogprobRecomputation:
    def test_matches_stored_at_sampling_snapshot(self):
        policy = small_policy(T=8)
        traj = rollout(policy, Context(2, 4), quadrant_reward, np.random.default_rng(9))
        recomputed = trajectory_logprob_sum(policy, traj)
        assert abs(recomputed - float(np.sum(traj.step_logprobs))) < 1e-10

    def test_gradient_matches_finite_differences(self):
        # 1-D data, T=2, tiny network so the FD sweep stays fast.
        policy = small_policy(T=2, hidden=(4,), data_dim=1, num_contexts=2, seed=4)
        traj = rollout(policy, Context(0, 2), lambda x, c: 0.0, np.random.default_rng(13))
        _, grad = trajectory_logprob_grad(policy, traj)
        h = 1e-4
        for j in range(policy.spec.param_count):
            up = policy.params.copy()
            up[j] += h
            down = policy.params.copy()
            down[j] -= h
            pu = replace(policy, params=up)
            pd = replace(policy, params=down)
            fd = (trajectory_logprob_sum(pu, traj) - trajectory_logprob_sum(pd, traj)) / (2 * h)
            denom = max(abs(grad[j]), abs(fd), 1e-8)
            assert abs(grad[j] - fd) / denom < 1e-4

    def test_sigma_doubling_closed_form(self):
        policy = small_policy(T=3)
        traj = rollout(policy, Context(1, 4), lambda x, c: 0.0, np.random.default_rng(17))
        base = trajectory_logprob_sum(policy, traj)
        tb = evaluate_transitions(policy, traj.states, [traj.context.id])
        # quadratic part of each transition's log-density
        quad = 0.0
        for j in range(3):
            sigma = policy.sigma[::-1][j]
            quad += float(np.sum((traj.states[j + 1] - tb._mu[0, j]) ** 2)) / (2 * sigma**2)
        doubled = replace(policy, sigma=2.0 * policy.sigma)
        expected = base - 3 * 2 * math.log(2.0) + quad - quad / 4.0
        assert abs(trajectory_logprob_sum(doubled, traj) - expected) < 1e-9


class TestPosteriorMean:
    def test_reduces_to_x0_at_t1(self):
        s = make_schedule(5, 0.05, 0.3)
        x0 = np.array([1.0, -2.0])
        out = posterior_mean(s, x0, np.array([9.0, 9.0]), 1)
        assert np.max(np.abs(out - x0)) < 1e-12

    def test_is_convex_combination_weights(self):
        s = make_schedule(5, 0.05, 0.3)
        t = 3
        ab_t, ab_prev = s.alpha_bar[2], s.alpha_bar[1]
        c0 = np.sqrt(ab_prev) * s.beta[2] / (1 - ab_t)
        ct = np.sqrt(s.alpha[2]) * (1 - ab_prev) / (1 - ab_t)
        x0 = np.array([1.0, 0.0])
        xt = np.array([0.0, 1.0])
        assert np.allclose(posterior_mean(s, x0, xt, t), c0 * x0 + ct * xt, atol=1e-15)


class TestPretrain:
    def test_zero_lr_keeps_params(self):
        policy = small_policy()
        data = make_mixture_dataset(64, np.random.default_rng(0))
        trained, losses = pretrain_ddpm(policy, data,
                                        PretrainConfig(steps=1, lr=0.0, weight_decay=0.0))
        assert np.array_equal(trained.params, policy.params)
        assert len(losses) == 1

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            pretrain_ddpm(small_policy(), [], PretrainConfig(steps=1))

    def test_single_point_attracts_samples(self):
        policy = small_policy(T=10, hidden=(16,), seed=1)
        point = np.array([1.0, -0.5])
        data = [(point, Context(0, 4))] * 256
        trained, _ = pretrain_ddpm(policy, data, PretrainConfig(steps=1500, seed=1))
        xs = []
        for i in range(1000):
            traj = rollout(trained, Context(0, 4), lambda x, c: 0.0,
                           np.random.default_rng([99, i]))
            xs.append(traj.states[-1])
        mean = np.mean(xs, axis=0)
        assert np.linalg.norm(mean - point) < 0.2

    def test_loss_trace_decreases_on_smoothed_windows(self):
        policy = small_policy(T=10, hidden=(16,), seed=2)
        data = make_mixture_dataset(512, np.random.default_rng(5))
        _, losses = pretrain_ddpm(policy, data, PretrainConfig(steps=600, seed=2))
        w = 200
        windows = [np.mean(losses[i : i + w]) for i in range(0, len(losses), w)]
        assert all(a > b for a, b in zip(windows, windows[1:]))


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        data = make_mixture_dataset(32, np.random.default_rng(3))
        path = tmp_path / "data.txt"
        save_dataset(path, data)
        loaded = load_dataset(path)
        assert len(loaded) == 32
        for (x1, c1), (x2, c2) in zip(data, loaded):
            assert c1.id == c2.id
            assert np.array_equal(x1, x2)

    def test_format_is_plain_text(self, tmp_path):
        data = [(np.array([0.5, -1.0]), Context(2, 4))]
        path = tmp_path / "data.txt"
        save_dataset(path, data)
        assert path.read_text().splitlines()[0] == "2 0.5 -1.0"


class TestPolicyCheckpoint:
    def test_roundtrip(self, tmp_path):
        policy = small_policy(T=7, hidden=(8, 4), seed=6)
        path = tmp_path / "policy.ckpt"
        save_policy(path, policy)
        loaded = load_policy(path)
        assert loaded.schedule.T == 7
        assert loaded.num_contexts == policy.num_contexts
        assert loaded.version == policy.version
        assert np.array_equal(loaded.params, policy.params)
        assert np.array_equal(loaded.schedule.beta, policy.schedule.beta)


class TestGroups:
    def test_group_requires_shared_context(self):
        policy = small_policy()
        t1 = rollout(policy, Context(0, 4), quadrant_reward, np.random.default_rng(0))
        t2 = rollout(policy, Context(1, 4), quadrant_reward, np.random.default_rng(1))
        with pytest.raises(ConfigError):
            TrajectoryGroup(context=Context(0, 4), members=[t1, t2])

    def test_group_requires_shared_version(self):
        policy = small_policy()
        t1 = rollout(policy, Context(0, 4), quadrant_reward, np.random.default_rng(0))
        t2 = rollout(policy, Context(0, 4), quadrant_reward, np.random.default_rng(1))
        t2.sampler_version = 5
        with pytest.raises(ConfigError):
            TrajectoryGroup(context=Context(0, 4), members=[t1, t2])
