import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loop_rl.diffusion import Context
from loop_rl.errors import ConfigError, RewardLookupError
from loop_rl.rewards import (
    RewardSpec,
    composite_reward,
    mode_distance_reward,
    quadrant_reward,
    reward_registry,
)


def ctx(i, c=4):
    return Context(i, c)


class TestQuadrant:
    def test_inside(self):
        assert quadrant_reward(np.array([0.5, 0.5]), ctx(0)) == 1.0

    def test_wrong_quadrant(self):
        assert quadrant_reward(np.array([-0.5, 0.5]), ctx(0)) == 0.0

    def test_boundary_scores_zero(self):
        assert quadrant_reward(np.array([0.0, 1.0]), ctx(0)) == 0.0

    @pytest.mark.parametrize("cid,point", [
        (0, (1.0, 2.0)), (1, (-1.0, 2.0)), (2, (-3.0, -0.1)), (3, (0.2, -5.0)),
    ])
    def test_each_quadrant(self, cid, point):
        assert quadrant_reward(np.array(point), ctx(cid)) == 1.0

    @given(st.floats(0.01, 100.0),
           st.floats(-10, 10).filter(lambda v: abs(v) > 1e-6),
           st.floats(-10, 10).filter(lambda v: abs(v) > 1e-6),
           st.integers(0, 3))
    @settings(max_examples=100, deadline=None)
    def test_scale_invariant(self, scale, x, y, cid):
        p = np.array([x, y])
        assert quadrant_reward(p, ctx(cid)) == quadrant_reward(scale * p, ctx(cid))


class TestModeDistance:
    def test_at_center(self):
        assert mode_distance_reward(np.array([1.5, 1.5]), ctx(0)) == 1.0

    def test_one_bandwidth_away(self):
        spec = RewardSpec("mode_distance", bandwidth=2.0)
        x = np.array([1.5 + 2.0, 1.5])
        assert abs(mode_distance_reward(x, ctx(0), spec) - np.exp(-1)) < 1e-12

    def test_hand_evaluated_formula(self):
        spec = RewardSpec("mode_distance", bandwidth=0.7)
        x = np.array([0.3, -1.1])
        center = np.array([1.5, 1.5])
        expected = np.exp(-((0.3 - 1.5) ** 2 + (-1.1 - 1.5) ** 2) / 0.49)
        assert abs(mode_distance_reward(x, ctx(0), spec) - expected) < 1e-12

    def test_strictly_decreasing_in_distance(self):
        rng = np.random.default_rng(0)
        direction = rng.standard_normal(2)
        direction /= np.linalg.norm(direction)
        center = np.array([1.5, 1.5])
        radii = np.linspace(0.1, 4.0, 15)
        vals = [mode_distance_reward(center + r * direction, ctx(0)) for r in radii]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestBounds:
    @given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 3),
           st.sampled_from(["quadrant_binding", "mode_distance", "composite"]))
    @settings(max_examples=150, deadline=None)
    def test_rewards_bounded(self, x, y, cid, name):
        fn = reward_registry(name)
        r = fn(np.array([x, y]), ctx(cid))
        assert 0.0 <= r <= 1.0 and np.isfinite(r)


class TestRegistry:
    def test_known_names(self):
        assert reward_registry("quadrant_binding") is quadrant_reward
        assert reward_registry("mode_distance") is mode_distance_reward
        assert reward_registry("composite") is composite_reward

    def test_unknown_name_lists_valid(self):
        with pytest.raises(RewardLookupError) as err:
            reward_registry("bogus")
        assert "quadrant_binding" in str(err.value)


class TestRewardSpec:
    def test_rejects_single_center(self):
        with pytest.raises(ConfigError):
            RewardSpec("mode_distance", mode_centers=((0.0, 0.0),))

    def test_rejects_duplicate_centers(self):
        with pytest.raises(ConfigError):
            RewardSpec("mode_distance", mode_centers=((1.0, 1.0), (1.0, 1.0)))

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ConfigError):
            RewardSpec("mode_distance", bandwidth=0.0)
