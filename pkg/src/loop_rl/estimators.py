"""Policy-gradient estimators over diffusion trajectories.

Five estimators share one engine. The on-policy family weights each
trajectory's score (gradient of its log-probability under the current
parameters) by a reward or advantage:

  REINFORCE      weight = reward
  REINFORCE_BC   weight = reward - mean reward of its K-group (self included)
  RLOO           weight = reward - mean reward of the other K-1 members

The off-policy family reuses trajectories sampled from an earlier
snapshot. Each step carries an importance ratio between the current and
the sampling-time log-density; the objective applies the clipped ratio
to the advantage, so a step whose ratio has left [1-eps, 1+eps]
contributes exactly zero gradient:

  PPO_CLIP       advantage = reward - per-prompt baseline (caller supplied)
  LOOP           K trajectories per prompt, leave-one-out baseline, clipped

All estimators return ascent directions for the expected reward; the
trainer negates once at the optimizer boundary. Estimates are averaged
over trajectories (for groups this equals a group mean of per-group
means, since K is uniform).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .diffusion import DiffusionPolicy, Trajectory, TrajectoryGroup, \
    evaluate_transitions
from .errors import ConfigError, ContractError, ShapeError, StalenessError

Array = np.ndarray

# Log-ratio magnitudes past this are saturated before exponentiating; such
# steps sit far outside any reasonable clip band anyway.
LOG_RATIO_CLAMP = 50.0


class EstimatorKind(str, Enum):
    REINFORCE = "reinforce"
    REINFORCE_BC = "reinforce_bc"
    RLOO = "rloo"
    PPO_CLIP = "ppo_clip"
    LOOP = "loop"


ON_POLICY_KINDS = frozenset(
    {EstimatorKind.REINFORCE, EstimatorKind.REINFORCE_BC, EstimatorKind.RLOO}
)
GROUP_KINDS = frozenset(
    {EstimatorKind.REINFORCE_BC, EstimatorKind.RLOO, EstimatorKind.LOOP}
)


@dataclass(frozen=True)
class ClipConfig:
    """Clip band half-width; math.inf selects the unclipped ablation.

    ``pessimistic_min`` switches the per-step objective from the plain
    clipped ratio to min(ratio * A, clip(ratio) * A).
    """

    epsilon: float = 0.1
    pessimistic_min: bool = False

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0) and not math.isinf(self.epsilon):
            raise ConfigError(
                f"epsilon must be in (0, 1), or inf for the unclipped "
                f"ablation; got {self.epsilon}"
            )


@dataclass(frozen=True)
class AdvantageRecord:
    raw_reward: float
    baseline: float

    @property
    def advantage(self) -> float:
        return self.raw_reward - self.baseline


@dataclass
class GradientEstimate:
    """Flat ascent gradient plus estimator diagnostics."""

    grad: Array
    kind: EstimatorKind
    k_used: int
    clip_active_fraction: float
    surrogate_value: float
    saturated_fraction: float = 0.0


# ---------------------------------------------------------------------------
# baselines, ratios, clipping


def loo_baseline(rewards, i: int) -> float:
    """Mean of the other K-1 rewards; undefined (ConfigError) for K < 2."""
    rewards = np.asarray(rewards, dtype=np.float64)
    k = rewards.shape[0]
    if k < 2:
        raise ConfigError("leave-one-out baseline needs at least 2 rewards")
    if not (0 <= i < k):
        raise ConfigError(f"index {i} outside [0, {k})")
    return float((rewards.sum() - rewards[i]) / (k - 1))


def rloo_advantages(rewards) -> Array:
    """reward_i minus the mean of the others, for every i at once."""
    rewards = np.asarray(rewards, dtype=np.float64)
    k = rewards.shape[0]
    if k < 2:
        raise ConfigError("leave-one-out advantages need at least 2 rewards")
    if np.all(rewards == rewards[0]):
        # keep the all-equal case exactly zero despite rounding in the mean
        return np.zeros(k)
    return (rewards - rewards.mean()) * (k / (k - 1))


def bc_advantages(rewards) -> Array:
    """reward_i minus the group mean including i itself."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] < 2:
        raise ConfigError("baseline correction needs at least 2 rewards")
    if np.all(rewards == rewards[0]):
        return np.zeros(rewards.shape[0])
    return rewards - rewards.mean()


def advantage_records(rewards, baselines) -> list[AdvantageRecord]:
    return [
        AdvantageRecord(raw_reward=float(r), baseline=float(b))
        for r, b in zip(rewards, baselines)
    ]


def importance_ratio(logp_new: float, logp_old: float) -> float:
    """exp(logp_new - logp_old), saturated at |difference| = 50."""
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise ConfigError("importance ratio needs finite log-probabilities")
    diff = logp_new - logp_old
    return math.exp(max(-LOG_RATIO_CLAMP, min(LOG_RATIO_CLAMP, diff)))


def clip_ratio(r: float, cfg: ClipConfig) -> float:
    if math.isinf(cfg.epsilon):
        return float(r)
    return float(min(max(r, 1.0 - cfg.epsilon), 1.0 + cfg.epsilon))


# ---------------------------------------------------------------------------
# batching helpers


def _stack(trajs: list[Trajectory], need_old_logprobs: bool):
    if not trajs:
        raise ConfigError("no trajectories supplied")
    states = np.stack([t.states for t in trajs])
    ctx_ids = np.array([t.context.id for t in trajs], dtype=int)
    rewards = np.array([t.reward for t in trajs])
    old = None
    if need_old_logprobs:
        if any(t.step_logprobs is None for t in trajs):
            raise ContractError(
                "off-policy estimators need the sampling-time log-probs "
                "stored on every trajectory"
            )
        old = np.stack([t.step_logprobs for t in trajs])
    return states, ctx_ids, rewards, old


def _flatten_groups(groups: list[TrajectoryGroup], min_k: int):
    if not groups:
        raise ConfigError("no trajectory groups supplied")
    ks = {g.k for g in groups}
    if len(ks) != 1:
        raise ConfigError(f"groups must share one K, got sizes {sorted(ks)}")
    k = ks.pop()
    if k < min_k:
        raise ConfigError(f"this estimator needs K >= {min_k}, got K = {k}")
    return [m for g in groups for m in g.members], k


def _check_on_policy(policy: DiffusionPolicy, trajs: list[Trajectory], kind):
    stale = {t.sampler_version for t in trajs if t.sampler_version != policy.version}
    if stale:
        raise StalenessError(
            f"{kind.value} is on-policy: trajectories from snapshot(s) "
            f"{sorted(stale)} cannot be used at policy version {policy.version}; "
            f"sampled trajectories can be used once"
        )


# ---------------------------------------------------------------------------
# on-policy estimators


def _on_policy_estimate(
    policy: DiffusionPolicy,
    trajs: list[Trajectory],
    advantages: Array,
    kind: EstimatorKind,
    k_used: int,
) -> GradientEstimate:
    states, ctx_ids, _, _ = _stack(trajs, need_old_logprobs=False)
    tb = evaluate_transitions(policy, states, ctx_ids)
    n = len(trajs)
    weights = np.broadcast_to(advantages[:, None] / n, tb.logp.shape)
    grad = tb.weighted_grad(weights)
    surrogate = float(np.mean(advantages * tb.logp.sum(axis=1)))
    return GradientEstimate(
        grad=grad,
        kind=kind,
        k_used=k_used,
        clip_active_fraction=0.0,
        surrogate_value=surrogate,
    )


def reinforce_grad(policy: DiffusionPolicy, trajs: list[Trajectory]) -> GradientEstimate:
    """Batch mean of reward-weighted score functions; strictly on-policy."""
    _check_on_policy(policy, trajs, EstimatorKind.REINFORCE)
    rewards = np.array([t.reward for t in trajs])
    return _on_policy_estimate(policy, trajs, rewards, EstimatorKind.REINFORCE, 1)


def reinforce_bc_grad(
    policy: DiffusionPolicy, groups: list[TrajectoryGroup]
) -> GradientEstimate:
    """REINFORCE with the per-prompt mean reward (self included) subtracted."""
    members, k = _flatten_groups(groups, min_k=2)
    _check_on_policy(policy, members, EstimatorKind.REINFORCE_BC)
    adv = np.concatenate([bc_advantages(g.rewards) for g in groups])
    return _on_policy_estimate(policy, members, adv, EstimatorKind.REINFORCE_BC, k)


def rloo_grad(policy: DiffusionPolicy, groups: list[TrajectoryGroup]) -> GradientEstimate:
    """REINFORCE with the unbiased leave-one-out baseline per group."""
    members, k = _flatten_groups(groups, min_k=2)
    _check_on_policy(policy, members, EstimatorKind.RLOO)
    adv = np.concatenate([rloo_advantages(g.rewards) for g in groups])
    return _on_policy_estimate(policy, members, adv, EstimatorKind.RLOO, k)


# ---------------------------------------------------------------------------
# clipped importance-sampling estimators


def _clipped_estimate(
    policy: DiffusionPolicy,
    trajs: list[Trajectory],
    advantages: Array,
    cfg: ClipConfig,
    kind: EstimatorKind,
    k_used: int,
) -> GradientEstimate:
    states, ctx_ids, _, old_logp = _stack(trajs, need_old_logprobs=True)
    tb = evaluate_transitions(policy, states, ctx_ids)
    n = len(trajs)
    diff = tb.logp - old_logp
    saturated = np.abs(diff) > LOG_RATIO_CLAMP
    ratio = np.exp(np.clip(diff, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    adv = advantages[:, None]
    if math.isinf(cfg.epsilon):
        clipped = ratio
        inside = np.ones_like(ratio, dtype=bool)
    else:
        clipped = np.clip(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon)
        inside = (ratio >= 1.0 - cfg.epsilon) & (ratio <= 1.0 + cfg.epsilon)
    if cfg.pessimistic_min:
        per_step = np.minimum(ratio * adv, clipped * adv)
        pass_grad = ratio * adv <= clipped * adv
    else:
        per_step = clipped * adv
        pass_grad = inside
    weights = adv * ratio * pass_grad / n
    grad = tb.weighted_grad(weights)
    return GradientEstimate(
        grad=grad,
        kind=kind,
        k_used=k_used,
        clip_active_fraction=float(np.mean(~inside)),
        surrogate_value=float(per_step.sum() / n),
        saturated_fraction=float(np.mean(saturated)),
    )


def ppo_surrogate_grad(
    policy: DiffusionPolicy,
    old_trajs: list[Trajectory],
    cfg: ClipConfig,
    baselines=None,
) -> GradientEstimate:
    """Clipped-ratio surrogate over single trajectories.

    ``baselines`` may be None (zero baseline), a mapping from context id
    to a value (the trainer passes its per-prompt running means), or one
    value per trajectory.
    """
    rewards = np.array([t.reward for t in old_trajs], dtype=np.float64)
    if baselines is None:
        b = np.zeros_like(rewards)
    elif isinstance(baselines, dict):
        b = np.array([baselines.get(t.context.id, 0.0) for t in old_trajs])
    else:
        b = np.asarray(baselines, dtype=np.float64)
        if b.shape != rewards.shape:
            raise ShapeError("need one baseline per trajectory")
    return _clipped_estimate(
        policy, old_trajs, rewards - b, cfg, EstimatorKind.PPO_CLIP, 1
    )


def loop_surrogate_grad(
    policy: DiffusionPolicy,
    old_groups: list[TrajectoryGroup],
    cfg: ClipConfig,
) -> GradientEstimate:
    """Clipped-ratio surrogate over K-groups with leave-one-out baselines.

    No KL penalty, no standard-deviation normalization, no length
    normalization: the chain length is fixed, the baseline handles
    centering, and the clip handles divergence.
    """
    members, k = _flatten_groups(old_groups, min_k=2)
    adv = np.concatenate([rloo_advantages(g.rewards) for g in old_groups])
    return _clipped_estimate(policy, members, adv, cfg, EstimatorKind.LOOP, k)
