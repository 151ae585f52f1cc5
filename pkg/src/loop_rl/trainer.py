"""Experiment engine: collection, training epochs, variance probe, metrics.

Every random draw in a run comes from a generator keyed by
(seed, purpose tag, indices...), so a (config, seed) pair fully
determines each buffer, each update and the final checkpoint, and
rollouts could be farmed out per trajectory without changing results.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import (
    Context,
    DiffusionPolicy,
    PretrainConfig,
    Trajectory,
    TrajectoryGroup,
    make_mixture_dataset,
    make_policy,
    make_schedule,
    pretrain_ddpm,
    rollout_batch,
    save_policy,
)
from .errors import ConfigError, StalenessError
from .estimators import (
    ClipConfig,
    EstimatorKind,
    GROUP_KINDS,
    ON_POLICY_KINDS,
    GradientEstimate,
    loop_surrogate_grad,
    ppo_surrogate_grad,
    reinforce_bc_grad,
    reinforce_grad,
    rloo_grad,
)
from .nn import adamw_step, clip_grad_norm, init_adamw
from .rewards import reward_registry

Array = np.ndarray

# Purpose tags for random streams; each (seed, tag, ...) key is one stream.
TAG_INIT = 1
TAG_DATASET = 2
TAG_ROLLOUT = 3
TAG_SHUFFLE = 4
TAG_VALIDATE = 5
TAG_PROBE = 6

METRICS_COLUMNS = (
    "run_id", "estimator", "k", "seed", "epoch", "mean_reward",
    "surrogate_value", "grad_norm", "clip_active_fraction", "wallclock_s",
)


def stream(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(v) for v in key])


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale experiment configuration.

    On-policy estimators get inner_epochs forced to 1: their trajectories
    can be consumed once. Group-based estimators need k >= 2; k = 1 is
    allowed only for REINFORCE and PPO_CLIP.
    """

    estimator: EstimatorKind = EstimatorKind.LOOP
    k: int = 4
    epsilon: float = 0.1
    epochs: int = 60
    groups_per_epoch: int = 64
    inner_epochs: int = 2
    minibatch_groups: int = 64
    seed: int = 0
    lr: float = 3e-4
    weight_decay: float = 1e-4
    max_grad_norm: float = 1.0
    reward_name: str = "quadrant_binding"
    T: int = 20
    # model and pretraining plumbing
    data_dim: int = 2
    num_contexts: int = 4
    hidden_dims: tuple[int, ...] = (32, 32)
    beta_start: float = 1e-4
    beta_end: float = 0.35
    pretrain_steps: int = 8000
    pretrain_batch: int = 128
    pretrain_lr: float = 1e-3
    dataset_size: int = 4096
    mixture_std: float = 0.3
    validation_rollouts: int = 10
    pessimistic_min: bool = False

    def __post_init__(self):
        kind = EstimatorKind(self.estimator)
        object.__setattr__(self, "estimator", kind)
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if kind in GROUP_KINDS and self.k < 2:
            raise ConfigError(
                f"{kind.value} needs k >= 2; k = 1 is permitted only for "
                f"reinforce and ppo_clip"
            )
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if kind in ON_POLICY_KINDS and self.inner_epochs != 1:
            object.__setattr__(self, "inner_epochs", 1)
        if self.inner_epochs < 1 or self.minibatch_groups < 1:
            raise ConfigError("inner_epochs and minibatch_groups must be >= 1")
        if self.groups_per_epoch < 1 or self.T < 1 or self.epochs < 0:
            raise ConfigError("groups_per_epoch, T must be >= 1 and epochs >= 0")
        if not (0.0 < self.epsilon < 1.0) and not math.isinf(self.epsilon):
            raise ConfigError("epsilon must lie in (0, 1) or be inf (ablation)")

    @property
    def clip_config(self) -> ClipConfig:
        return ClipConfig(epsilon=self.epsilon, pessimistic_min=self.pessimistic_min)


@dataclass
class RolloutBuffer:
    """Groups collected from one policy snapshot plus a reuse counter."""

    groups: list[TrajectoryGroup]
    sampler_version: int
    passes_done: int = 0

    @property
    def members(self) -> list[Trajectory]:
        return [m for g in self.groups for m in g.members]

    @property
    def mean_reward(self) -> float:
        return float(np.mean([m.reward for m in self.members]))


@dataclass
class MetricsRow:
    run_id: str
    estimator: str
    k: int
    seed: int
    epoch: int
    mean_reward: float
    surrogate_value: float
    grad_norm: float
    clip_active_fraction: float
    wallclock_s: float


def write_metrics_csv(path, rows: list[MetricsRow], include_timing: bool = True) -> None:
    """One row per epoch; UTF-8, LF line endings; header always present."""
    columns = METRICS_COLUMNS if include_timing else METRICS_COLUMNS[:-1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            record = asdict(row)
            writer.writerow([_csv_value(record[c]) for c in columns])


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_metrics_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class PromptBaselines:
    """Per-prompt exponential running mean of rewards (decay 0.9).

    Uninitialized prompts read as 0.0; the first observation seeds the
    mean directly so early advantages are not dragged toward zero.
    """

    values: Array
    seen: Array
    decay: float = 0.9

    @classmethod
    def fresh(cls, num_contexts: int, decay: float = 0.9) -> "PromptBaselines":
        return cls(values=np.zeros(num_contexts),
                   seen=np.zeros(num_contexts, dtype=bool), decay=decay)

    def update(self, ctx_ids: Array, rewards: Array) -> None:
        ctx_ids = np.asarray(ctx_ids, dtype=int)
        rewards = np.asarray(rewards, dtype=np.float64)
        for c in np.unique(ctx_ids):
            mean = rewards[ctx_ids == c].mean()
            if self.seen[c]:
                self.values[c] = self.decay * self.values[c] + (1 - self.decay) * mean
            else:
                self.values[c] = mean
                self.seen[c] = True

    def lookup(self, ctx_ids: Array) -> Array:
        return self.values[np.asarray(ctx_ids, dtype=int)]


# ---------------------------------------------------------------------------
# collection


def collect_rollouts(policy: DiffusionPolicy, config: TrainConfig, collect_key=0) -> RolloutBuffer:
    """groups_per_epoch groups of k trajectories, prompts cycled round-robin.

    Each trajectory draws from its own stream keyed by
    (seed, TAG_ROLLOUT, collect key..., group, member), so collection is
    reproducible and order-independent.
    """
    reward_fn = reward_registry(config.reward_name)
    key = collect_key if isinstance(collect_key, (tuple, list)) else (collect_key,)
    T, d = policy.schedule.T, policy.data_dim
    n = config.groups_per_epoch * config.k
    noises = np.empty((n, T + 1, d))
    ctx_ids = np.empty(n, dtype=int)
    row = 0
    for g in range(config.groups_per_epoch):
        cid = g % policy.num_contexts
        for i in range(config.k):
            noises[row] = stream(config.seed, TAG_ROLLOUT, *key, g, i).standard_normal((T + 1, d))
            ctx_ids[row] = cid
            row += 1
    states, logps = rollout_batch(policy, ctx_ids, noises)
    groups = []
    row = 0
    for g in range(config.groups_per_epoch):
        ctx = Context(int(ctx_ids[row]), policy.num_contexts)
        members = []
        for _ in range(config.k):
            members.append(Trajectory(
                context=ctx,
                states=states[row],
                step_logprobs=logps[row],
                reward=float(reward_fn(states[row, -1], ctx)),
                sampler_version=policy.version,
            ))
            row += 1
        groups.append(TrajectoryGroup(context=ctx, members=members))
    return RolloutBuffer(groups=groups, sampler_version=policy.version)


# ---------------------------------------------------------------------------
# one training epoch


def _apply_update(policy, opt_state, estimate: GradientEstimate, config):
    """Negate the ascent gradient, clip, step; bump the policy version."""
    descent = -estimate.grad
    norm = float(np.linalg.norm(descent))
    descent = clip_grad_norm(descent, config.max_grad_norm)
    new_params, opt_state = adamw_step(opt_state, policy.params, descent)
    policy = replace(policy, params=new_params, version=policy.version + 1)
    return policy, opt_state, norm


def train_epoch(
    policy: DiffusionPolicy,
    optimizer_state,
    buffer: RolloutBuffer,
    config: TrainConfig,
    epoch: int = 0,
    prompt_baselines: PromptBaselines | None = None,
):
    """Consume one buffer: a single full-batch step for on-policy kinds,
    inner_epochs passes of shuffled minibatches for the clipped kinds.

    Returns (policy, optimizer_state, metrics dict). The buffer's reuse
    budget is spent in full here; feeding the same buffer again raises.
    """
    if buffer.passes_done > 0:
        raise StalenessError(
            f"buffer already consumed ({buffer.passes_done} passes); "
            f"collect fresh rollouts"
        )
    kind = config.estimator
    mean_reward = buffer.mean_reward
    estimates: list[GradientEstimate] = []
    norms: list[float] = []

    if kind in ON_POLICY_KINDS:
        if buffer.sampler_version != policy.version:
            raise StalenessError(
                f"on-policy {kind.value} got a buffer from snapshot "
                f"{buffer.sampler_version} at policy version {policy.version}"
            )
        if kind is EstimatorKind.REINFORCE:
            est = reinforce_grad(policy, buffer.members)
        elif kind is EstimatorKind.REINFORCE_BC:
            est = reinforce_bc_grad(policy, buffer.groups)
        else:
            est = rloo_grad(policy, buffer.groups)
        policy, optimizer_state, norm = _apply_update(policy, optimizer_state, est, config)
        estimates.append(est)
        norms.append(norm)
        buffer.passes_done = 1
    else:
        if prompt_baselines is None:
            prompt_baselines = PromptBaselines.fresh(policy.num_contexts)
        members = buffer.members
        prompt_baselines.update(
            np.array([m.context.id for m in members]),
            np.array([m.reward for m in members]),
        )
        cfg = config.clip_config
        n_groups = len(buffer.groups)
        for pass_idx in range(config.inner_epochs):
            order = stream(config.seed, TAG_SHUFFLE, epoch, pass_idx).permutation(n_groups)
            for start in range(0, n_groups, config.minibatch_groups):
                batch = [buffer.groups[j] for j in order[start : start + config.minibatch_groups]]
                if kind is EstimatorKind.LOOP:
                    est = loop_surrogate_grad(policy, batch, cfg)
                else:
                    flat = [m for g in batch for m in g.members]
                    baselines = prompt_baselines.lookup(
                        [m.context.id for m in flat]
                    )
                    est = ppo_surrogate_grad(policy, flat, cfg, baselines)
                policy, optimizer_state, norm = _apply_update(
                    policy, optimizer_state, est, config
                )
                estimates.append(est)
                norms.append(norm)
            buffer.passes_done += 1

    metrics = {
        "mean_reward": mean_reward,
        "surrogate_value": float(np.mean([e.surrogate_value for e in estimates])),
        "grad_norm": float(np.mean(norms)),
        "clip_active_fraction": float(np.mean([e.clip_active_fraction for e in estimates])),
    }
    return policy, optimizer_state, metrics


# ---------------------------------------------------------------------------
# variance probe


@dataclass
class ProbeRow:
    k: int
    resamples: int
    cov_trace: float
    grad_mean: Array


@dataclass
class VarianceReport:
    rows: list[ProbeRow]
    slope_loglog: float | None

    def trace_for(self, k: int) -> float:
        return next(r.cov_trace for r in self.rows if r.k == k)


# Probing a group estimator at K = 1 falls back to its single-trajectory
# counterpart (the estimator the variance claim is measured against).
_K1_FALLBACK = {
    EstimatorKind.LOOP: EstimatorKind.PPO_CLIP,
    EstimatorKind.RLOO: EstimatorKind.REINFORCE,
    EstimatorKind.REINFORCE_BC: EstimatorKind.REINFORCE,
}


def variance_probe(
    policy: DiffusionPolicy,
    config: TrainConfig,
    num_resamples: int,
    k_values=None,
) -> VarianceReport:
    """Hold the policy fixed and re-estimate its gradient many times.

    For each K, draws num_resamples fresh buffers, computes the configured
    estimator's gradient and accumulates per-coordinate mean and variance;
    reports the covariance trace per K and, for sweeps, the least-squares
    slope of log trace against log K. PPO baselines stay at zero here so
    resamples remain independent.
    """
    if num_resamples < 100:
        raise ConfigError("variance probe needs at least 100 resamples")
    ks = list(k_values) if k_values is not None else [config.k]
    cfg = config.clip_config
    rows = []
    for k in ks:
        kind = config.estimator
        if k == 1 and kind in _K1_FALLBACK:
            kind = _K1_FALLBACK[kind]
        probe_config = replace(config, estimator=kind, k=k, inner_epochs=1)
        mean = np.zeros(policy.spec.param_count)
        m2 = np.zeros(policy.spec.param_count)
        for r in range(num_resamples):
            buffer = collect_rollouts(policy, probe_config, collect_key=(TAG_PROBE, k, r))
            if kind is EstimatorKind.LOOP:
                est = loop_surrogate_grad(policy, buffer.groups, cfg)
            elif kind is EstimatorKind.PPO_CLIP:
                est = ppo_surrogate_grad(policy, buffer.members, cfg, baselines=None)
            elif kind is EstimatorKind.RLOO:
                est = rloo_grad(policy, buffer.groups)
            elif kind is EstimatorKind.REINFORCE_BC:
                est = reinforce_bc_grad(policy, buffer.groups)
            else:
                est = reinforce_grad(policy, buffer.members)
            delta = est.grad - mean
            mean += delta / (r + 1)
            m2 += delta * (est.grad - mean)
        trace = float(np.sum(m2 / (num_resamples - 1)))
        rows.append(ProbeRow(k=k, resamples=num_resamples, cov_trace=trace,
                             grad_mean=mean))
    slope = None
    positive = [(r.k, r.cov_trace) for r in rows if r.cov_trace > 0]
    if len({k for k, _ in positive}) >= 2:
        xs = np.log([k for k, _ in positive])
        ys = np.log([t for _, t in positive])
        slope = float(np.polyfit(xs, ys, 1)[0])
    return VarianceReport(rows=rows, slope_loglog=slope)


def write_variance_csv(path, report: VarianceReport) -> None:
    """Schema: k,resamples,cov_trace,slope_loglog.

    Per-K rows leave the slope empty; a final summary row carries it.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("k", "resamples", "cov_trace", "slope_loglog"))
        for row in report.rows:
            writer.writerow((row.k, row.resamples, repr(row.cov_trace), ""))
        if report.slope_loglog is not None:
            total = sum(r.resamples for r in report.rows)
            writer.writerow(("sweep", total, "", repr(report.slope_loglog)))


# ---------------------------------------------------------------------------
# full experiments


@dataclass
class ExperimentResult:
    rows: list[MetricsRow]
    policy: DiffusionPolicy
    base_validation: float
    final_validation: float


def build_base_policy(config: TrainConfig) -> DiffusionPolicy:
    """Pretrain the generative model on the synthetic mixture.

    Contexts in the mixture are independent of the modes, so the base
    policy samples the data distribution but has no prompt binding yet.
    """
    dataset = make_mixture_dataset(
        config.dataset_size,
        stream(config.seed, TAG_DATASET),
        std=config.mixture_std,
        num_contexts=config.num_contexts,
    )
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    policy = make_policy(
        data_dim=config.data_dim,
        num_contexts=config.num_contexts,
        schedule=schedule,
        hidden_dims=config.hidden_dims,
        rng=stream(config.seed, TAG_INIT),
    )
    pre = PretrainConfig(
        steps=config.pretrain_steps,
        batch_size=config.pretrain_batch,
        lr=config.pretrain_lr,
        weight_decay=config.weight_decay,
        max_grad_norm=config.max_grad_norm,
        seed=config.seed,
    )
    trained, _ = pretrain_ddpm(policy, dataset, pre)
    return trained


def validate_policy(policy: DiffusionPolicy, config: TrainConfig, split_key: int = 1) -> float:
    """Mean reward over fresh rollouts per prompt (all prompts, fresh noise)."""
    reward_fn = reward_registry(config.reward_name)
    per_prompt = []
    for c in range(policy.num_contexts):
        ctx = Context(c, policy.num_contexts)
        noises = np.stack([
            stream(config.seed, TAG_VALIDATE, split_key, c, i)
            .standard_normal((policy.schedule.T + 1, policy.data_dim))
            for i in range(config.validation_rollouts)
        ])
        states, _ = rollout_batch(policy, np.full(len(noises), c), noises)
        per_prompt.append(np.mean([
            reward_fn(states[i, -1], ctx) for i in range(len(noises))
        ]))
    return float(np.mean(per_prompt))


def run_experiment(
    config: TrainConfig,
    base_policy: DiffusionPolicy | None = None,
    out_dir=None,
    run_id: str | None = None,
    include_timing: bool = True,
) -> ExperimentResult:
    """Pretrain (or reuse) a base policy, fine-tune it, emit metrics.

    Writes metrics.csv, a policy checkpoint and a summary.json into
    out_dir when given. Validation follows the held-out protocol: fresh
    rollouts per prompt, averaged (validation_rollouts each).
    """
    if run_id is None:
        run_id = f"{config.estimator.value}_k{config.k}_s{config.seed}"
    policy = base_policy if base_policy is not None else build_base_policy(config)
    base_validation = validate_policy(policy, config, split_key=0)
    opt_state = init_adamw(
        policy.spec.param_count, lr=config.lr, weight_decay=config.weight_decay
    )
    baselines = PromptBaselines.fresh(policy.num_contexts)
    rows: list[MetricsRow] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        buffer = collect_rollouts(policy, config, collect_key=epoch)
        policy, opt_state, metrics = train_epoch(
            policy, opt_state, buffer, config, epoch=epoch,
            prompt_baselines=baselines,
        )
        wallclock = time.perf_counter() - t0 if include_timing else 0.0
        rows.append(MetricsRow(
            run_id=run_id,
            estimator=config.estimator.value,
            k=config.k,
            seed=config.seed,
            epoch=epoch,
            wallclock_s=wallclock,
            **metrics,
        ))
    final_validation = validate_policy(policy, config, split_key=1)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / f"{run_id}_metrics.csv", rows, include_timing)
        save_policy(out / f"{run_id}_policy.ckpt", policy)
        summary = {
            "run_id": run_id,
            "estimator": config.estimator.value,
            "k": config.k,
            "seed": config.seed,
            "base_validation": base_validation,
            "final_validation": final_validation,
        }
        (out / f"{run_id}_summary.json").write_text(
            json.dumps(summary, indent=2) + "\n", encoding="utf-8"
        )
    return ExperimentResult(
        rows=rows,
        policy=policy,
        base_validation=base_validation,
        final_validation=final_validation,
    )


DEFAULT_COMPARE_SEEDS = (0, 1, 2)


def compare_estimators(
    config: TrainConfig,
    seeds=DEFAULT_COMPARE_SEEDS,
    loop_ks=(2, 4),
    include_timing: bool = True,
    progress=None,
):
    """Run the estimator family on shared seeds and base policies.

    Returns (metrics rows, summaries); each summary records the run's
    base and final validation rewards. The base policy is pretrained once
    per seed and shared across estimator configs so comparisons are paired.
    """
    variants = [
        (EstimatorKind.REINFORCE, 1),
        (EstimatorKind.REINFORCE_BC, max(config.k, 2)),
        (EstimatorKind.PPO_CLIP, 1),
    ] + [(EstimatorKind.LOOP, k) for k in loop_ks]
    all_rows: list[MetricsRow] = []
    summaries: list[dict] = []
    for seed in seeds:
        seed_config = replace(config, seed=seed)
        base = build_base_policy(seed_config)
        for kind, k in variants:
            run_config = replace(seed_config, estimator=kind, k=k)
            if progress is not None:
                progress(f"{kind.value} k={k} seed={seed}")
            result = run_experiment(run_config, base_policy=base,
                                    include_timing=include_timing)
            all_rows.extend(result.rows)
            summaries.append({
                "run_id": f"{kind.value}_k{k}_s{seed}",
                "estimator": kind.value,
                "k": k,
                "seed": seed,
                "base_validation": result.base_validation,
                "final_validation": result.final_validation,
            })
    return all_rows, summaries
