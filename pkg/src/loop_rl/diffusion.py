"""Toy denoising-diffusion model treated as a stochastic policy.

The reverse chain x_T -> ... -> x_0 is a sequence of Gaussian steps whose
means come from the MLP in :mod:`loop_rl.nn` and whose standard deviations
are fixed per step. Each step is an action; sampling a chain records the
log-density of every transition so estimators can later form importance
ratios against the parameters that generated it. Rewards arrive only at
x_0.

Conventions:
  - states are stored noisiest-first: states[0] = x_T, states[T] = x_0;
  - transition j goes from states[j] (timestep t = T - j) to states[j+1];
  - the network input is [x_t, one-hot context, t / T].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .nn import (
    MlpSpec,
    adamw_step,
    clip_grad_norm,
    decode_params,
    encode_params,
    init_adamw,
    init_params,
    mlp_backward,
    mlp_forward,
)

Array = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# schedule and contexts


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward/reverse diffusion coefficients for T steps."""

    T: int
    beta: Array
    alpha: Array
    alpha_bar: Array


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.35) -> NoiseSchedule:
    """Linear beta schedule with derived alpha and cumulative-product terms."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class Context:
    """A prompt: an integer id with a one-hot embedding of length num_contexts."""

    id: int
    num_contexts: int

    def __post_init__(self):
        if not (0 <= self.id < self.num_contexts):
            raise ConfigError(
                f"context id {self.id} outside [0, {self.num_contexts})"
            )

    @property
    def embedding(self) -> Array:
        e = np.zeros(self.num_contexts)
        e[self.id] = 1.0
        return e


# ---------------------------------------------------------------------------
# the policy


@dataclass(frozen=True)
class DiffusionPolicy:
    """Reverse-process sampler: MLP mean predictor plus fixed step noise.

    ``version`` identifies the parameter snapshot; the trainer bumps it on
    every optimizer step so estimators can detect stale trajectories.
    """

    spec: MlpSpec
    params: Array
    schedule: NoiseSchedule
    sigma: Array
    num_contexts: int
    data_dim: int
    version: int = 0

    def __post_init__(self):
        expected_in = self.data_dim + self.num_contexts + 1
        if self.spec.input_dim != expected_in:
            raise ConfigError(
                f"MLP input dim must be data_dim + num_contexts + 1 = "
                f"{expected_in}, got {self.spec.input_dim}"
            )
        if self.spec.output_dim != self.data_dim:
            raise ConfigError("MLP output dim must equal data_dim")
        if len(self.sigma) != self.schedule.T or np.any(np.asarray(self.sigma) <= 0):
            raise ConfigError("sigma must hold T positive entries")


def make_policy(
    data_dim: int,
    num_contexts: int,
    schedule: NoiseSchedule,
    hidden_dims: tuple[int, ...] = (32, 32),
    rng: np.random.Generator | None = None,
    params: Array | None = None,
) -> DiffusionPolicy:
    """Build a policy with sigma_t = sqrt(beta_t) and fresh or given params."""
    spec = MlpSpec(
        input_dim=data_dim + num_contexts + 1,
        hidden_dims=tuple(hidden_dims),
        output_dim=data_dim,
    )
    if params is None:
        if rng is None:
            raise ConfigError("need either params or an rng to initialize them")
        params = init_params(spec, rng)
    return DiffusionPolicy(
        spec=spec,
        params=np.asarray(params, dtype=np.float64),
        schedule=schedule,
        sigma=np.sqrt(schedule.beta),
        num_contexts=num_contexts,
        data_dim=data_dim,
    )


def step_features(policy: DiffusionPolicy, x: Array, ctx_ids: Array, t) -> Array:
    """Network input rows [x_t, one-hot(c), t / T] for a batch of states.

    ``t`` may be a scalar or one value per row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    onehot = np.zeros((n, policy.num_contexts))
    onehot[np.arange(n), np.asarray(ctx_ids, dtype=int)] = 1.0
    tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)) / policy.schedule.T
    return np.concatenate([x, onehot, tcol[:, None]], axis=1)


# ---------------------------------------------------------------------------
# densities


def gaussian_logpdf(x: Array, mean: Array, sigma: float) -> float:
    """Log-density of an isotropic Gaussian with scalar standard deviation."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if x.shape != mean.shape:
        raise ShapeError(f"x {x.shape} and mean {mean.shape} must match")
    d = x.size
    quad = float(np.sum((x - mean) ** 2)) / (2.0 * sigma * sigma)
    return -0.5 * d * LOG_2PI - d * math.log(sigma) - quad


def _logpdf_rows(x: Array, mean: Array, sigma) -> Array:
    """Row-wise isotropic Gaussian log-density; sigma broadcasts over rows."""
    d = x.shape[-1]
    sigma = np.asarray(sigma, dtype=np.float64)
    quad = np.sum((x - mean) ** 2, axis=-1) / (2.0 * sigma * sigma)
    return -0.5 * d * LOG_2PI - d * np.log(sigma) - quad


# ---------------------------------------------------------------------------
# forward noising (used for pretraining only)


def forward_noising(schedule: NoiseSchedule, x0: Array, t: int, noise: Array) -> Array:
    """q(x_t | x_0) sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not (1 <= t <= schedule.T):
        raise ConfigError(f"t must be in [1, {schedule.T}], got {t}")
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(noise)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """One reverse-diffusion rollout with its sampling-time log-probs."""

    context: Context
    states: Array  # (T+1, d); states[0] = x_T, states[T] = x_0
    step_logprobs: Array | None  # (T,) log-density of each transition when sampled
    reward: float
    sampler_version: int

    def __post_init__(self):
        if self.step_logprobs is not None and len(self.step_logprobs) != len(self.states) - 1:
            raise ShapeError("need one stored log-prob per transition")
        if not math.isfinite(self.reward):
            raise NumericError("trajectory rewards must be finite")

    @property
    def x0(self) -> Array:
        return self.states[-1]


@dataclass
class TrajectoryGroup:
    """K rollouts sharing one prompt and one sampler snapshot."""

    context: Context
    members: list[Trajectory]

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigError("a trajectory group needs at least one member")
        if any(m.context.id != self.context.id for m in self.members):
            raise ConfigError("all group members must share the group context")
        versions = {m.sampler_version for m in self.members}
        if len(versions) != 1:
            raise ConfigError("all group members must share a sampler version")

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def sampler_version(self) -> int:
        return self.members[0].sampler_version

    @property
    def rewards(self) -> Array:
        return np.array([m.reward for m in self.members])


# ---------------------------------------------------------------------------
# sampling


def reverse_step(
    policy: DiffusionPolicy, context: Context, t: int, x_t: Array, rng
) -> tuple[Array, float]:
    """Sample x_{t-1} ~ N(mu(x_t, c, t), sigma_t^2 I); return it with its log-density."""
    if not (1 <= t <= policy.schedule.T):
        raise ConfigError(f"t must be in [1, {policy.schedule.T}], got {t}")
    feats = step_features(policy, x_t, [context.id], t)
    mu, _ = mlp_forward(policy.spec, policy.params, feats[0])
    if not np.all(np.isfinite(mu)):
        raise NumericError(f"network produced non-finite mean at t={t}")
    sigma = float(policy.sigma[t - 1])
    x_prev = mu + sigma * rng.standard_normal(policy.data_dim)
    return x_prev, gaussian_logpdf(x_prev, mu, sigma)


def rollout(policy: DiffusionPolicy, context: Context, reward_fn, rng) -> Trajectory:
    """One full reverse chain from x_T ~ N(0, I); reward assigned at x_0 only."""
    T = policy.schedule.T
    d = policy.data_dim
    states = np.empty((T + 1, d))
    logps = np.empty(T)
    states[0] = rng.standard_normal(d)
    x = states[0]
    for j, t in enumerate(range(T, 0, -1)):
        x, lp = reverse_step(policy, context, t, x, rng)
        states[j + 1] = x
        logps[j] = lp
    reward = float(reward_fn(states[T], context))
    return Trajectory(
        context=context,
        states=states,
        step_logprobs=logps,
        reward=reward,
        sampler_version=policy.version,
    )


def rollout_batch(
    policy: DiffusionPolicy, ctx_ids: Array, noises: Array
) -> tuple[Array, Array]:
    """Vectorized rollouts from pre-drawn noise.

    ``noises`` has shape (N, T+1, d): row 0 seeds x_T, row j is the step
    noise for transition j. Matches per-trajectory :func:`rollout` draws
    using one generator per trajectory.
    """
    T = policy.schedule.T
    n, rows, d = noises.shape
    if rows != T + 1 or d != policy.data_dim:
        raise ShapeError(f"noises must be (N, {T + 1}, {policy.data_dim})")
    ctx_ids = np.asarray(ctx_ids, dtype=int)
    states = np.empty((n, T + 1, d))
    logps = np.empty((n, T))
    states[:, 0] = noises[:, 0]
    x = states[:, 0]
    for j, t in enumerate(range(T, 0, -1)):
        feats = step_features(policy, x, ctx_ids, t)
        mu, _ = mlp_forward(policy.spec, policy.params, feats)
        if not np.all(np.isfinite(mu)):
            raise NumericError(f"network produced non-finite means at t={t}")
        sigma = float(policy.sigma[t - 1])
        x = mu + sigma * noises[:, j + 1]
        states[:, j + 1] = x
        logps[:, j] = _logpdf_rows(x, mu, sigma)
    return states, logps


# ---------------------------------------------------------------------------
# log-prob recomputation under the current parameters


@dataclass
class TransitionBatch:
    """All transitions of a trajectory batch evaluated under one snapshot.

    One flat forward pass covers every (trajectory, step) pair; the tape is
    kept so a weighted score gradient needs just one backward pass.
    """

    logp: Array  # (N, T) per-transition log-prob under the evaluated params
    _mu: Array = field(repr=False)  # (N, T, d)
    _x_next: Array = field(repr=False)
    _sigma: Array = field(repr=False)  # (T,)
    _tape: object = field(repr=False)

    def weighted_grad(self, step_weights: Array) -> Array:
        """d/dtheta of sum_{i,t} w[i,t] * logp[i,t]; sigma is not learned."""
        w = np.asarray(step_weights, dtype=np.float64)
        if w.shape != self.logp.shape:
            raise ShapeError(f"weights {w.shape} must match logp {self.logp.shape}")
        cot = (self._x_next - self._mu) / (self._sigma[None, :, None] ** 2)
        cot *= w[:, :, None]
        n, T, d = cot.shape
        grad, _ = mlp_backward(self._tape, cot.reshape(n * T, d))
        return grad


def evaluate_transitions(
    policy: DiffusionPolicy, states: Array, ctx_ids: Array
) -> TransitionBatch:
    """Score every stored transition under the CURRENT parameters."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    n, rows, d = states.shape
    T = policy.schedule.T
    if rows != T + 1 or d != policy.data_dim:
        raise ShapeError(
            f"states must be (N, {T + 1}, {policy.data_dim}), got {states.shape}"
        )
    ctx_ids = np.asarray(ctx_ids, dtype=int)
    # Feature rows for all transitions at once; step j has t = T - j.
    ts = np.arange(T, 0, -1, dtype=np.float64)
    x_t = states[:, :-1, :].reshape(n * T, d)
    feats = step_features(
        policy,
        x_t,
        np.repeat(ctx_ids, T),
        np.tile(ts, n),
    )
    mu_flat, tape = mlp_forward(policy.spec, policy.params, feats)
    mu = mu_flat.reshape(n, T, d)
    x_next = states[:, 1:, :]
    sigma = policy.sigma[::-1].copy()  # sigma for step j is sigma_{T-j}
    logp = _logpdf_rows(x_next, mu, sigma[None, :])
    return TransitionBatch(logp=logp, _mu=mu, _x_next=x_next, _sigma=sigma, _tape=tape)


def trajectory_logprob_sum(policy: DiffusionPolicy, traj: Trajectory) -> float:
    """Sum of transition log-probs recomputed under the current params."""
    tb = evaluate_transitions(policy, traj.states, [traj.context.id])
    return float(tb.logp.sum())


def trajectory_logprob_grad(policy: DiffusionPolicy, traj: Trajectory) -> tuple[float, Array]:
    """The log-prob sum and its exact parameter gradient."""
    tb = evaluate_transitions(policy, traj.states, [traj.context.id])
    grad = tb.weighted_grad(np.ones_like(tb.logp))
    return float(tb.logp.sum()), grad


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_grad_norm: float = 1.0
    seed: int = 0


def posterior_mean(schedule: NoiseSchedule, x0: Array, x_t: Array, t) -> Array:
    """Mean of q(x_{t-1} | x_t, x_0); the regression target for pretraining.

    With abar_0 = 1 this reduces to x0 at t = 1.
    """
    t = np.asarray(t, dtype=int)
    ab_t = schedule.alpha_bar[t - 1]
    ab_prev = np.where(t > 1, schedule.alpha_bar[np.maximum(t - 2, 0)], 1.0)
    beta_t = schedule.beta[t - 1]
    alpha_t = schedule.alpha[t - 1]
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x0.ndim > 1:
        c0 = np.broadcast_to(c0, (x0.shape[0],))[:, None]
        ct = np.broadcast_to(ct, (x0.shape[0],))[:, None]
    return c0 * x0 + ct * x_t


def pretrain_ddpm(
    policy: DiffusionPolicy, dataset, config: PretrainConfig
) -> tuple[DiffusionPolicy, list[float]]:
    """Denoising pretraining: regress the network onto posterior means.

    Each step draws a minibatch, noises it to a random timestep and takes
    one clipped AdamW step on the mean squared error. Returns the trained
    policy and the per-step loss trace.
    """
    pairs = list(dataset)
    if not pairs:
        raise ConfigError("pretraining dataset is empty")
    x0s = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
    ctx_ids = np.array([c.id for _, c in pairs], dtype=int)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5E7]))
    opt = init_adamw(
        policy.spec.param_count, lr=config.lr, weight_decay=config.weight_decay
    )
    params = policy.params
    T = policy.schedule.T
    losses: list[float] = []
    for _ in range(config.steps):
        idx = rng.integers(0, len(pairs), size=config.batch_size)
        t = rng.integers(1, T + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, policy.data_dim))
        x0 = x0s[idx]
        ab = policy.schedule.alpha_bar[t - 1][:, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        target = posterior_mean(policy.schedule, x0, x_t, t)
        feats = step_features(policy, x_t, ctx_ids[idx], t)
        mu, tape = mlp_forward(policy.spec, params, feats)
        diff = mu - target
        losses.append(float(np.mean(np.sum(diff * diff, axis=1))))
        grad, _ = mlp_backward(tape, 2.0 * diff / config.batch_size)
        grad = clip_grad_norm(grad, config.max_grad_norm)
        params, opt = adamw_step(opt, params, grad)
    return replace(policy, params=params, version=policy.version + 1), losses


# ---------------------------------------------------------------------------
# synthetic data


def make_mixture_dataset(
    n: int,
    rng: np.random.Generator,
    centers=None,
    std: float = 0.3,
    num_contexts: int = 4,
) -> list[tuple[Array, Context]]:
    """Samples from a Gaussian mixture paired with independent prompts.

    Contexts are drawn independently of the mixture component, so a model
    fit to this data reproduces the mixture but carries no prompt binding;
    binding is left entirely to reinforcement fine-tuning.
    """
    from .rewards import DEFAULT_CENTERS

    centers = np.asarray(centers if centers is not None else DEFAULT_CENTERS)
    comp = rng.integers(0, len(centers), size=n)
    ctx = rng.integers(0, num_contexts, size=n)
    x = centers[comp] + std * rng.standard_normal((n, centers.shape[1]))
    return [(x[i], Context(int(ctx[i]), num_contexts)) for i in range(n)]


def save_dataset(path, dataset) -> None:
    """Plain-text dataset: one 'context_id x y' line per sample."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, c in dataset:
            coords = " ".join(repr(float(v)) for v in x)
            fh.write(f"{c.id} {coords}\n")


def load_dataset(path, num_contexts: int = 4) -> list[tuple[Array, Context]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            out.append(
                (np.array([float(v) for v in parts[1:]]),
                 Context(int(parts[0]), num_contexts))
            )
    return out


# ---------------------------------------------------------------------------
# policy checkpoints (shared header + the nn parameter blob)


def save_policy(path, policy: DiffusionPolicy) -> None:
    """Policy checkpoint: one schedule/context header line, then nn params."""
    beta = policy.schedule.beta
    header = (
        f"ddpolicy1 {policy.schedule.T} {float(beta[0])!r} {float(beta[-1])!r} "
        f"{policy.num_contexts} {policy.data_dim} {policy.version}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(encode_params(policy.spec, policy.params))


def load_policy(path) -> DiffusionPolicy:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        rest = fh.read()
    if len(header) != 7 or header[0] != "ddpolicy1":
        raise ConfigError(f"not a policy checkpoint: {path}")
    schedule = make_schedule(int(header[1]), float(header[2]), float(header[3]))
    spec, params = decode_params(rest)
    policy = make_policy(
        data_dim=int(header[5]),
        num_contexts=int(header[4]),
        schedule=schedule,
        hidden_dims=spec.hidden_dims,
        params=params,
    )
    return replace(policy, version=int(header[6]))
