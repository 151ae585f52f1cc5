"""Policy-gradient estimators for a toy 2-D denoising-diffusion policy.

The package trains a small diffusion model whose reverse chain acts as a
stochastic policy, then fine-tunes it against prompt-conditioned rewards
with five gradient estimators: REINFORCE, baseline-corrected REINFORCE,
leave-one-out REINFORCE (RLOO), a clipped importance-sampling surrogate
(PPO style) and its K-sample leave-one-out variant (LOOP).
"""

from .diffusion import (
    Context,
    DiffusionPolicy,
    NoiseSchedule,
    PretrainConfig,
    Trajectory,
    TrajectoryGroup,
    forward_noising,
    gaussian_logpdf,
    load_policy,
    make_mixture_dataset,
    make_policy,
    make_schedule,
    pretrain_ddpm,
    reverse_step,
    rollout,
    save_policy,
    trajectory_logprob_grad,
    trajectory_logprob_sum,
)
from .errors import (
    ConfigError,
    ContractError,
    LoopRlError,
    NumericError,
    RewardLookupError,
    ShapeError,
    StalenessError,
    TapeError,
)
from .estimators import (
    AdvantageRecord,
    ClipConfig,
    EstimatorKind,
    GradientEstimate,
    clip_ratio,
    importance_ratio,
    loo_baseline,
    loop_surrogate_grad,
    ppo_surrogate_grad,
    reinforce_bc_grad,
    reinforce_grad,
    rloo_grad,
)
from .nn import (
    AdamWState,
    MlpSpec,
    adamw_step,
    clip_grad_norm,
    init_adamw,
    init_params,
    load_params,
    mlp_backward,
    mlp_forward,
    save_params,
)
from .rewards import (
    RewardSpec,
    mode_distance_reward,
    quadrant_reward,
    reward_registry,
)
from .trainer import (
    MetricsRow,
    RolloutBuffer,
    TrainConfig,
    VarianceReport,
    collect_rollouts,
    compare_estimators,
    run_experiment,
    train_epoch,
    validate_policy,
    variance_probe,
)

__version__ = "0.1.0"
