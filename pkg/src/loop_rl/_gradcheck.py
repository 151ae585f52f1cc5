"""Finite-difference audit behind the gradcheck subcommand.

Checks the hand-derived network backward pass and the trajectory
log-prob gradient against central differences (h = 1e-4) on seeded
cases; per-coordinate relative error must stay below 1e-4 with an
absolute floor of 1e-8 in the denominator.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .diffusion import (
    Context,
    make_policy,
    make_schedule,
    rollout,
    trajectory_logprob_grad,
    trajectory_logprob_sum,
)
from .nn import MlpSpec, init_params, mlp_backward, mlp_forward

FD_STEP = 1e-4
TOLERANCE = 1e-4
FLOOR = 1e-8

NETWORK_CASES = (
    MlpSpec(input_dim=2, hidden_dims=(8,), output_dim=2),
    MlpSpec(input_dim=3, hidden_dims=(6, 5), output_dim=2),
    MlpSpec(input_dim=5, hidden_dims=(4,), output_dim=1),
    MlpSpec(input_dim=1, hidden_dims=(), output_dim=1),
    MlpSpec(input_dim=7, hidden_dims=(16, 8), output_dim=2),
)


def _network_case_error(spec: MlpSpec, seed: int, corrupt: bool) -> float:
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    x = rng.standard_normal(spec.input_dim)
    cot = rng.standard_normal(spec.output_dim)
    _, tape = mlp_forward(spec, params, x)
    grad, _ = mlp_backward(tape, cot)
    if corrupt:
        grad = grad.copy()
        grad[-1] = -grad[-1] if grad[-1] != 0 else 1.0
    worst = 0.0
    for j in range(spec.param_count):
        up = params.copy()
        up[j] += FD_STEP
        down = params.copy()
        down[j] -= FD_STEP
        fu = float(np.dot(mlp_forward(spec, up, x)[0], cot))
        fd = float(np.dot(mlp_forward(spec, down, x)[0], cot))
        numeric = (fu - fd) / (2 * FD_STEP)
        denom = max(abs(grad[j]), abs(numeric), FLOOR)
        worst = max(worst, abs(grad[j] - numeric) / denom)
    return worst


def _trajectory_case_error(seed: int) -> float:
    schedule = make_schedule(3, 1e-3, 0.3)
    policy = make_policy(
        data_dim=2, num_contexts=2, schedule=schedule, hidden_dims=(6,),
        rng=np.random.default_rng(seed),
    )
    traj = rollout(policy, Context(seed % 2, 2), lambda x, c: 0.0,
                   np.random.default_rng(seed + 1000))
    _, grad = trajectory_logprob_grad(policy, traj)
    worst = 0.0
    for j in range(policy.spec.param_count):
        up = policy.params.copy()
        up[j] += FD_STEP
        down = policy.params.copy()
        down[j] -= FD_STEP
        fu = trajectory_logprob_sum(replace(policy, params=up), traj)
        fd = trajectory_logprob_sum(replace(policy, params=down), traj)
        numeric = (fu - fd) / (2 * FD_STEP)
        denom = max(abs(grad[j]), abs(numeric), FLOOR)
        worst = max(worst, abs(grad[j] - numeric) / denom)
    return worst


def finite_difference_suite(corrupt: bool = False, verbose: bool = True):
    """Run all cases; returns (passed, max relative error seen)."""
    worst = 0.0
    case = 0
    for i, spec in enumerate(NETWORK_CASES):
        for seed in (2 * i, 2 * i + 1):
            err = _network_case_error(spec, seed, corrupt=corrupt and case == 0)
            case += 1
            worst = max(worst, err)
            if verbose:
                status = "ok" if err < TOLERANCE else "FAIL"
                print(f"  network {spec.layer_dims} seed={seed}: "
                      f"max rel err {err:.3g} [{status}]")
    for seed in (0, 1):
        err = _trajectory_case_error(seed)
        worst = max(worst, err)
        if verbose:
            status = "ok" if err < TOLERANCE else "FAIL"
            print(f"  trajectory log-prob seed={seed}: max rel err {err:.3g} "
                  f"[{status}]")
    return worst < TOLERANCE, worst
