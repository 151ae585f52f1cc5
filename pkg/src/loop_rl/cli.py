"""Command-line entry point.

Subcommands: pretrain, finetune, variance-study, gradcheck, compare.
Flags mirror config keys in kebab-case; a flat `key = value` config file
can set the same keys, with flags taking precedence over the file and
the file over built-in defaults. LOOP_RL_SEED overrides the default seed.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .diffusion import (
    load_policy,
    make_mixture_dataset,
    save_dataset,
    save_policy,
)
from .errors import ConfigError, LoopRlError, RewardLookupError
from .estimators import EstimatorKind
from .trainer import (
    TrainConfig,
    build_base_policy,
    compare_estimators,
    pretrain_ddpm,
    run_experiment,
    stream,
    validate_policy,
    variance_probe,
    write_metrics_csv,
    write_variance_csv,
)

ENV_SEED = "LOOP_RL_SEED"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_estimator(text: str) -> EstimatorKind:
    try:
        return EstimatorKind(text.strip().lower())
    except ValueError:
        raise ValueError(
            f"not an estimator: {text!r} (choose from "
            f"{', '.join(k.value for k in EstimatorKind)})"
        ) from None


def _parse_float(text: str) -> float:
    value = float(text)
    return value


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


# config key -> (parser, human-readable type); keys match TrainConfig fields.
CONFIG_KEYS = {
    "estimator": (_parse_estimator, "estimator name"),
    "k": (int, "int"),
    "epsilon": (_parse_float, "float (or inf)"),
    "epochs": (int, "int"),
    "groups_per_epoch": (int, "int"),
    "inner_epochs": (int, "int"),
    "minibatch_groups": (int, "int"),
    "seed": (int, "int"),
    "lr": (_parse_float, "float"),
    "weight_decay": (_parse_float, "float"),
    "max_grad_norm": (_parse_float, "float"),
    "reward_name": (str, "string"),
    "T": (int, "int"),
    "data_dim": (int, "int"),
    "num_contexts": (int, "int"),
    "hidden_dims": (_parse_int_list, "comma-separated ints"),
    "beta_start": (_parse_float, "float"),
    "beta_end": (_parse_float, "float"),
    "pretrain_steps": (int, "int"),
    "pretrain_batch": (int, "int"),
    "pretrain_lr": (_parse_float, "float"),
    "dataset_size": (int, "int"),
    "mixture_std": (_parse_float, "float"),
    "validation_rollouts": (int, "int"),
    "pessimistic_min": (_parse_bool, "bool"),
}

_FIELD_BY_ALIAS = {key.lower(): key for key in CONFIG_KEYS}

COMMANDS = ("pretrain", "finetune", "variance-study", "gradcheck", "compare")


@dataclass
class CliConfig:
    command: str
    train: TrainConfig
    out_dir: Path
    config_file: Path | None = None
    no_timing: bool = False
    policy_in: Path | None = None
    resamples: int = 1000
    k_values: tuple[int, ...] = (1, 2, 4, 8)
    probe_groups: int = 4
    seeds: tuple[int, ...] = (0, 1, 2)
    loop_ks: tuple[int, ...] = (2, 4)


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; case-insensitive keys."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        if key not in _FIELD_BY_ALIAS:
            raise ConfigError(
                f"{path}:{lineno}: unknown config key {key!r}; valid keys: "
                f"{', '.join(sorted(_FIELD_BY_ALIAS))}"
            )
        field_name = _FIELD_BY_ALIAS[key]
        parser, typename = CONFIG_KEYS[field_name]
        try:
            values[field_name] = parser(value.strip())
        except (ValueError, TypeError):
            raise ConfigError(
                f"{path}:{lineno}: invalid value for {key!r}: {value.strip()!r} "
                f"(expected {typename})"
            ) from None
    return values


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for key, (parse, typename) in CONFIG_KEYS.items():
        flag = "--" + key.lower().replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{key}", default=None, type=str,
                            metavar=typename.upper().replace(" ", "-"),
                            help=f"config key {key} ({typename})")
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="flat key = value config file")
    parser.add_argument("--out-dir", default="out", metavar="DIR",
                        help="artifact directory (created if absent)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loop-rl",
        description="Policy-gradient estimators on a toy diffusion policy",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("pretrain", help="pretrain the base generative model")
    _add_config_flags(p_pre)

    p_fin = sub.add_parser("finetune", help="reinforcement fine-tune one estimator")
    _add_config_flags(p_fin)
    p_fin.add_argument("--policy-in", default=None, metavar="CKPT",
                       help="start from this policy checkpoint instead of pretraining")
    p_fin.add_argument("--no-timing", action="store_true",
                       help="omit the wallclock column for byte-identical output")

    p_var = sub.add_parser("variance-study", help="gradient covariance across K")
    _add_config_flags(p_var)
    p_var.add_argument("--policy-in", default=None, metavar="CKPT")
    p_var.add_argument("--resamples", type=int, default=1000)
    p_var.add_argument("--k-values", type=str, default="1,2,4,8",
                       help="comma-separated K sweep")
    p_var.add_argument("--probe-groups", type=int, default=4,
                       help="groups per resampled buffer")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_config_flags(p_grad)

    p_cmp = sub.add_parser("compare", help="run the estimator family on shared seeds")
    _add_config_flags(p_cmp)
    p_cmp.add_argument("--seeds", type=str, default="0,1,2",
                       help="comma-separated seeds")
    p_cmp.add_argument("--loop-ks", type=str, default="2,4",
                       help="comma-separated K values for the group estimator")
    p_cmp.add_argument("--no-timing", action="store_true")

    return parser


def parse_config(argv, env=None) -> CliConfig:
    """Resolve the configuration with precedence flags > file > defaults.

    LOOP_RL_SEED (when set) replaces the built-in default seed but loses
    to both the config file and an explicit --seed flag.
    """
    env = os.environ if env is None else env
    args = _build_parser().parse_args(argv)

    merged = {}
    if env.get(ENV_SEED):
        try:
            merged["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(
                f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}"
            ) from None
    if args.config is not None:
        merged.update(parse_config_file(args.config))
    for key, (parser, typename) in CONFIG_KEYS.items():
        raw = getattr(args, f"cfg_{key}")
        if raw is None:
            continue
        try:
            merged[key] = parser(raw)
        except (ValueError, TypeError):
            raise ConfigError(
                f"invalid value for --{key.lower().replace('_', '-')}: {raw!r} "
                f"(expected {typename})"
            ) from None
    train = TrainConfig(**merged)

    cfg = CliConfig(
        command=args.command,
        train=train,
        out_dir=Path(args.out_dir),
        config_file=Path(args.config) if args.config else None,
        no_timing=bool(getattr(args, "no_timing", False)),
        policy_in=Path(args.policy_in) if getattr(args, "policy_in", None) else None,
    )
    if args.command == "variance-study":
        cfg.resamples = args.resamples
        cfg.k_values = _parse_int_list(args.k_values)
        cfg.probe_groups = args.probe_groups
    if args.command == "compare":
        cfg.seeds = _parse_int_list(args.seeds)
        cfg.loop_ks = _parse_int_list(args.loop_ks)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _resolve_policy(cfg: CliConfig):
    if cfg.policy_in is not None:
        return load_policy(cfg.policy_in)
    return build_base_policy(cfg.train)


def cmd_pretrain(cfg: CliConfig) -> int:
    from .diffusion import PretrainConfig, make_policy, make_schedule

    train = cfg.train
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dataset = make_mixture_dataset(
        train.dataset_size, stream(train.seed, 2),
        std=train.mixture_std, num_contexts=train.num_contexts,
    )
    save_dataset(cfg.out_dir / "dataset.txt", dataset)
    schedule = make_schedule(train.T, train.beta_start, train.beta_end)
    policy = make_policy(
        data_dim=train.data_dim,
        num_contexts=train.num_contexts,
        schedule=schedule,
        hidden_dims=train.hidden_dims,
        rng=stream(train.seed, 1),
    )
    pre = PretrainConfig(
        steps=train.pretrain_steps, batch_size=train.pretrain_batch,
        lr=train.pretrain_lr, weight_decay=train.weight_decay,
        max_grad_norm=train.max_grad_norm, seed=train.seed,
    )
    policy, losses = pretrain_ddpm(policy, dataset, pre)
    save_policy(cfg.out_dir / "pretrained_policy.ckpt", policy)
    with open(cfg.out_dir / "pretrain_loss.csv", "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
    val = validate_policy(policy, train, split_key=0)
    print(f"pretrained {len(losses)} steps; final loss {losses[-1]:.5f}; "
          f"validation reward {val:.3f}")
    print(f"checkpoint: {cfg.out_dir / 'pretrained_policy.ckpt'}")
    return 0


def cmd_finetune(cfg: CliConfig) -> int:
    policy = _resolve_policy(cfg)
    result = run_experiment(
        cfg.train, base_policy=policy, out_dir=cfg.out_dir,
        include_timing=not cfg.no_timing,
    )
    print(f"{cfg.train.estimator.value} k={cfg.train.k} seed={cfg.train.seed}: "
          f"validation {result.base_validation:.3f} -> {result.final_validation:.3f} "
          f"over {cfg.train.epochs} epochs")
    return 0


def cmd_variance_study(cfg: CliConfig) -> int:
    policy = _resolve_policy(cfg)
    probe_cfg = replace(cfg.train, groups_per_epoch=cfg.probe_groups)
    report = variance_probe(policy, probe_cfg, cfg.resamples, k_values=cfg.k_values)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "variance.csv"
    write_variance_csv(out, report)
    for row in report.rows:
        print(f"K={row.k}: covariance trace {row.cov_trace:.6g} "
              f"({row.resamples} resamples)")
    if report.slope_loglog is not None:
        print(f"log-log slope of trace vs K: {report.slope_loglog:.3f}")
    print(f"wrote {out}")
    return 0


def run_gradcheck(corrupt: bool = False, verbose: bool = True):
    """Finite-difference audit of the network and trajectory gradients.

    Returns (passed, max relative error). ``corrupt`` flips the sign of
    one gradient entry before checking, proving the audit catches a
    broken backward pass (test hook, not exposed as a flag).
    """
    from ._gradcheck import finite_difference_suite

    return finite_difference_suite(corrupt=corrupt, verbose=verbose)


def cmd_gradcheck(cfg: CliConfig, corrupt: bool = False) -> int:
    passed, max_err = run_gradcheck(corrupt=corrupt)
    if passed:
        print(f"gradcheck PASS: max relative error {max_err:.3g} < 1e-4")
        return 0
    print(f"gradcheck FAIL: max relative error {max_err:.3g} >= 1e-4")
    return 1


def cmd_compare(cfg: CliConfig) -> int:
    rows, summaries = compare_estimators(
        cfg.train, seeds=cfg.seeds, loop_ks=cfg.loop_ks,
        include_timing=not cfg.no_timing,
        progress=lambda msg: print(f"running {msg}", flush=True),
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = cfg.out_dir / "compare.csv"
    write_metrics_csv(metrics_path, rows, include_timing=not cfg.no_timing)
    summary_path = cfg.out_dir / "validation_summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("run_id,estimator,k,seed,base_validation,final_validation\n")
        for s in summaries:
            fh.write(
                f"{s['run_id']},{s['estimator']},{s['k']},{s['seed']},"
                f"{s['base_validation']!r},{s['final_validation']!r}\n"
            )
    print(f"wrote {metrics_path} ({len(rows)} rows) and {summary_path}")
    return 0


_DISPATCH = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "variance-study": cmd_variance_study,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv if argv is not None else sys.argv[1:])
        return _DISPATCH[cfg.command](cfg)
    except (ConfigError, RewardLookupError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except LoopRlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
