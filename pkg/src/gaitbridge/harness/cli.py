"""Command-line front end.

Subcommands: train-target, train-setup, evaluate, ablate, reward-compare,
multi-terrain. Exit codes: 0 success; 2 bad flags or configuration
(argparse errors included); 3 a training run ended below its success bar;
4 a checkpoint file could not be read as a checkpoint.
"""

import argparse
import dataclasses
import sys

import numpy as np

from ..baselines import VARIANT_TAGS, variant_reward_fn
from ..composer import (
    FLAT,
    BehaviorModule,
    TrainingFailure,
    course_for_kind,
    train_setup,
    train_target,
)
from ..policyopt import PPOConfig
from ..terrainsim import KINDS, CourseError, TerrainEnv, load_course
from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    load_policy,
    save_checkpoint,
)
from .config import (
    AWTVParams,
    ConfigError,
    config_from_dict,
    load_config,
    settings_hash,
)
from .experiments import (
    run_ablation,
    run_evaluation,
    run_multi_terrain,
    run_reward_comparison,
)

_PPO_INT_KEYS = ("epochs", "minibatch", "horizon")
_PPO_KEYS = tuple(f.name for f in dataclasses.fields(PPOConfig))
_AWTV_KEYS = tuple(f.name for f in dataclasses.fields(AWTVParams))


def _parse_overrides(pairs, allowed, int_keys, what):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"{what} override {pair!r} is not key=value")
        if key not in allowed:
            raise ConfigError(f"unknown {what} key {key!r} "
                              f"(allowed: {', '.join(allowed)})")
        try:
            out[key] = int(value) if key in int_keys else float(value)
        except ValueError:
            raise ConfigError(
                f"{what} override {key}={value!r} is not a number") from None
    return out


def _ppo_overrides(args):
    return _parse_overrides(getattr(args, "ppo", None), _PPO_KEYS,
                            _PPO_INT_KEYS, "ppo")


def _awtv_overrides(args):
    return _parse_overrides(getattr(args, "awtv", None), _AWTV_KEYS, (),
                            "awtv")


def _training_course(args):
    if args.course:
        return load_course(args.course)
    return None


def _print_report(report):
    print(f"experiment: {report['experiment']}  course: {report['course']}")
    print(f"config hash: {report['config_hash']}")
    for arm in report["ranking"]:
        summary = report["arms"][arm]
        print(f"  {arm}: success {summary['success']:.3f}  "
              f"distance {summary['distance']:.3f}")


# ---- training subcommands ------------------------------------------------------


def _cmd_train_target(args):
    ppo = _ppo_overrides(args)
    course = _training_course(args)
    run_settings = {
        "command": "train-target", "kind": args.kind, "budget": args.budget,
        "seed": args.seed, "course": args.course or "",
        "stop_at": args.stop_at, "min_final": args.min_final,
        "ppo": ppo,
    }
    config = PPOConfig(**ppo)
    kwargs = {}
    if args.min_final is not None:
        kwargs["min_final"] = args.min_final
    net, norm, curve = train_target(
        args.kind, args.budget, np.random.default_rng(args.seed),
        config=config, course=course, eval_every=args.eval_every,
        eval_episodes=args.eval_episodes, stop_at=args.stop_at,
        seed_tag=args.seed, **kwargs)
    save_checkpoint(args.out, Checkpoint.of(net, norm,
                                            settings_hash(run_settings)))
    steps, updates, rate = curve[-1]
    print(f"trained {args.kind} policy: success {rate:.3f} after {steps} "
          f"steps ({updates} updates)")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_train_setup(args):
    ppo = _ppo_overrides(args)
    awtv = _awtv_overrides(args)
    course = _training_course(args)
    run_settings = {
        "command": "train-setup", "kind": args.kind, "budget": args.budget,
        "seed": args.seed, "course": args.course or "",
        "reward": args.reward, "extend": not args.no_extend,
        "fresh_init": args.fresh_init, "ppo": ppo, "awtv": awtv,
    }
    default_net, default_norm = load_policy(args.default)
    target_net, target_norm = load_policy(args.target)
    params = AWTVParams(**awtv)
    if args.fresh_init:
        module = BehaviorModule.fresh(args.kind, target_net, target_norm,
                                      np.random.default_rng((args.seed,
                                                             0x171C)),
                                      params=params)
    else:
        module = BehaviorModule.from_default(args.kind, target_net,
                                             target_norm, default_net,
                                             default_norm, params=params)
    if course is None:
        course = course_for_kind(args.kind)
    curve = train_setup(
        module, default_net, default_norm, TerrainEnv(course),
        PPOConfig(**ppo), args.budget, np.random.default_rng(args.seed),
        reward_fn=variant_reward_fn(args.reward),
        extend=not args.no_extend, eval_every=args.eval_every,
        eval_episodes=args.eval_episodes, seed_tag=args.seed)
    save_checkpoint(args.out, Checkpoint.of(module.setup_net,
                                            module.setup_norm,
                                            settings_hash(run_settings)))
    steps, updates, rate = curve[-1]
    print(f"trained {args.kind} setup policy: bridged success {rate:.3f} "
          f"after {steps} steps ({updates} updates)")
    print(f"checkpoint: {args.out}")
    return 0


# ---- evaluation and experiment subcommands ----------------------------------------


def _cmd_evaluate(args):
    if not args.course and not args.kind:
        raise ConfigError("evaluate needs --kind or --course")
    checkpoints = {"default": args.default}
    for spec in args.module or ():
        kind, sep, paths = spec.partition("=")
        setup_path, sep2, target_path = paths.partition(":")
        if not sep or not sep2 or kind not in KINDS:
            raise ConfigError(
                f"--module {spec!r} is not KIND=SETUP_CKPT:TARGET_CKPT "
                f"with KIND one of {', '.join(KINDS)}")
        checkpoints[kind] = {"setup": setup_path, "target": target_path}
    raw = {
        "experiment": "evaluation",
        "seeds": [args.seed],
        "episodes": args.episodes,
        "arms": ["without-setup"] if args.without_setup else ["with-setup"],
        "output_dir": args.out,
        "checkpoints": checkpoints,
    }
    if args.course:
        raw["course"] = args.course
    if args.kind:
        raw["kind"] = args.kind
    config = config_from_dict(raw, check_paths=False)
    report = run_evaluation(config)
    _print_report(report)
    return 0


def _experiment_config(args, expected_kind):
    config = load_config(args.config)
    if config.experiment != expected_kind:
        raise ConfigError(
            f"config {args.config} declares experiment "
            f"{config.experiment!r}; this subcommand runs "
            f"{expected_kind!r}")
    replacements = {}
    if args.episodes is not None:
        if args.episodes < 1:
            raise ConfigError("--episodes must be positive")
        replacements["episodes"] = args.episodes
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be positive")
        replacements["seeds"] = tuple(range(1, args.seeds + 1))
    if args.output_dir is not None:
        replacements["output_dir"] = args.output_dir
    if replacements:
        config = dataclasses.replace(config, **replacements)
    return config


def _cmd_ablate(args):
    report = run_ablation(_experiment_config(args, "ablation"))
    _print_report(report)
    return 0


def _cmd_reward_compare(args):
    report = run_reward_comparison(
        _experiment_config(args, "reward-comparison"))
    _print_report(report)
    return 0


def _cmd_multi_terrain(args):
    report = run_multi_terrain(_experiment_config(args, "multi-terrain"))
    _print_report(report)
    for arm, counts in sorted(report["failure_counts"].items()):
        shown = ", ".join(f"{kind}={n}" for kind, n in sorted(counts.items()))
        print(f"  failures[{arm}]: {shown}")
    return 0


# ---- parser ---------------------------------------------------------------------


def _add_training_flags(sub, *, budget_required=True):
    sub.add_argument("--budget", type=int, required=budget_required,
                     help="environment-step training budget")
    sub.add_argument("--seed", type=int, default=1)
    sub.add_argument("--out", required=True, help="checkpoint output path")
    sub.add_argument("--course", default=None,
                     help="course file (defaults to the kind's course)")
    sub.add_argument("--eval-every", type=int, default=25,
                     help="updates between curve evaluations (0: final only)")
    sub.add_argument("--eval-episodes", type=int, default=100)
    sub.add_argument("--ppo", action="append", metavar="KEY=VALUE",
                     help="override a PPO parameter (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gaitbridge",
        description="Train, bridge, and benchmark terrain policies on the "
                    "deterministic 2-D runner.")
    commands = parser.add_subparsers(dest="command", required=True)

    train_target_cmd = commands.add_parser(
        "train-target", help="train a per-terrain policy (or the flat walker)")
    train_target_cmd.add_argument("--kind", required=True,
                                  choices=(FLAT,) + KINDS)
    _add_training_flags(train_target_cmd)
    train_target_cmd.add_argument("--stop-at", type=float, default=None,
                                  help="stop early at this success rate")
    train_target_cmd.add_argument("--min-final", type=float, default=None,
                                  help="fail the run below this final success "
                                       "rate (library default 0.5; 0 keeps "
                                       "any result)")
    train_target_cmd.set_defaults(func=_cmd_train_target)

    train_setup_cmd = commands.add_parser(
        "train-setup", help="train a setup policy against a frozen target")
    train_setup_cmd.add_argument("--kind", required=True, choices=KINDS)
    train_setup_cmd.add_argument("--default", required=True,
                                 help="default-policy checkpoint")
    train_setup_cmd.add_argument("--target", required=True,
                                 help="target-policy checkpoint")
    _add_training_flags(train_setup_cmd)
    train_setup_cmd.add_argument("--reward", default="awtv",
                                 choices=VARIANT_TAGS,
                                 help="shaped-reward variant")
    train_setup_cmd.add_argument("--no-extend", action="store_true",
                                 help="do not fold post-handoff rewards")
    train_setup_cmd.add_argument("--fresh-init", action="store_true",
                                 help="random init instead of the default "
                                      "policy's weights")
    train_setup_cmd.add_argument("--awtv", action="append",
                                 metavar="KEY=VALUE",
                                 help="override a shaped-reward parameter")
    train_setup_cmd.set_defaults(func=_cmd_train_setup, eval_every=0,
                                 eval_episodes=50)

    evaluate_cmd = commands.add_parser(
        "evaluate", help="run bridged evaluation episodes from checkpoints")
    evaluate_cmd.add_argument("--default", required=True,
                              help="default-policy checkpoint")
    evaluate_cmd.add_argument("--module", action="append",
                              metavar="KIND=SETUP_CKPT:TARGET_CKPT",
                              help="behavior module checkpoints (repeatable)")
    evaluate_cmd.add_argument("--kind", choices=KINDS, default=None,
                              help="single-artifact course to evaluate on")
    evaluate_cmd.add_argument("--course", default=None,
                              help="course file to evaluate on")
    evaluate_cmd.add_argument("--episodes", type=int, default=200)
    evaluate_cmd.add_argument("--seed", type=int, default=1)
    evaluate_cmd.add_argument("--out", required=True,
                              help="output directory for metrics and logs")
    evaluate_cmd.add_argument("--without-setup", action="store_true",
                              help="hand straight to the target policy")
    evaluate_cmd.set_defaults(func=_cmd_evaluate)

    for name, kind, func in (
            ("ablate", "ablation", _cmd_ablate),
            ("reward-compare", "reward-comparison", _cmd_reward_compare),
            ("multi-terrain", "multi-terrain", _cmd_multi_terrain)):
        sub = commands.add_parser(
            name, help=f"run the {kind} experiment from a config file")
        sub.add_argument("--config", required=True,
                         help=f"JSON config with experiment={kind!r}")
        sub.add_argument("--episodes", type=int, default=None,
                         help="override evaluation episodes per seed")
        sub.add_argument("--seeds", type=int, default=None,
                         help="override: use seeds 1..N")
        sub.add_argument("--output-dir", default=None)
        sub.set_defaults(func=func)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CourseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingFailure as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
