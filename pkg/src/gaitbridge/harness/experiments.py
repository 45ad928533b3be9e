"""Experiment orchestration: arms, metrics files, event logs, reports.

Every experiment is a pure function of its configuration: seeds derive all
generators, loops run in a fixed order, and a single-threaded rerun writes
byte-identical CSV, JSONL, and report files. Each output file carries the
canonical hash of the producing configuration on its first line (CSV) or in
its body (reports, checkpoints), so results from different settings can
never be compared silently.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..baselines import (
    VARIANT_TAGS,
    run_without_setup,
    train_proximity_arm,
    train_single_policy,
    variant_reward_fn,
)
from ..composer import (
    BehaviorModule,
    bridge_episode,
    evaluate_bridged,
    evaluate_policy,
    train_setup,
)
from ..terrainsim import (
    KINDS,
    TerrainEnv,
    distance_fraction,
    load_course,
    multi_terrain_course,
    single_artifact_course,
)
from .checkpoint import Checkpoint, load_policy, save_checkpoint
from .config import ABLATION_ARMS, ConfigError, config_hash

# Stream tags keep every random purpose on its own generator: training,
# fresh-parameter init, evaluation, per-episode course order, and the
# episodes themselves never share draws.
RNG_TRAIN = 0xA121
RNG_INIT = 0x171C
RNG_EVAL = 0xE7A7
RNG_ORDER = 0x03DE
RNG_EPISODE = 0x00EB

BASELINE_ARMS = ("setup", "proximity", "without-setup", "single-policy")
REWARD_ARMS_DEFAULT = ("awtv", "target-value")
MULTI_TERRAIN_ARMS = ("with-setup", "without-setup")
EVALUATION_ARMS = ("with-setup", "without-setup")

CSV_HEADER = "seed,method,course,success,distance_fraction,steps,switch_count"
FLAT_BUCKET = "flat"  # failure attribution past the last artifact


class MetricsError(ValueError):
    """A metrics row or file violates the published schema."""


@dataclass(frozen=True)
class MetricsRow:
    seed: int
    method: str
    course: str
    success: bool
    distance_fraction: float
    steps: int
    switch_count: int

    def validate(self):
        if not 0.0 <= self.distance_fraction <= 1.0:
            raise MetricsError(
                f"distance fraction {self.distance_fraction} outside [0, 1]")
        if self.steps < 0 or self.switch_count < 0:
            raise MetricsError("steps and switch count must be >= 0")
        for label in (self.method, self.course):
            if any(ch in label for ch in ",\n\r"):
                raise MetricsError(f"label {label!r} cannot hold , or newline")
        return self


def format_metrics_row(row: MetricsRow) -> str:
    return (f"{row.seed},{row.method},{row.course},{int(row.success)},"
            f"{row.distance_fraction:.6f},{row.steps},{row.switch_count}")


def write_metrics_csv(path, rows, cfg_hash):
    lines = [f"# config_hash={cfg_hash}", CSV_HEADER]
    lines.extend(format_metrics_row(row.validate()) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_metrics_csv(path):
    """Returns (config hash, rows); validates the schema line by line."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if len(lines) < 2 or not lines[0].startswith("# config_hash="):
        raise MetricsError(f"{path} is missing the config-hash comment line")
    cfg_hash = lines[0].split("=", 1)[1]
    if lines[1] != CSV_HEADER:
        raise MetricsError(f"{path} header {lines[1]!r} != {CSV_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split(",")
        if len(parts) != 7:
            raise MetricsError(f"{path}:{lineno}: expected 7 fields")
        try:
            row = MetricsRow(int(parts[0]), parts[1], parts[2],
                             bool(int(parts[3])), float(parts[4]),
                             int(parts[5]), int(parts[6]))
        except ValueError as exc:
            raise MetricsError(f"{path}:{lineno}: {exc}") from None
        rows.append(row.validate())
    return cfg_hash, rows


def write_events_jsonl(path, labeled_outcomes):
    """One line per switch event, labeled with its seed and episode index."""
    lines = []
    for seed, episode, outcome in labeled_outcomes:
        for event in outcome.events:
            lines.append(json.dumps(
                {"seed": seed, "episode": episode, "step": event.step,
                 "from": event.src, "to": event.dst, "x": event.x,
                 "c": event.c, "v": event.v}, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines),
                          encoding="utf-8")
    return path


def write_report(output_dir, report):
    path = Path(output_dir) / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def summarize_metrics(paths):
    """Cross-file summary; flags comparisons that mix config hashes."""
    hashes = []
    arms = {}
    for path in paths:
        cfg_hash, rows = read_metrics_csv(path)
        hashes.append(cfg_hash)
        for row in rows:
            bucket = arms.setdefault(row.method, {"episodes": 0, "successes": 0,
                                                  "distance_sum": 0.0})
            bucket["episodes"] += 1
            bucket["successes"] += int(row.success)
            bucket["distance_sum"] += row.distance_fraction
    summary = {
        "config_hashes": sorted(set(hashes)),
        "mixed_config_hashes": len(set(hashes)) > 1,
        "arms": {
            method: {
                "episodes": b["episodes"],
                "success": b["successes"] / b["episodes"],
                "distance": b["distance_sum"] / b["episodes"],
            } for method, b in sorted(arms.items())
        },
    }
    return summary


# ---- shared plumbing ---------------------------------------------------------


def _required_checkpoint(config, what, *keys):
    path = config.checkpoint_path(*keys)
    if path is None:
        raise ConfigError(
            f"{what} needs checkpoints.{'.'.join(keys)} in the config")
    return path


def _load_default(config, what):
    return load_policy(_required_checkpoint(config, what, "default"))


def _load_module(config, kind, what, default_net=None, default_norm=None):
    """Build a behavior module from configured checkpoints.

    The target checkpoint is mandatory. A missing setup checkpoint falls
    back to the walker-initialized setup policy (exactly the untrained
    starting point), which is what the no-setup arm and fresh evaluations
    want; that fallback needs the default policy to be supplied.
    """
    target_net, target_norm = load_policy(
        _required_checkpoint(config, what, kind, "target"))
    setup_path = config.checkpoint_path(kind, "setup")
    params = config.awtv_params()
    if setup_path is not None:
        setup_net, setup_norm = load_policy(setup_path)
        return BehaviorModule(kind, target_net, target_norm, setup_net,
                              setup_norm, params)
    if default_net is None:
        raise ConfigError(
            f"{what} needs checkpoints.{kind}.setup (no default policy "
            f"available to stand in)")
    return BehaviorModule.from_default(kind, target_net, target_norm,
                                       default_net, default_norm, params)


def experiment_course(config):
    """(course, course id) the experiment runs on."""
    if config.course:
        course = load_course(config.course)
        return course, Path(config.course).stem
    return single_artifact_course(config.kind), config.kind


def _chosen_arms(config, allowed, what):
    arms = config.arms or allowed
    for arm in arms:
        if arm not in allowed:
            raise ConfigError(f"{what} has no arm {arm!r} "
                              f"(choose from {', '.join(allowed)})")
    if len(set(arms)) != len(arms):
        raise ConfigError(f"{what} arms repeat: {', '.join(arms)}")
    return tuple(arms)


def _rows_from_outcomes(seed, method, course_id, course, outcomes):
    return [MetricsRow(seed, method, course_id, bool(o.state.success),
                       distance_fraction(course, o.state), o.state.steps,
                       o.switch_count) for o in outcomes]


def _arm_summary(rows, seeds):
    episodes = {seed: [r for r in rows if r.seed == seed] for seed in seeds}
    per_seed = {
        str(seed): sum(int(r.success) for r in seed_rows) / len(seed_rows)
        for seed, seed_rows in episodes.items()
    }
    return {
        "success": sum(int(r.success) for r in rows) / len(rows),
        "distance": sum(r.distance_fraction for r in rows) / len(rows),
        "per_seed": per_seed,
    }


def _ranking(arm_summaries, order):
    return sorted(order, key=lambda arm: (-arm_summaries[arm]["success"],
                                          order.index(arm)))


def _finish_report(config, experiment, course_id, arms, rows_by_arm,
                   outcomes_by_arm, extra=None):
    cfg_hash = config_hash(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for arm in arms:
        write_metrics_csv(out_dir / f"metrics_{arm}.csv", rows_by_arm[arm],
                          cfg_hash)
        write_events_jsonl(out_dir / f"events_{arm}.jsonl",
                           outcomes_by_arm[arm])
        summaries[arm] = _arm_summary(rows_by_arm[arm], config.seeds)
    report = {
        "experiment": experiment,
        "config_hash": cfg_hash,
        "course": course_id,
        "episodes_per_seed": config.episodes,
        "seeds": list(config.seeds),
        "arms": summaries,
        "ranking": _ranking(summaries, list(arms)),
        "mixed_config_hashes": False,
    }
    if extra:
        report.update(extra)
    write_report(out_dir, report)
    return report


def _save_arm_checkpoint(config, name, net, norm):
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / f"{name}.ckpt",
                    Checkpoint.of(net, norm, config_hash(config)))


# ---- experiments -------------------------------------------------------------


def run_evaluation(config):
    """Evaluate already-trained policies on a course; no training at all."""
    course, course_id = experiment_course(config)
    default_net, default_norm = _load_default(config, "evaluation")
    kinds_present = sorted({a.kind for a in course.artifacts})
    modules = {
        kind: _load_module(config, kind, "evaluation", default_net,
                           default_norm)
        for kind in kinds_present if config.checkpoint_path(kind) is not None
    }
    arms = _chosen_arms(config, EVALUATION_ARMS, "evaluation")
    rows_by_arm, outcomes_by_arm = {}, {}
    for arm in arms:
        rows, labeled = [], []
        for seed in config.seeds:
            rng = np.random.default_rng((seed, RNG_EVAL))
            _, outs = evaluate_bridged(TerrainEnv(course), default_net,
                                       default_norm, modules, config.episodes,
                                       rng, without_setup=arm == "without-setup")
            rows.extend(_rows_from_outcomes(seed, arm, course_id, course,
                                            outs))
            labeled.extend((seed, i, out) for i, out in enumerate(outs))
        rows_by_arm[arm], outcomes_by_arm[arm] = rows, labeled
    return _finish_report(config, "evaluation", course_id, arms, rows_by_arm,
                          outcomes_by_arm)


def _train_and_eval_setup_arm(config, arm, course, kind, default_net,
                              default_norm, target_net, target_norm, seed, *,
                              reward_fn=None, extend=True, fresh=False):
    """One (arm, seed) cell: build, train, evaluate, checkpoint."""
    params = config.awtv_params()
    if fresh:
        module = BehaviorModule.fresh(kind, target_net, target_norm,
                                      np.random.default_rng((seed, RNG_INIT)),
                                      params=params)
    else:
        module = BehaviorModule.from_default(kind, target_net, target_norm,
                                             default_net, default_norm,
                                             params=params)
    kwargs = {} if reward_fn is None else {"reward_fn": reward_fn}
    train_setup(module, default_net, default_norm, TerrainEnv(course),
                config.ppo_config(), config.budgets["setup"],
                np.random.default_rng((seed, RNG_TRAIN)), extend=extend,
                eval_every=0, eval_episodes=20, seed_tag=seed, **kwargs)
    _, outs = evaluate_bridged(TerrainEnv(course), default_net, default_norm,
                               {kind: module}, config.episodes,
                               np.random.default_rng((seed, RNG_EVAL)))
    _save_arm_checkpoint(config, f"setup_{arm}_seed{seed}",
                         module.setup_net, module.setup_norm)
    return outs


def run_ablation(config):
    """Train the full, no-init, and no-extended setup arms; rank them."""
    course, course_id = experiment_course(config)
    kind = config.kind
    default_net, default_norm = _load_default(config, "ablation")
    target_net, target_norm = load_policy(
        _required_checkpoint(config, "ablation", kind, "target"))
    arms = _chosen_arms(config, ABLATION_ARMS, "ablation")
    rows_by_arm, outcomes_by_arm = {}, {}
    for arm in arms:
        rows, labeled = [], []
        for seed in config.seeds:
            outs = _train_and_eval_setup_arm(
                config, arm, course, kind, default_net, default_norm,
                target_net, target_norm, seed,
                extend=arm != "no-extended", fresh=arm == "no-init")
            rows.extend(_rows_from_outcomes(seed, arm, course_id, course,
                                            outs))
            labeled.extend((seed, i, out) for i, out in enumerate(outs))
        rows_by_arm[arm], outcomes_by_arm[arm] = rows, labeled
    return _finish_report(config, "ablation", course_id, arms, rows_by_arm,
                          outcomes_by_arm)


def run_reward_comparison(config):
    """Train one setup arm per shaped-reward variant at equal budget."""
    course, course_id = experiment_course(config)
    kind = config.kind
    default_net, default_norm = _load_default(config, "reward comparison")
    target_net, target_norm = load_policy(
        _required_checkpoint(config, "reward comparison", kind, "target"))
    if config.arms:
        arms = _chosen_arms(config, VARIANT_TAGS, "reward comparison")
    else:
        arms = REWARD_ARMS_DEFAULT
    rows_by_arm, outcomes_by_arm = {}, {}
    for arm in arms:
        rows, labeled = [], []
        for seed in config.seeds:
            outs = _train_and_eval_setup_arm(
                config, arm, course, kind, default_net, default_norm,
                target_net, target_norm, seed,
                reward_fn=variant_reward_fn(arm))
            rows.extend(_rows_from_outcomes(seed, arm, course_id, course,
                                            outs))
            labeled.extend((seed, i, out) for i, out in enumerate(outs))
        rows_by_arm[arm], outcomes_by_arm[arm] = rows, labeled
    return _finish_report(config, "reward-comparison", course_id, arms,
                          rows_by_arm, outcomes_by_arm)


def run_baseline_comparison(config):
    """Setup policy against the no-setup, proximity, and single-policy arms.

    Library-level companion to the ablation: same protocol, but the
    comparison set spans methods rather than feature removals. Not exposed
    as its own CLI subcommand.
    """
    course, course_id = experiment_course(config)
    kind = config.kind
    default_net, default_norm = _load_default(config, "baseline comparison")
    target_net, target_norm = load_policy(
        _required_checkpoint(config, "baseline comparison", kind, "target"))
    arms = _chosen_arms(config, BASELINE_ARMS, "baseline comparison")
    params = config.awtv_params()
    rows_by_arm, outcomes_by_arm = {}, {}
    for arm in arms:
        rows, labeled = [], []
        for seed in config.seeds:
            eval_rng = np.random.default_rng((seed, RNG_EVAL))
            if arm == "setup":
                outs = _train_and_eval_setup_arm(
                    config, arm, course, kind, default_net, default_norm,
                    target_net, target_norm, seed)
            elif arm == "proximity":
                module = BehaviorModule.from_default(
                    kind, target_net, target_norm, default_net, default_norm,
                    params=params)
                train_proximity_arm(
                    module, default_net, default_norm, TerrainEnv(course),
                    config.ppo_config(), config.budgets["setup"],
                    np.random.default_rng((seed, RNG_TRAIN)),
                    eval_every=0, eval_episodes=20, seed_tag=seed)
                _, outs = evaluate_bridged(
                    TerrainEnv(course), default_net, default_norm,
                    {kind: module}, config.episodes, eval_rng)
                _save_arm_checkpoint(config, f"setup_{arm}_seed{seed}",
                                     module.setup_net, module.setup_norm)
            elif arm == "without-setup":
                module = BehaviorModule.from_default(
                    kind, target_net, target_norm, default_net, default_norm,
                    params=params)
                res = run_without_setup(TerrainEnv(course), default_net,
                                        default_norm, {kind: module},
                                        config.episodes, eval_rng)
                outs = res["outcomes"]
            else:  # single-policy
                net, norm, _ = train_single_policy(
                    course, config.budgets["setup"],
                    np.random.default_rng((seed, RNG_TRAIN)),
                    config=config.ppo_config(), eval_every=0,
                    eval_episodes=20, seed_tag=seed)
                _, states = evaluate_policy(TerrainEnv(course), net, norm,
                                            config.episodes, eval_rng)
                _save_arm_checkpoint(config, f"single_policy_seed{seed}",
                                     net, norm)
                rows.extend(
                    MetricsRow(seed, arm, course_id, bool(s.success),
                               distance_fraction(course, s), s.steps, 0)
                    for s in states)
                continue
            rows.extend(_rows_from_outcomes(seed, arm, course_id, course,
                                            outs))
            labeled.extend((seed, i, out) for i, out in enumerate(outs))
        rows_by_arm[arm], outcomes_by_arm[arm] = rows, labeled
    return _finish_report(config, "baseline-comparison", course_id, arms,
                          rows_by_arm, outcomes_by_arm)


def failure_terrain(course, state):
    """Terrain kind an unsuccessful episode is attributed to.

    The episode failed somewhere between artifacts it had cleared and the
    goal; charge the first artifact not yet fully behind the runner, or the
    flat bucket when everything was cleared and the runner still ran out of
    time. Successful episodes attribute to nothing.
    """
    if state.success:
        return None
    for artifact in course.artifacts:
        if state.x < artifact.end:
            return artifact.kind
    return FLAT_BUCKET


def run_multi_terrain(config):
    """Shuffled all-kind sequences, with and without the setup phase."""
    for kind in KINDS:
        for role in ("target", "setup"):
            _required_checkpoint(config, "multi-terrain", kind, role)
    default_net, default_norm = _load_default(config, "multi-terrain")
    modules = {kind: _load_module(config, kind, "multi-terrain", default_net,
                                  default_norm)
               for kind in KINDS}
    arms = _chosen_arms(config, MULTI_TERRAIN_ARMS, "multi-terrain")
    rows_by_arm = {arm: [] for arm in arms}
    outcomes_by_arm = {arm: [] for arm in arms}
    failures = {arm: {kind: 0 for kind in KINDS + (FLAT_BUCKET,)}
                for arm in arms}
    for seed in config.seeds:
        for episode in range(config.episodes):
            order_rng = np.random.default_rng((seed, episode, RNG_ORDER))
            order = tuple(KINDS[i]
                          for i in order_rng.permutation(len(KINDS)))
            course = multi_terrain_course(order)
            course_id = "-".join(order)
            for arm in arms:
                episode_rng = np.random.default_rng(
                    (seed, episode, RNG_EPISODE))
                out = bridge_episode(
                    TerrainEnv(course), default_net, default_norm, modules,
                    episode_rng, without_setup=arm == "without-setup")
                rows_by_arm[arm].extend(_rows_from_outcomes(
                    seed, arm, course_id, course, [out]))
                outcomes_by_arm[arm].append((seed, episode, out))
                failed_at = failure_terrain(course, out.state)
                if failed_at is not None:
                    failures[arm][failed_at] += 1
    extra = {"failure_counts": failures}
    return _finish_report(config, "multi-terrain", "shuffled-all-kinds",
                          arms, rows_by_arm, outcomes_by_arm, extra=extra)
