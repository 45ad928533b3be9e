"""Policy bridging: default -> setup -> target -> default switching.

A bridged episode walks with the default policy, hands control to a
per-terrain setup policy when the oracle reports an artifact ahead, lets the
setup policy's learned switch bit decide when the frozen terrain specialist
takes over, and reverts to the default policy once the artifact is behind the
runner and contact is re-established.

Setup policies train against a shaped reward: the target policy's value at the
current state, scaled down by how badly the one-step TD advantage (computed
with the target's own value function) deviates from zero. Value estimates are
only trusted where the target policy has been; a large advantage magnitude
flags an out-of-distribution state and squashes the reward. After the handoff,
each subsequent shaped reward of the episode is folded into the setup buffer's
final entry, so the setup policy is credited for what the specialist achieves
from the states it prepared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gaitbridge.diffcore import AdamState, ParameterizedNet
from gaitbridge.policyopt import (
    PPOConfig,
    RolloutBuffer,
    RunningNormalizer,
    policy_act,
    ppo_update,
)
from gaitbridge.terrainsim import (
    BLOCK,
    GAP,
    HURDLE,
    OBS_DIM,
    OBS_PROPRIO,
    TerrainEnv,
    flat_course,
    observe,
    oracle_detect,
    single_artifact_course,
)

POLICY_DEFAULT = "default"
POLICY_SETUP = "setup"
POLICY_TARGET = "target"

FLAT = "flat"  # pseudo-kind for the default walking policy

ACTION_DIM = 2
DEFAULT_HIDDEN = (64, 64)

# per-tick handoff probability a new setup policy starts from
SETUP_SWITCH_PRIOR = 0.05

# legal policy hand-offs; default->target exists only for the no-setup arm
_LEGAL_TRANSITIONS = {
    (POLICY_DEFAULT, POLICY_SETUP),
    (POLICY_SETUP, POLICY_TARGET),
    (POLICY_TARGET, POLICY_DEFAULT),
    (POLICY_DEFAULT, POLICY_TARGET),
}


class SwitchError(RuntimeError):
    """Raised on an illegal policy transition (a harness bug, not bad data)."""


class TrainingFailure(RuntimeError):
    """Training budget exhausted below the minimum success bar."""

    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve


@dataclass(frozen=True)
class AWTVParams:
    """Scaling constants of the advantage-weighted target-value reward."""

    alpha: float = 0.15
    beta: float = 0.01
    gamma: float = 0.99

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")


def td_advantage(value_fn, s_t, s_next, r_t, gamma, terminal=False):
    """One-step TD advantage r + gamma*V(s') - V(s) under a frozen value fn.

    `terminal` zeroes the bootstrap for transitions that end the episode.
    """
    v_s = float(value_fn(s_t))
    v_next = 0.0 if terminal else float(value_fn(s_next))
    r_t = float(r_t)
    if not (np.isfinite(v_s) and np.isfinite(v_next) and np.isfinite(r_t)):
        raise ValueError("td_advantage needs finite reward and values")
    return r_t + gamma * v_next - v_s


def awtv_reward(advantage, v_s, params: AWTVParams):
    """(1 - min(alpha*A^2, 1)) * beta * V(s): value, discounted by surprise."""
    weight = 1.0 - min(params.alpha * advantage * advantage, 1.0)
    return weight * params.beta * v_s


def extend_reward(buffer: RolloutBuffer, r_hat):
    """Fold a post-handoff reward into the buffer's final entry."""
    buffer.extend_last_reward(float(r_hat))
    return buffer


@dataclass
class SwitchEvent:
    step: int
    src: str
    dst: str
    x: float
    c: float
    v: float


class SwitchState:
    """Which policy acts, the detection latch, and the transition log."""

    def __init__(self):
        self.active = POLICY_DEFAULT
        self.latched = False
        self.artifact = None
        self.events = []

    def transition(self, dst, step, runner):
        if (self.active, dst) not in _LEGAL_TRANSITIONS:
            raise SwitchError(f"illegal transition {self.active} -> {dst}")
        self.events.append(SwitchEvent(step, self.active, dst,
                                       runner.x, runner.c, runner.v))
        self.active = dst


def tau_theta_reached(state, artifact):
    """Target-phase termination: artifact behind the runner, contact restored."""
    return state.x > artifact.end and state.contact


def select_policy(switch: SwitchState, detected, tau_phi, tau_theta,
                  step=0, runner=None, without_setup=False):
    """Apply at most one legal transition for this tick's flags.

    `detected` is the artifact reported by the oracle (or None). Termination
    flags are ignored unless their policy is the active one.
    """
    if switch.active == POLICY_DEFAULT and detected is not None:
        switch.latched = True
        switch.artifact = detected
        switch.transition(POLICY_TARGET if without_setup else POLICY_SETUP,
                          step, runner)
    elif switch.active == POLICY_SETUP and tau_phi:
        switch.transition(POLICY_TARGET, step, runner)
    elif switch.active == POLICY_TARGET and tau_theta:
        switch.transition(POLICY_DEFAULT, step, runner)
        switch.latched = False
        switch.artifact = None
    return switch


def policy_obs(net, obs_raw):
    """Trim a raw observation to the policy's own input width.

    Terrain-blind policies (the default walker) read only the proprioceptive
    prefix, which makes their behavior identical on every course; full-width
    policies receive the observation unchanged.
    """
    if len(obs_raw) == net.obs_dim:
        return obs_raw
    return obs_raw[:net.obs_dim]


def prime_switch_head(net, prior=SETUP_SWITCH_PRIOR):
    """Reset a policy's handoff head to a state-independent low prior.

    Zeroed weights with a logit(prior) bias make the initial handoff a
    geometric draw (~1/prior setup ticks on average), long enough to gather
    setup experience; training then reshapes both weights and bias.
    """
    net.params["switch.w"][...] = 0.0
    net.params["switch.b"][...] = float(np.log(prior / (1.0 - prior)))
    net.invalidate_cache()
    return net


def lift_to_terrain_obs(net, norm):
    """Widen a terrain-blind policy to the full observation vector.

    The walker's weights land in the proprioceptive input rows and the new
    terrain rows start at zero, so the lifted policy behaves exactly like
    the walker until training puts weight on what it now can see. The
    normalizer keeps the walker's statistics for the shared dimensions and
    starts the terrain dimensions at an adaptive identity.
    """
    if net.obs_dim == OBS_DIM:
        return net.copy(), norm.copy()
    params = {k: v.copy() for k, v in net.params.items()}
    fc0 = np.zeros((OBS_DIM, net.params["fc0.w"].shape[1]), dtype=np.float32)
    fc0[:net.obs_dim] = net.params["fc0.w"]
    params["fc0.w"] = fc0
    lifted = ParameterizedNet.from_params(params)

    old = norm.state_arrays()
    state = {}
    for key, fill in (("count", 1.0), ("sum_hi", 0.0), ("sum_lo", 0.0),
                      ("wmean", 0.0), ("m2", 1.0)):
        arr = np.full(OBS_DIM, fill)
        arr[:net.obs_dim] = old[key]
        state[key] = arr
    return lifted, RunningNormalizer.from_state_arrays(state)


@dataclass
class BehaviorModule:
    """Frozen terrain specialist plus its trainable setup companion."""

    kind: str
    target_net: ParameterizedNet
    target_norm: RunningNormalizer
    setup_net: ParameterizedNet
    setup_norm: RunningNormalizer
    params: AWTVParams = field(default_factory=AWTVParams)

    def target_value(self, obs_raw):
        return self.target_net.value_of(self.target_norm.normalize(obs_raw))

    def target_action(self, obs_raw):
        mu, _, _, _ = self.target_net.forward(self.target_norm.normalize(obs_raw))
        return mu

    @classmethod
    def from_default(cls, kind, target_net, target_norm, default_net,
                     default_norm, params=None):
        """Setup policy starts as a behavioral copy of the default walker.

        A terrain-blind walker is widened to the full observation first
        (initially ignoring the new inputs), and the handoff head is
        re-primed: the walker never trained it, so a copied head would
        commit to some arbitrary saturated handoff rate.
        """
        setup_net, setup_norm = lift_to_terrain_obs(default_net, default_norm)
        prime_switch_head(setup_net)
        return cls(kind, target_net, target_norm,
                   setup_net, setup_norm, params or AWTVParams())

    @classmethod
    def fresh(cls, kind, target_net, target_norm, rng, params=None):
        """Ablation arm: randomly initialized setup policy and statistics.

        The handoff head still gets the shared prior so this arm differs
        from the walker-initialized one only in its action/value weights.
        """
        net = ParameterizedNet(OBS_DIM, ACTION_DIM, DEFAULT_HIDDEN, rng)
        prime_switch_head(net)
        return cls(kind, target_net, target_norm, net,
                   RunningNormalizer(OBS_DIM), params or AWTVParams())


def awtv_step_reward(module: BehaviorModule, obs, obs_next, r_env, terminal,
                     action):
    """Per-step setup reward from the frozen target value function."""
    adv = td_advantage(module.target_value, obs, obs_next, r_env,
                       module.params.gamma, terminal=terminal)
    return awtv_reward(adv, module.target_value(obs), module.params)


@dataclass
class SetupTrainer:
    """Shared optimizer state for one setup policy across rollout workers."""

    module: BehaviorModule
    config: PPOConfig
    adam: AdamState
    rng: np.random.Generator
    reward_fn: callable = awtv_step_reward
    extend: bool = True
    updates: int = 0

    def update(self, buffers, drivers):
        for buf, drv in zip(buffers, drivers):
            buf.tail_bootstrap = 0.0 if buf.dones[-1] else drv.setup_bootstrap()
        ppo_update(self.module.setup_net, buffers, self.config, self.adam,
                   self.rng)
        for buf in buffers:
            buf.clear_except_last()
        self.module.setup_net.clamp_log_std()
        self.updates += 1


@dataclass
class EpisodeOutcome:
    state: object
    events: list
    env_reward: float

    @property
    def switch_count(self):
        return len(self.events)


class EpisodeDriver:
    """Advances one bridged episode one environment tick at a time.

    Frozen policies (default, target) always act on their policy mean. The
    setup policy samples actions and its handoff bit unless deterministic=True
    forces means with the handoff probability thresholded at 0.5 (a mode for
    exact scripted-trace verification, not the evaluation protocol).
    """

    def __init__(self, env, default_net, default_norm, modules, rng, *,
                 trainer: SetupTrainer = None, buffer: RolloutBuffer = None,
                 deterministic=False, without_setup=False):
        if without_setup and trainer is not None:
            raise ValueError("the no-setup arm is evaluation-only")
        if (trainer is None) != (buffer is None):
            raise ValueError("trainer and buffer come together")
        self.env = env
        self.default_net = default_net
        self.default_norm = default_norm
        self.modules = modules
        self.rng = rng
        self.trainer = trainer
        self.buffer = buffer
        self.deterministic = deterministic
        self.without_setup = without_setup
        self.state = env.reset(rng)
        self.switch = SwitchState()
        self.env_reward = 0.0
        self.handed_off = False  # a setup->target handoff happened this episode

    @property
    def done(self):
        return self.state.done

    def active_module(self):
        return self.modules[self.switch.artifact.kind]

    def setup_bootstrap(self):
        """Setup-policy value of the state it would act on next (GAE tail)."""
        module = self.trainer.module
        obs_n = module.setup_norm.normalize(observe(self.env.course, self.state))
        return module.setup_net.value_of(obs_n)

    def _pre_act_transitions(self):
        state, switch = self.state, self.switch
        if switch.active == POLICY_TARGET:
            select_policy(switch, None, False,
                          tau_theta_reached(state, switch.artifact),
                          step=state.steps, runner=state)
        if switch.active == POLICY_DEFAULT:
            hit, art = oracle_detect(self.env.course, state)
            if hit and art.kind in self.modules:
                select_policy(switch, art, False, False, step=state.steps,
                              runner=state, without_setup=self.without_setup)

    def tick(self):
        """One environment step. Returns True when the episode finished."""
        state = self.state
        self._pre_act_transitions()
        acting = self.switch.active
        obs = observe(self.env.course, state)

        bit = None
        if acting == POLICY_DEFAULT:
            obs_n = self.default_norm.normalize(
                policy_obs(self.default_net, obs))
            action, _, _, _ = policy_act(self.default_net, obs_n, self.rng,
                                         deterministic=True)
        elif acting == POLICY_TARGET:
            module = self.active_module()
            obs_n = module.target_norm.normalize(obs)
            action, _, _, _ = policy_act(module.target_net, obs_n, self.rng,
                                         deterministic=True)
        else:
            module = self.active_module()
            if self.trainer is not None:
                obs_n = module.setup_norm.update_then_normalize(obs)
            else:
                obs_n = module.setup_norm.normalize(obs)
            action, bit, logp, value = policy_act(
                module.setup_net, obs_n, self.rng,
                deterministic=self.deterministic, with_switch=True)

        r_env, done = self.env.step(state, action)
        self.env_reward += r_env

        if acting == POLICY_SETUP:
            if self.trainer is not None:
                obs_next = observe(self.env.course, state)
                r_step = self.trainer.reward_fn(module, obs, obs_next, r_env,
                                                done, action)
                phase_done = done or bit == 1
                self.buffer.append(obs_n, action, bit, logp, r_step, value,
                                   phase_done)
            if bit == 1:
                self.handed_off = True
                if not done:
                    select_policy(self.switch, None, True, False,
                                  step=state.steps, runner=state)
        elif (self.handed_off and self.trainer is not None
              and self.trainer.extend):
            # every shaped reward from handoff to episode end folds into the
            # last stored entry, whichever policy is acting by now
            obs_next = observe(self.env.course, state)
            r_hat = self.trainer.reward_fn(self.trainer.module, obs, obs_next,
                                           r_env, done, action)
            extend_reward(self.buffer, r_hat)
        return done

    def outcome(self):
        return EpisodeOutcome(self.state, self.switch.events, self.env_reward)


def bridge_episode(env, default_net, default_norm, modules, rng, *,
                   trainer=None, buffer=None, deterministic=False,
                   without_setup=False):
    """Run one full bridged episode; with a trainer, update on full buffers."""
    driver = EpisodeDriver(env, default_net, default_norm, modules, rng,
                           trainer=trainer, buffer=buffer,
                           deterministic=deterministic,
                           without_setup=without_setup)
    while not driver.done:
        driver.tick()
        if trainer is not None and len(buffer) == buffer.capacity:
            trainer.update([buffer], [driver])
    return driver.outcome()


def evaluate_bridged(env, default_net, default_norm, modules, episodes, rng,
                     without_setup=False, deterministic=False):
    """Seeded bridged rollouts; returns (success rate, outcomes).

    The standard protocol (deterministic=False) runs the frozen default and
    target policies on their action means while the setup policy keeps acting
    stochastically: its handoff head is trained as a per-step switching rate,
    so the handoff distribution — not a thresholded point estimate — is the
    behavior being measured. Everything is reproducible from `rng`.
    deterministic=True switches the setup phase to means with the handoff
    probability thresholded at 0.5, which is only useful for verifying the
    switching mechanics with scripted saturated policies.
    """
    outcomes = []
    for _ in range(episodes):
        outcomes.append(bridge_episode(env, default_net, default_norm,
                                       modules, rng,
                                       deterministic=deterministic,
                                       without_setup=without_setup))
    rate = sum(1.0 for o in outcomes if o.state.success) / max(len(outcomes), 1)
    return rate, outcomes


# ---- initial-state distributions ---------------------------------------------


def artifact_approach_init(artifact):
    """Shaped spawn just short of the artifact: mid-approach, part-crouched."""
    def init(env, rng):
        offset = rng.uniform(0.3, 1.0)
        c = rng.uniform(0.4, 1.0)
        v = rng.uniform(0.0, 1.0)
        return env.reset_from(artifact.start - offset, v=v, c=c)
    return init


def walk_handoff_init(artifact):
    """Steady walking state one meter out: upright, full stride."""
    def init(env, rng):
        del rng
        return env.reset_from(artifact.start - 1.0, v=2.0, c=0.0)
    return init


def evaluate_policy(env, net, norm, episodes, rng, init_fn=None):
    """Deterministic single-policy rollouts from a spawn distribution."""
    states = []
    for _ in range(episodes):
        state = init_fn(env, rng) if init_fn else env.reset(rng)
        while not state.done:
            obs_n = norm.normalize(policy_obs(net, observe(env.course, state)))
            action, _, _, _ = policy_act(net, obs_n, rng, deterministic=True)
            env.step(state, action)
        states.append(state)
    rate = sum(1.0 for s in states if s.success) / max(len(states), 1)
    return rate, states


# ---- target-policy training ---------------------------------------------------


def course_for_kind(kind):
    if kind == FLAT:
        return flat_course(6.0)
    return single_artifact_course(kind)


def init_for_kind(kind, course):
    if kind == FLAT:
        return None
    return artifact_approach_init(course.artifacts[0])


def train_target(kind, budget, rng, *, config=None, course=None,
                 eval_every=50, eval_episodes=100, stop_at=None, seed_tag=0,
                 min_final=0.5, obs_dim=None):
    """PPO-train a terrain specialist; returns (net, norm, curve).

    The curve holds (steps_used, updates, success_rate) rows sampled every
    `eval_every` updates plus a final entry. Raises TrainingFailure (curve
    attached) if the budget runs out below `min_final` success; pass
    min_final=None for arms whose failure to learn is itself the result.
    """
    if kind not in (FLAT, BLOCK, GAP, HURDLE):
        raise ValueError(f"unknown terrain kind {kind!r}")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    config = config or PPOConfig()
    course = course or course_for_kind(kind)
    init_fn = init_for_kind(kind, course)
    if stop_at is None:
        stop_at = 0.95 if kind == FLAT else 0.8

    env = TerrainEnv(course)
    eval_env = TerrainEnv(course)
    if obs_dim is None:
        # the plain walker is terrain-blind; specialists see the full vector
        obs_dim = OBS_PROPRIO if kind == FLAT else OBS_DIM
    net = ParameterizedNet(obs_dim, ACTION_DIM, DEFAULT_HIDDEN, rng)
    norm = RunningNormalizer(obs_dim)
    adam = AdamState(lr=config.lr)
    buffer = RolloutBuffer(config.horizon)
    curve = []

    def run_eval(steps_used, updates):
        eval_rng = np.random.default_rng((seed_tag, updates, 0xE7A1))
        rate, _ = evaluate_policy(eval_env, net, norm, eval_episodes,
                                  eval_rng, init_fn=init_fn)
        curve.append((steps_used, updates, rate))
        return rate

    state = env.reset(rng) if init_fn is None else init_fn(env, rng)
    steps_used = 0
    updates = 0
    while steps_used < budget:
        obs = policy_obs(net, observe(course, state))
        obs_n = norm.update_then_normalize(obs)
        action, _, logp, value = policy_act(net, obs_n, rng)
        r, done = env.step(state, action)
        buffer.append(obs_n, action, None, logp, r, value, done)
        steps_used += 1
        if done:
            state = env.reset(rng) if init_fn is None else init_fn(env, rng)
        if len(buffer) == buffer.capacity:
            if buffer.dones[-1]:
                buffer.tail_bootstrap = 0.0
            else:
                buffer.tail_bootstrap = net.value_of(
                    norm.normalize(policy_obs(net, observe(course, state))))
            ppo_update(net, buffer, config, adam, rng)
            buffer.clear()
            updates += 1
            if updates % eval_every == 0:
                if run_eval(steps_used, updates) >= stop_at:
                    return net, norm, curve

    final = run_eval(steps_used, updates)
    if min_final is not None and final < min_final:
        raise TrainingFailure(
            f"{kind} specialist stalled at {final:.0%} success "
            f"after {steps_used} steps", curve)
    return net, norm, curve


def train_default(budget, rng, **kwargs):
    return train_target(FLAT, budget, rng, **kwargs)


# ---- setup-policy training -----------------------------------------------------


def train_setup(module: BehaviorModule, default_net, default_norm, env, config,
                budget, rng, *, reward_fn=awtv_step_reward, extend=True,
                eval_every=50, eval_episodes=100, n_workers=1, seed_tag=0,
                on_episode_end=None):
    """Train the module's setup policy in place; returns the training curve.

    Episodes run the full bridged state machine; only ticks where the setup
    policy acts append to its buffer, each buffer-full moment triggers a PPO
    update followed by clear-except-last, and every post-handoff shaped reward
    of an episode folds into the buffer's final entry. The budget counts every
    environment tick of every training episode (walking and target phases
    included); evaluation episodes are free. `on_episode_end(driver)` fires
    after each finished training episode, before the runner restarts.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    frozen = {name: arr.copy() for name, arr in module.target_net.params.items()}

    trainer = SetupTrainer(module, config, AdamState(lr=config.lr), rng,
                           reward_fn=reward_fn, extend=extend)
    modules = {module.kind: module}
    eval_env = TerrainEnv(env.course)
    curve = []
    last_eval_at = None

    def run_eval(steps_used):
        eval_rng = np.random.default_rng((seed_tag, trainer.updates, 0x5E70))
        rate, _ = evaluate_bridged(eval_env, default_net, default_norm,
                                   modules, eval_episodes, eval_rng)
        curve.append((steps_used, trainer.updates, rate))

    def fresh_driver(buffer=None):
        if buffer is None:
            buffer = RolloutBuffer(config.horizon)
        return EpisodeDriver(TerrainEnv(env.course), default_net, default_norm,
                             modules, rng, trainer=trainer, buffer=buffer)

    drivers = [fresh_driver() for _ in range(n_workers)]
    steps_used = 0
    while steps_used < budget:
        progressed = False
        for idx, drv in enumerate(drivers):
            if len(drv.buffer) == drv.buffer.capacity:
                continue  # paused until the joint update
            drv.tick()
            steps_used += 1
            progressed = True
            if drv.done:
                if on_episode_end is not None:
                    on_episode_end(drv)
                # buffers persist across episodes; only the runner restarts
                drivers[idx] = fresh_driver(drv.buffer)
            if steps_used >= budget:
                break
        did_update = False
        if all(len(d.buffer) == d.buffer.capacity for d in drivers):
            trainer.update([d.buffer for d in drivers], drivers)
            did_update = True
            if eval_every and trainer.updates % eval_every == 0:
                run_eval(steps_used)
                last_eval_at = trainer.updates
        if not progressed and not did_update and steps_used < budget:
            raise RuntimeError("all workers paused without an update")

    for name, arr in module.target_net.params.items():
        if not np.array_equal(arr, frozen[name]):
            raise RuntimeError("target policy drifted during setup training")
    if last_eval_at != trainer.updates or not curve:
        run_eval(steps_used)
    return curve
