"""Comparison arms for the bridged-locomotion experiments.

Every arm shares the bridged state machine, environment, and evaluation
protocol from `composer`; each differs from the main method in exactly one
treatment:

- reward variants: the setup policy trains on a different per-step reward;
- proximity arm: the setup reward is the gain in a learned success-proximity
  predictor, with no post-handoff reward extension;
- without-setup arm: control jumps straight from the default walker to the
  terrain specialist at detection (evaluation only);
- single-policy arm: one network trained end-to-end over the whole course;
- switch classifier: supervised predictor of "switching here will succeed",
  fit on episodes that switched at random distances.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from gaitbridge.composer import (
    AWTVParams,
    BehaviorModule,
    awtv_reward,
    evaluate_bridged,
    policy_obs,
    td_advantage,
    train_setup,
    train_target,
    ACTION_DIM,
    FLAT,
)
from gaitbridge.diffcore.net import ParameterizedNet, taped_policy_forward, \
    taped_bernoulli_logprob
from gaitbridge.diffcore.optim import AdamState, adam_step
from gaitbridge.diffcore.tape import GradientTape, sigmoid
from gaitbridge.policyopt import policy_act
from gaitbridge.terrainsim import (
    OBS_DIM,
    distance_fraction,
    next_artifact,
    observe,
)

VARIANT_TAGS = ("original", "constant", "target-torque", "target-value",
                "awtv")

CONSTANT_REWARD = 1.5
TORQUE_SCALE = 2.0


# ---- setup-reward variants -----------------------------------------------------


def _require(context, tag, *keys):
    for key in keys:
        if key not in context:
            raise ValueError(f"variant {tag!r} needs context field {key!r}")


def variant_reward(tag, context):
    """Per-step setup reward under one named variant.

    `context` carries whatever the tag consumes: env_reward, setup_action,
    target_action, advantage, v_s, and optionally params (AWTVParams).
    """
    if tag == "original":
        _require(context, tag, "env_reward")
        return float(context["env_reward"])
    if tag == "constant":
        return CONSTANT_REWARD
    if tag == "target-torque":
        _require(context, tag, "setup_action", "target_action")
        diff = np.asarray(context["setup_action"], dtype=np.float64) \
            - np.asarray(context["target_action"], dtype=np.float64)
        return float(np.exp(-TORQUE_SCALE * np.dot(diff, diff)))
    if tag == "target-value":
        _require(context, tag, "v_s")
        params = context.get("params") or AWTVParams()
        return params.beta * float(context["v_s"])
    if tag == "awtv":
        _require(context, tag, "advantage", "v_s")
        params = context.get("params") or AWTVParams()
        return awtv_reward(context["advantage"], context["v_s"], params)
    raise ValueError(f"unknown reward variant {tag!r}")


def variant_reward_fn(tag):
    """Wrap a variant as a per-step reward function for train_setup."""
    if tag not in VARIANT_TAGS:
        raise ValueError(f"unknown reward variant {tag!r}")

    def reward_fn(module, obs, obs_next, r_env, terminal, action):
        context = {"env_reward": r_env, "params": module.params}
        if tag == "target-torque":
            context["setup_action"] = action
            context["target_action"] = module.target_action(obs)
        elif tag == "target-value":
            context["v_s"] = module.target_value(obs)
        elif tag == "awtv":
            context["advantage"] = td_advantage(
                module.target_value, obs, obs_next, r_env,
                module.params.gamma, terminal=terminal)
            context["v_s"] = module.target_value(obs)
        return variant_reward(tag, context)

    return reward_fn


# ---- proximity-predictor arm ------------------------------------------------------


class ProximityPredictor:
    """Success-proximity regressor P: observation -> [0, 1].

    A small tanh net whose logistic head is fit by cross-entropy on states
    from successful (label 1) and failed (label 0) bridge attempts, each kept
    in a FIFO buffer. Raw observations go in unnormalized; the observation
    space is already bounded.
    """

    BUFFER_CAP = 50_000

    def __init__(self, rng, hidden=(32, 32), lr=1e-3, buffer_cap=None):
        cap = self.BUFFER_CAP if buffer_cap is None else int(buffer_cap)
        self.net = ParameterizedNet(OBS_DIM, ACTION_DIM, hidden, rng)
        self.adam = AdamState(lr=lr)
        self.success = deque(maxlen=cap)
        self.failure = deque(maxlen=cap)

    def predict(self, obs):
        _, _, _, logit = self.net.forward(np.asarray(obs, dtype=np.float64))
        return float(sigmoid(logit))

    def predict_batch(self, obs_batch):
        _, _, _, logits = self.net.forward(
            np.asarray(obs_batch, dtype=np.float64))
        return sigmoid(logits).reshape(-1)

    def add_episode(self, states, succeeded):
        bucket = self.success if succeeded else self.failure
        for s in states:
            bucket.append(np.asarray(s, dtype=np.float64))

    def fit(self, rng, minibatches=40, batch_size=64):
        """Balanced cross-entropy steps; silently waits for both classes."""
        if not self.success or not self.failure:
            return None
        pos = np.asarray(self.success)
        neg = np.asarray(self.failure)
        half = batch_size // 2
        losses = []
        for _ in range(minibatches):
            pi = rng.integers(0, len(pos), size=half)
            ni = rng.integers(0, len(neg), size=half)
            obs = np.concatenate([pos[pi], neg[ni]])
            labels = np.concatenate([np.ones(half), np.zeros(half)])
            loss = self._bce_step(obs, labels.reshape(-1, 1))
            losses.append(loss)
        return float(np.mean(losses))

    def _bce_step(self, obs, labels):
        tape = GradientTape()
        _, _, _, logit = taped_policy_forward(tape, self.net.params64(), obs,
                                              with_switch=True)
        logp = taped_bernoulli_logprob(tape, logit, labels)
        loss = tape.neg(tape.mean(logp))
        tape.backward(loss)
        adam_step(self.net, tape.gradients(self.net.params), self.adam)
        self.net.invalidate_cache()
        return float(loss.value)


def proximity_reward(predictor, s_t, s_next):
    """Dense shaping from predicted success proximity: P(s') - P(s)."""
    return predictor.predict(s_next) - predictor.predict(s_t)


def train_proximity_arm(module: BehaviorModule, default_net, default_norm,
                        env, config, budget, rng, *, eval_every=50,
                        eval_episodes=100, seed_tag=0, fit_every=10,
                        fit_minibatches=40):
    """Transition-policy arm: same state machine, proximity-gain reward.

    The setup policy (initialized from the walker by the caller, via
    BehaviorModule.from_default) trains on P(s') - P(s) with no post-handoff
    extension, while P itself refits every `fit_every` finished episodes on
    the accumulated success/failure states. Returns (predictor, curve).
    """
    predictor = ProximityPredictor(rng)
    episode_states = []
    episodes_done = 0

    def reward_fn(mod, obs, obs_next, r_env, terminal, action):
        episode_states.append(np.array(obs, copy=True))
        return proximity_reward(predictor, obs, obs_next)

    def on_episode_end(driver):
        nonlocal episodes_done
        if episode_states:
            predictor.add_episode(episode_states, driver.state.success)
            episode_states.clear()
        episodes_done += 1
        if episodes_done % fit_every == 0:
            predictor.fit(rng, minibatches=fit_minibatches)

    curve = train_setup(module, default_net, default_norm, env, config,
                        budget, rng, reward_fn=reward_fn, extend=False,
                        eval_every=eval_every, eval_episodes=eval_episodes,
                        n_workers=1, seed_tag=seed_tag,
                        on_episode_end=on_episode_end)
    return predictor, curve


# ---- without-setup control ---------------------------------------------------------


def run_without_setup(env, default_net, default_norm, modules, episodes, rng):
    """Hand off default -> target directly at detection; returns metrics."""
    rate, outcomes = evaluate_bridged(env, default_net, default_norm, modules,
                                      episodes, rng, without_setup=True)
    distances = [distance_fraction(env.course, o.state) for o in outcomes]
    return {
        "success": rate,
        "distance": float(np.mean(distances)) if distances else 0.0,
        "outcomes": outcomes,
    }


# ---- single end-to-end policy -------------------------------------------------------


def train_single_policy(course, budget, rng, *, config=None, eval_every=50,
                        eval_episodes=100, seed_tag=0):
    """One PPO policy over the full course from standard spawns.

    Uses the flat-walker training recipe (plain resets, 95% early stop) on
    the given course, but with the full terrain-aware observation; a final
    success rate below 50% is reported in the curve rather than raised,
    since this arm is expected to fail on artifact courses.
    """
    return train_target(FLAT, budget, rng, config=config, course=course,
                        eval_every=eval_every, eval_episodes=eval_episodes,
                        seed_tag=seed_tag, min_final=None, obs_dim=OBS_DIM)


# ---- learned switch classifier -------------------------------------------------------


@dataclass
class SwitchClassifier:
    """Binary predictor: will switching to the target policy here succeed?"""

    net: ParameterizedNet

    def predict_proba(self, obs):
        _, _, _, logit = self.net.forward(np.asarray(obs, dtype=np.float64))
        return float(sigmoid(logit))

    def predict_proba_batch(self, obs_batch):
        _, _, _, logits = self.net.forward(
            np.asarray(obs_batch, dtype=np.float64))
        return sigmoid(logits).reshape(-1)


def collect_random_switch_episodes(env, default_net, default_norm, module,
                                   episodes, rng, *, min_dist=0.1,
                                   max_dist=1.0):
    """Label switch points by outcome: walk, hand off at a random distance
    from the artifact, run the specialist (reverting to the walker once the
    artifact is behind), and record (observation at switch, success).
    """
    course = env.course
    obs_out, labels = [], []
    for _ in range(episodes):
        cut = float(rng.uniform(min_dist, max_dist))
        state = env.reset(rng)
        art = next_artifact(course, state.x)
        while not state.done and art.start - state.x > cut:
            obs_n = default_norm.normalize(
                policy_obs(default_net, observe(course, state)))
            action, _, _, _ = policy_act(default_net, obs_n, rng,
                                         deterministic=True)
            env.step(state, action)
        if state.done:
            continue
        obs_out.append(observe(course, state))
        on_target = True
        while not state.done:
            if on_target and state.x > art.end and state.contact:
                on_target = False
            obs = observe(course, state)
            if on_target:
                obs_n = module.target_norm.normalize(obs)
                action, _, _, _ = policy_act(module.target_net, obs_n, rng,
                                             deterministic=True)
            else:
                obs_n = default_norm.normalize(policy_obs(default_net, obs))
                action, _, _, _ = policy_act(default_net, obs_n, rng,
                                             deterministic=True)
            env.step(state, action)
        labels.append(1.0 if state.success else 0.0)
    return np.asarray(obs_out), np.asarray(labels)


def train_switch_classifier(observations, labels, rng, *, hidden=(16,),
                            epochs=300, lr=0.01, batch_size=64):
    """Supervised fit of the switch-suitability classifier.

    Raises ValueError on single-class data; the evaluation arm switches when
    the predicted probability clears 0.5.
    """
    observations = np.asarray(observations, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if observations.ndim != 2 or len(observations) != len(labels):
        raise ValueError("observations and labels must align")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("switch-classifier data holds a single class; "
                         "need both successful and failed switches")

    net = ParameterizedNet(observations.shape[1], ACTION_DIM, hidden, rng)
    adam = AdamState(lr=lr)
    n = len(labels)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            tape = GradientTape()
            _, _, _, logit = taped_policy_forward(tape, net.params64(),
                                                  observations[idx],
                                                  with_switch=True)
            logp = taped_bernoulli_logprob(tape, logit,
                                           labels[idx].reshape(-1, 1))
            loss = tape.neg(tape.mean(logp))
            tape.backward(loss)
            adam_step(net, tape.gradients(net.params), adam)
            net.invalidate_cache()
    return SwitchClassifier(net)
