"""Shared test fixtures: tiny environments and training shortcuts."""

import numpy as np

from gaitbridge.diffcore import AdamState, ParameterizedNet
from gaitbridge.policyopt import PPOConfig, RolloutBuffer, policy_act, ppo_update


def train_bandit(updates=50, horizon=128, seed=0):
    """PPO on the 1-D bandit (single state, reward -a^2). Returns the net.

    Each pull is its own terminal transition, so the value head just tracks
    the expected reward and advantages are r - V.
    """
    rng = np.random.default_rng(seed)
    net = ParameterizedNet(1, 1, (64, 64), rng)
    config = PPOConfig(horizon=horizon, minibatch=64)
    adam = AdamState(lr=config.lr)
    obs = np.zeros(1)
    for _ in range(updates):
        buffer = RolloutBuffer(horizon)
        for _ in range(horizon):
            action, _, logp, value = policy_act(net, obs, rng)
            reward = -float(action[0]) ** 2
            buffer.append(obs.copy(), action, None, logp, reward, value, True)
        ppo_update(net, buffer, config, adam, rng)
    return net


def bandit_mean_action(net):
    mu, _, _, _ = net.forward(np.zeros(1))
    return abs(float(mu[0]))
