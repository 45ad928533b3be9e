"""Dense policy/value networks over the gradient tape.

One architecture serves every policy in the suite: a tanh MLP trunk, a linear
action-mean head, a state-independent log-std vector, a scalar value head, and
a scalar switch-logit head. Policies that never use the switch mechanism simply
leave the switch head untouched (its gradients stay exactly zero), which keeps
"initialize one policy from another" a straight bit-copy of every array.

Parameters are stored float32 (the checkpoint payload format); all math runs on
float64 copies cached per net and refreshed after each optimizer step.
"""

from __future__ import annotations

import math

import numpy as np

from gaitbridge.diffcore.tape import GradientTape, Var

LOG_2PI = math.log(2.0 * math.pi)

LOG_STD_INIT = -0.5
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
SWITCH_BIAS_INIT = -2.0


class ParameterizedNet:
    """MLP with named float32 parameter arrays.

    Layout for hidden=(h0, h1, ...): fc{i}.w (fan_in, h_i), fc{i}.b (h_i,),
    then mu.w/mu.b, log_std, value.w/value.b, switch.w/switch.b.
    """

    def __init__(self, obs_dim, action_dim, hidden=(64, 64), rng=None):
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(int(h) for h in hidden)
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = {}
        fan_in = self.obs_dim
        for i, width in enumerate(self.hidden):
            self.params[f"fc{i}.w"] = self._init_weight(rng, fan_in, width)
            self.params[f"fc{i}.b"] = np.zeros(width, dtype=np.float32)
            fan_in = width
        self.params["mu.w"] = self._init_weight(rng, fan_in, self.action_dim)
        self.params["mu.b"] = np.zeros(self.action_dim, dtype=np.float32)
        self.params["log_std"] = np.full(self.action_dim, LOG_STD_INIT, dtype=np.float32)
        self.params["value.w"] = self._init_weight(rng, fan_in, 1)
        self.params["value.b"] = np.zeros(1, dtype=np.float32)
        self.params["switch.w"] = self._init_weight(rng, fan_in, 1)
        self.params["switch.b"] = np.full(1, SWITCH_BIAS_INIT, dtype=np.float32)
        self._p64 = None
        self._derived = None

    @staticmethod
    def _init_weight(rng, fan_in, fan_out):
        w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
        return w.astype(np.float32)

    @classmethod
    def from_params(cls, params):
        """Rebuild a net from a named-array dict (architecture is implicit)."""
        hidden = []
        i = 0
        while f"fc{i}.w" in params:
            hidden.append(params[f"fc{i}.w"].shape[1])
            i += 1
        if not hidden:
            raise ValueError("parameter dict has no fc0.w layer")
        net = cls.__new__(cls)
        net.obs_dim = params["fc0.w"].shape[0]
        net.action_dim = params["mu.w"].shape[1]
        net.hidden = tuple(hidden)
        net.params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
        net._p64 = None
        net._derived = None
        return net

    def copy(self):
        return ParameterizedNet.from_params(self.params)

    def invalidate_cache(self):
        self._p64 = None
        self._derived = None

    def params64(self):
        if self._p64 is None:
            self._p64 = {k: v.astype(np.float64) for k, v in self.params.items()}
        return self._p64

    def derived64(self):
        """Hot-path cache: std vector, summed log-std, flattened head weights."""
        if self._derived is None:
            p = self.params64()
            self._derived = {
                "std": np.exp(p["log_std"]),
                "log_std_sum": float(p["log_std"].sum()),
                "value_w": p["value.w"][:, 0].copy(),
                "value_b": float(p["value.b"][0]),
                "switch_w": p["switch.w"][:, 0].copy(),
                "switch_b": float(p["switch.b"][0]),
            }
        return self._derived

    def clamp_log_std(self):
        np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX, out=self.params["log_std"])
        self.invalidate_cache()

    def _trunk(self, p, obs):
        h = obs @ p["fc0.w"]
        h += p["fc0.b"]
        np.tanh(h, out=h)
        for i in range(1, len(self.hidden)):
            h2 = h @ p[f"fc{i}.w"]
            h2 += p[f"fc{i}.b"]
            np.tanh(h2, out=h2)
            h = h2
        return h

    def forward(self, obs):
        """Fast inference pass, no tape.

        obs (obs_dim,) -> (mu (A,), log_std (A,), value float, switch_logit float)
        obs (B, obs_dim) -> batched arrays with value/switch of shape (B,).
        """
        p = self.params64()
        h = self._trunk(p, obs)
        mu = h @ p["mu.w"]
        mu += p["mu.b"]
        if obs.ndim == 1:
            d = self.derived64()
            value = float(h @ d["value_w"]) + d["value_b"]
            switch = float(h @ d["switch_w"]) + d["switch_b"]
            return mu, p["log_std"], value, switch
        value = h @ p["value.w"] + p["value.b"]
        switch = h @ p["switch.w"] + p["switch.b"]
        return mu, p["log_std"], value[:, 0], switch[:, 0]

    def value_of(self, obs):
        p = self.params64()
        h = self._trunk(p, obs)
        if obs.ndim == 1:
            d = self.derived64()
            return float(h @ d["value_w"]) + d["value_b"]
        return (h @ p["value.w"] + p["value.b"])[:, 0]


def gaussian_logprob(mean, log_std, action):
    """Joint log-density of a diagonal Gaussian at `action` (float64 scalar)."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    z = (action - mean) * np.exp(-log_std)
    return float(-0.5 * np.sum(z * z) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI)


def taped_policy_forward(tape: GradientTape, params64, obs_batch, with_switch=True):
    """Differentiable pass over a batch. Returns (mu, log_std, value, switch) Vars.

    mu is (B, A); log_std is (A,); value and switch are (B, 1). With
    with_switch=False the switch head stays off the tape (its gradient is an
    exact zero) and None is returned in its place.
    """
    watched = {name: tape.watch(name, arr) for name, arr in params64.items()}
    h = obs_batch
    i = 0
    while f"fc{i}.w" in params64:
        h = tape.tanh(tape.add(tape.matmul(h, watched[f"fc{i}.w"]), watched[f"fc{i}.b"]))
        i += 1
    mu = tape.add(tape.matmul(h, watched["mu.w"]), watched["mu.b"])
    value = tape.add(tape.matmul(h, watched["value.w"]), watched["value.b"])
    switch = None
    if with_switch:
        switch = tape.add(tape.matmul(h, watched["switch.w"]), watched["switch.b"])
    return mu, watched["log_std"], value, switch


def taped_gaussian_logprob(tape: GradientTape, mu, log_std, actions):
    """Per-sample Gaussian log-prob as a (B, 1) Var. `actions` is a constant."""
    diff = tape.sub(actions, mu)
    inv_var = tape.exp(tape.mul(log_std, -2.0))
    sq = tape.sum(tape.mul(tape.mul(diff, diff), inv_var), axis=1, keepdims=True)
    ls_sum = tape.sum(log_std)
    logp = tape.sub(tape.mul(sq, -0.5), ls_sum)
    return tape.add(logp, -0.5 * actions.shape[1] * LOG_2PI)


def taped_bernoulli_logprob(tape: GradientTape, logit, bits):
    """Per-sample Bernoulli log-prob of observed bits as a (B, 1) Var.

    log p(bit=1) = -softplus(-z), log p(bit=0) = -softplus(z).
    """
    neg_sign = 1.0 - 2.0 * np.asarray(bits, dtype=np.float64)
    return tape.neg(tape.softplus(tape.mul(logit, neg_sign)))


def numeric_gradient(loss_fn, params64, h=1e-5):
    """Central finite differences of loss_fn over every entry of every array.

    loss_fn takes the params64 dict and returns a python float. The dict is
    perturbed in place and restored, so loss_fn must read it fresh on each call.
    """
    grads = {}
    for name, arr in params64.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(params64)
            flat[i] = orig - h
            lm = loss_fn(params64)
            flat[i] = orig
            gf[i] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads
