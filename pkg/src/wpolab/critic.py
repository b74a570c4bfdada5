"""Action-value critics, n-step TD targets and bootstrap combiners."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ContractViolation, as_float_array, check_choice, check_positive
from .nn import MLP

COMBINER_KINDS = ("mean", "max", "softmax")


class CriticPair:
    """Online and target Q networks on ``concat(state, action)`` with hard target updates."""

    def __init__(self, online, state_dim, action_dim, update_period=100, target=None):
        if online.in_dim != state_dim + action_dim or online.out_dim != 1:
            raise ContractViolation(
                f"critic network maps {online.in_dim}->{online.out_dim}, expected {state_dim + action_dim}->1"
            )
        if int(update_period) < 1:
            raise ContractViolation("update_period must be a positive integer")
        target = online.copy() if target is None else target
        if target.sizes != online.sizes or target.activation != online.activation:
            raise ContractViolation("online and target critics must have identical shapes")
        self.online = online
        self.target = target
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.update_period = int(update_period)
        self.updates = 0

    @classmethod
    def build(cls, state_dim, action_dim, hidden=(64, 64), activation="elu", update_period=100, rng=None):
        net = MLP((state_dim + action_dim, *hidden, 1), activation, rng=rng)
        return cls(net, state_dim, action_dim, update_period)

    def _net(self, which):
        check_choice(which, ("online", "target"), "which")
        return self.online if which == "online" else self.target

    def _inputs(self, state, action):
        s = as_float_array(state, "state")
        a = as_float_array(action, "action")
        if s.shape[-1:] != (self.state_dim,) or a.shape[-1:] != (self.action_dim,):
            raise ContractViolation(
                f"state/action trailing dims {s.shape[-1:]}/{a.shape[-1:]} do not match "
                f"({self.state_dim},)/({self.action_dim},)"
            )
        lead = np.broadcast_shapes(s.shape[:-1], a.shape[:-1])
        s = np.broadcast_to(s, lead + (self.state_dim,))
        a = np.broadcast_to(a, lead + (self.action_dim,))
        return np.concatenate([s, a], axis=-1).reshape(-1, self.state_dim + self.action_dim), lead

    def q_value(self, state, action, which="online"):
        """Q(s, a); scalar for single inputs, an array over broadcast leading axes otherwise."""
        x, lead = self._inputs(state, action)
        out = self._net(which).forward(x)[:, 0].reshape(lead)
        return float(out) if out.ndim == 0 else out

    def grad_action_q(self, state, action, which="online"):
        """dQ/da by reverse mode through the critic input, restricted to the action coordinates."""
        x, lead = self._inputs(state, action)
        g = self._net(which).backward_input(x, np.ones((x.shape[0], 1)))
        return g[:, self.state_dim:].reshape(lead + (self.action_dim,))

    def q_and_grad_action(self, state, action, which="online"):
        x, lead = self._inputs(state, action)
        net = self._net(which)
        q = net.forward(x)[:, 0].reshape(lead)
        g = net.backward_input(x, np.ones((x.shape[0], 1)))[:, self.state_dim:]
        return q, g.reshape(lead + (self.action_dim,))

    def hard_update(self):
        self.target = self.online.copy()

    def step(self):
        """Count one critic update and sync the target every ``update_period`` updates.

        Returns True when a sync happened.
        """
        self.updates += 1
        if self.updates % self.update_period == 0:
            self.hard_update()
            return True
        return False


def linear_critic(state_dim, weights, bias=0.0, update_period=100):
    """Hand-set critic computing ``Q(s, a) = w . a + bias`` exactly."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    net = MLP((state_dim + w.size, 1), "identity", params=np.concatenate([np.zeros(state_dim), w, [bias]]))
    return CriticPair(net, state_dim, w.size, update_period)


class ExactCritic:
    """Critic backed by an analytic ``Q(s, a)`` and its action gradient (no learning)."""

    def __init__(self, q, dq):
        self._q = q
        self._dq = dq

    def q_value(self, state, action, which="online"):
        return np.asarray(self._q(state, action), dtype=float)

    def grad_action_q(self, state, action, which="online"):
        return np.asarray(self._dq(state, action), dtype=float)

    def q_and_grad_action(self, state, action, which="online"):
        return self.q_value(state, action), self.grad_action_q(state, action)


@dataclass(frozen=True)
class BootstrapCombiner:
    kind: str = "mean"
    temperature: float = 1.0
    samples: int = 1

    def __post_init__(self):
        check_choice(self.kind, COMBINER_KINDS, "combiner")
        if int(self.samples) < 1:
            raise ContractViolation("combiner needs samples >= 1")
        if self.kind == "softmax":
            check_positive(self.temperature, "temperature")

    def combine(self, q_values, axis=-1):
        """Reduce sampled Q-values along ``axis``."""
        q = np.asarray(q_values, dtype=float)
        if self.kind == "mean":
            return q.mean(axis=axis)
        if self.kind == "max":
            return q.max(axis=axis)
        z = q / self.temperature
        w = np.exp(z - z.max(axis=axis, keepdims=True))
        w /= w.sum(axis=axis, keepdims=True)
        return np.sum(w * q, axis=axis)


def bootstrap_value(pair, policy, state, combiner, rng):
    """Combine target-Q over ``combiner.samples`` actions drawn from ``policy(state)``.

    ``policy`` is a callable ``(state, rng, n) -> (n, action_dim)`` actions.
    """
    actions = np.asarray(policy(state, rng, combiner.samples), dtype=float)
    q = pair.q_value(np.asarray(state, dtype=float)[None, :], actions, which="target")
    return float(combiner.combine(np.atleast_1d(q)))


def td_n_target(rewards, gamma, bootstrap, episode_ended):
    """``sum_k gamma^k r_k + gamma^len(rewards) * bootstrap`` (bootstrap dropped on termination)."""
    r = np.asarray(rewards, dtype=float).reshape(-1)
    if r.size == 0:
        raise ContractViolation("n-step target needs at least one reward")
    if not 0.0 < gamma <= 1.0:
        raise ContractViolation(f"gamma must lie in (0, 1], got {gamma}")
    out = float(np.sum(gamma ** np.arange(r.size) * r))
    if not episode_ended:
        out += gamma**r.size * float(bootstrap)
    return out


def td_n_targets(rewards, lengths, gamma, bootstrap, ended):
    """Batched :func:`td_n_target` over zero-padded ``rewards`` of shape ``(B, n)``."""
    r = np.asarray(rewards, dtype=float)
    lengths = np.asarray(lengths)
    if r.ndim != 2 or r.shape[0] == 0 or np.any(lengths < 1):
        raise ContractViolation("batched n-step targets need a non-empty (B, n) reward array and lengths >= 1")
    mask = np.arange(r.shape[1])[None, :] < lengths[:, None]
    disc = gamma ** np.arange(r.shape[1])
    out = np.sum(np.where(mask, r, 0.0) * disc, axis=1)
    return out + np.where(ended, 0.0, gamma**lengths * np.asarray(bootstrap, dtype=float))


def critic_loss_and_grad(pair, states, actions, targets):
    """Mean of ``0.5 (Q(s, a) - G)^2`` and its gradient in the online parameters."""
    x, lead = pair._inputs(states, actions)
    g = as_float_array(targets, "targets").reshape(-1)
    if x.shape[0] == 0:
        raise ContractViolation("critic update needs a non-empty batch")
    if g.shape[0] != x.shape[0]:
        raise ContractViolation(f"{g.shape[0]} targets for {x.shape[0]} samples")
    q = pair.online.forward(x)[:, 0]
    err = q - g
    loss = 0.5 * float(np.mean(err**2))
    grad = pair.online.backward_params(x, (err / err.size)[:, None])
    return loss, grad


def critic_update(pair, states, actions, targets, learning_rate, apply=True):
    """One SGD step on the halved squared TD error; returns ``(delta, loss)``."""
    check_positive(learning_rate, "learning_rate", strict=False)
    loss, grad = critic_loss_and_grad(pair, states, actions, targets)
    delta = -learning_rate * grad
    if apply:
        pair.online.set_params(pair.online.params + delta)
    return delta, loss
