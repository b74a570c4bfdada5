"""Small continuous-action environments with known structure.

Environments follow a minimal reset/step protocol::

    state = env.reset(seed=None)
    transition = env.step(action)

Only the initial state is random (drawn from the environment's own generator,
re-seeded by ``reset(seed=...)``); dynamics are deterministic.  Actions are
clipped to ``spec.action_low``/``spec.action_high`` before use and the
returned :class:`Transition` records whether clipping happened.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ContractViolation, as_float_array, check_choice, check_positive, check_rng


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    gamma: float = 0.99
    reward_range: tuple = (-np.inf, np.inf)

    def __post_init__(self):
        low = np.broadcast_to(np.asarray(self.action_low, dtype=float), (self.action_dim,)).copy()
        high = np.broadcast_to(np.asarray(self.action_high, dtype=float), (self.action_dim,)).copy()
        if self.state_dim < 1 or self.action_dim < 1:
            raise ContractViolation("state_dim and action_dim must be positive")
        if not np.all(low < high):
            raise ContractViolation("action bounds need lo < hi in every dimension")
        if self.horizon < 0:
            raise ContractViolation("horizon must be non-negative")
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool = False
    truncated: bool = False
    clipped: bool = False

    @property
    def done(self):
        return self.terminal or self.truncated


class Env:
    """Base class handling seeding, clipping and the step counter."""

    spec: EnvSpec

    def __init__(self, seed=None):
        self._rng = check_rng(seed)
        self._state = None
        self._t = 0

    def reset(self, seed=None):
        if seed is not None:
            self._rng = check_rng(seed)
        self._t = 0
        self._state = self._initial_state(self._rng)
        return self._state.copy()

    def step(self, action):
        if self._state is None:
            raise ContractViolation("call reset() before step()")
        raw = as_float_array(action, "action").reshape(-1)
        if raw.shape != (self.spec.action_dim,):
            raise ContractViolation(f"action has shape {raw.shape}, expected ({self.spec.action_dim},)")
        act = np.clip(raw, self.spec.action_low, self.spec.action_high)
        clipped = bool(np.any(act != raw))
        state = self._state
        next_state, reward, terminal = self._dynamics(state, act)
        self._t += 1
        truncated = (not terminal) and self._t >= self.spec.horizon
        self._state = next_state
        return Transition(state.copy(), act, float(reward), next_state.copy(), bool(terminal), truncated, clipped)

    @property
    def state(self):
        return None if self._state is None else self._state.copy()

    def _initial_state(self, rng):
        raise NotImplementedError

    def _dynamics(self, state, action):
        raise NotImplementedError


BANDIT_KINDS = ("neg_quadratic", "pos_quadratic", "quartic")


def bandit_q(kind):
    """Analytic ``(Q, dQ/da)`` for the single-state bandits."""
    check_choice(kind, BANDIT_KINDS, "bandit_q")
    if kind == "neg_quadratic":
        return (lambda a: -0.5 * a**2), (lambda a: -a)
    if kind == "pos_quadratic":
        return (lambda a: 0.5 * a**2), (lambda a: a)
    return (lambda a: -(a**4) / 100.0 + a**2), (lambda a: -(a**3) / 25.0 + 2.0 * a)


class BanditEnv(Env):
    """One-step episodes from the constant state 0 with reward ``Q(a)`` summed over dimensions."""

    def __init__(self, q_kind="neg_quadratic", action_dim=1, bound=20.0, seed=None):
        super().__init__(seed)
        self.q_kind = q_kind
        self._q, self._dq = bandit_q(q_kind)
        self.spec = EnvSpec(1, action_dim, -bound, bound, horizon=1, gamma=0.99)

    def true_q(self, state, action):
        return np.sum(self._q(np.asarray(action, dtype=float)), axis=-1)

    def true_q_grad(self, state, action):
        return self._dq(np.asarray(action, dtype=float))

    def _initial_state(self, rng):
        return np.zeros(1)

    def _dynamics(self, state, action):
        return state.copy(), float(np.sum(self._q(action))), True


def riccati_fixed_point(a, b, q, r, gamma=1.0, tol=1e-12, max_iter=100000):
    """Iterate the discounted scalar Riccati recursion to its fixed point.

    Returns ``(P, K)`` with optimal control ``u = -K s`` and cost-to-go ``P s^2``.
    """
    p = q
    for _ in range(max_iter):
        gp = gamma * p
        new = q + a * a * gp - (a * b * gp) ** 2 / (r + b * b * gp)
        if abs(new - p) <= tol * max(1.0, abs(new)):
            p = new
            break
        p = new
    else:
        raise ContractViolation("Riccati recursion did not converge")
    gp = gamma * p
    return p, a * b * gp / (r + b * b * gp)


def riccati_finite_horizon(a, b, q, r, horizon, gamma=1.0):
    """Time-varying optimal gains ``K_t`` and cost-to-go ``P_t`` for t = 0..horizon (P_horizon = 0)."""
    p = np.zeros(horizon + 1)
    k = np.zeros(horizon)
    for t in range(horizon - 1, -1, -1):
        gp = gamma * p[t + 1]
        k[t] = a * b * gp / (r + b * b * gp)
        p[t] = q + a * a * gp - (a * b * gp) ** 2 / (r + b * b * gp)
    return p, k


class LQREnv(Env):
    """Scalar linear system ``s' = a s + b u`` with reward ``-(q s^2 + r u^2)``."""

    def __init__(self, a_coef=0.9, b_coef=1.0, q_cost=1.0, r_cost=1.0, horizon=50, init_scale=1.0,
                 bound=5.0, seed=None):
        super().__init__(seed)
        if not (np.isfinite(a_coef) and np.isfinite(b_coef)):
            raise ContractViolation("LQR coefficients must be finite")
        check_positive(q_cost, "q_cost", strict=False)
        check_positive(r_cost, "r_cost")
        check_positive(init_scale, "init_scale", strict=False)
        if b_coef == 0 and abs(a_coef) >= 1:
            raise ContractViolation("system is not stabilisable (b=0 and |a|>=1)")
        self.a_coef, self.b_coef, self.q_cost, self.r_cost = a_coef, b_coef, q_cost, r_cost
        self.init_scale = init_scale
        self.spec = EnvSpec(1, 1, -bound, bound, horizon=horizon, gamma=0.99)

    def optimal_gains(self, gamma=1.0):
        return riccati_finite_horizon(self.a_coef, self.b_coef, self.q_cost, self.r_cost,
                                      self.spec.horizon, gamma)

    def optimal_return(self, s0):
        """Undiscounted optimal return from ``s0`` over the full horizon (unclipped controls)."""
        p, _ = self.optimal_gains()
        return -p[0] * float(np.asarray(s0).reshape(-1)[0]) ** 2

    def _initial_state(self, rng):
        return np.array([rng.uniform(-self.init_scale, self.init_scale)])

    def _dynamics(self, state, action):
        s, u = state[0], action[0]
        reward = -(self.q_cost * s * s + self.r_cost * u * u)
        return np.array([self.a_coef * s + self.b_coef * u]), reward, False


class PendulumEnv(Env):
    """Torque-limited pendulum; angle 0 is upright.

    ``theta'' = (g/l) sin(theta) + u / (m l^2)`` integrated by semi-implicit
    Euler.  Observation ``(cos theta, sin theta, theta')``; reward
    ``-(angle^2 + 0.1 theta'^2 + 0.001 u^2)`` with the angle wrapped to [-pi, pi).
    """

    def __init__(self, g=10.0, mass=1.0, length=1.0, dt=0.05, max_torque=2.0, max_speed=8.0,
                 horizon=200, seed=None):
        super().__init__(seed)
        self.g, self.mass, self.length, self.dt = g, mass, length, dt
        self.max_speed = max_speed
        self.spec = EnvSpec(3, 1, -max_torque, max_torque, horizon=horizon, gamma=0.99,
                            reward_range=(-(np.pi**2 + 0.1 * max_speed**2 + 0.001 * max_torque**2), 0.0))
        self._theta = 0.0
        self._omega = 0.0

    def set_physical_state(self, theta, omega):
        self._theta, self._omega = float(theta), float(omega)
        self._state = self._observe()
        self._t = 0
        return self._state.copy()

    @property
    def physical_state(self):
        return self._theta, self._omega

    def energy(self, theta=None, omega=None):
        theta = self._theta if theta is None else theta
        omega = self._omega if omega is None else omega
        return 0.5 * omega**2 + (self.g / self.length) * np.cos(theta)

    def _observe(self):
        return np.array([np.cos(self._theta), np.sin(self._theta), self._omega])

    def _initial_state(self, rng):
        self._theta = rng.uniform(-np.pi, np.pi)
        self._omega = rng.uniform(-1.0, 1.0)
        return self._observe()

    def _dynamics(self, state, action):
        u = float(action[0])
        angle = (self._theta + np.pi) % (2.0 * np.pi) - np.pi
        reward = -(angle**2 + 0.1 * self._omega**2 + 0.001 * u**2)
        accel = (self.g / self.length) * np.sin(self._theta) + u / (self.mass * self.length**2)
        omega = np.clip(self._omega + self.dt * accel, -self.max_speed, self.max_speed)
        self._theta = self._theta + self.dt * omega
        self._omega = omega
        return self._observe(), reward, False


def smooth_max(values, alpha):
    """Exponentially weighted average ``sum x e^{alpha x} / sum e^{alpha x}``.

    Negative ``alpha`` biases towards the smallest values (a smooth minimum).
    """
    x = as_float_array(values, "values", ndim=1)
    z = alpha * x
    w = np.exp(z - z.max())
    out = float(np.sum(x * w) / np.sum(w))
    return min(max(out, float(x.min())), float(x.max()))


class ReplicaEnv(Env):
    """Control ``count`` copies of a base environment with one concatenated action.

    Per-replica rewards are mapped to [0, 1] with ``(r - reward_min) / (reward_max - reward_min)``
    and combined with :func:`smooth_max` at ``alpha`` (negative for a smooth minimum).
    """

    def __init__(self, make_base, count, alpha=-3.0, reward_min=None, reward_max=None, seed=None):
        if count < 1:
            raise ContractViolation("replica count must be >= 1")
        super().__init__(seed)
        self.envs = [make_base() for _ in range(count)]
        base = self.envs[0].spec
        lo, hi = base.reward_range
        self.reward_min = lo if reward_min is None else reward_min
        self.reward_max = hi if reward_max is None else reward_max
        if not (np.isfinite(self.reward_min) and np.isfinite(self.reward_max)) or self.reward_max <= self.reward_min:
            raise ContractViolation("replica reward scaling needs finite reward_min < reward_max")
        self.alpha = alpha
        self.count = count
        self.spec = EnvSpec(base.state_dim * count, base.action_dim * count,
                            np.tile(base.action_low, count), np.tile(base.action_high, count),
                            horizon=base.horizon, gamma=base.gamma, reward_range=(0.0, 1.0))

    def scale_reward(self, reward):
        return float(np.clip((reward - self.reward_min) / (self.reward_max - self.reward_min), 0.0, 1.0))

    def _initial_state(self, rng):
        seeds = rng.integers(0, 2**63 - 1, size=self.count)
        return np.concatenate([env.reset(seed=int(s)) for env, s in zip(self.envs, seeds)])

    def _dynamics(self, state, action):
        parts = np.split(action, self.count)
        steps = [env.step(u) for env, u in zip(self.envs, parts)]
        reward = smooth_max(np.array([self.scale_reward(t.reward) for t in steps]), self.alpha)
        next_state = np.concatenate([t.next_state for t in steps])
        return next_state, reward, any(t.terminal for t in steps)


ENV_NAMES = ("bandit", "lqr", "pendulum")


def make_env(name, seed=None, replicas=1, replica_alpha=-3.0, **kwargs):
    """Build an environment by name; ``replicas > 1`` wraps it in :class:`ReplicaEnv`."""
    check_choice(name, ENV_NAMES, "env")
    factory = {"bandit": BanditEnv, "lqr": LQREnv, "pendulum": PendulumEnv}[name]
    if replicas > 1:
        return ReplicaEnv(lambda: factory(**kwargs), replicas, replica_alpha, seed=seed)
    return factory(seed=seed, **kwargs)
