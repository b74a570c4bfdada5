"""Replay-based actor-critic training with WPO and reference actor updates.

Randomness comes from one ``numpy`` Generator seeded with ``seed``.  Draw
order: actor init, critic init, then per episode one reset seed, per
environment step one action-noise draw, and per update (batch indices,
bootstrap noise, actor noise).  Evaluation episodes use fixed reset seeds
derived from ``seed`` so every evaluation sees the same initial states and
never touches the training generator.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ContractViolation, NonFiniteError, check_choice, check_positive, check_rng
from .envs import bandit_q
from .critic import BootstrapCombiner, CriticPair, ExactCritic, td_n_targets
from .nn import MLP, save_checkpoint
from .policies import SIGMA_MIN, DiagGaussian, GaussianMixture, kl_gradients, kl_mean_part, kl_std_part
from .wpo import KlConfig, Squash, UpdateReport, gaussian_head_cotangents, initial_alphas, update_alphas

ALGORITHMS = ("wpo", "classic_pg", "dpg", "svg0")
METRIC_COLUMNS = (
    "step", "episode", "eval_return_mean", "eval_return_min", "eval_return_max", "critic_loss",
    "kl_mean", "kl_std", "alpha_mean", "alpha_std", "q_grad_norm", "actor_grad_norm", "policy_sigma_mean",
)


class TrainingAborted(NonFiniteError):
    """Raised when an update produces non-finite values; ``report`` holds the diagnostics."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        check_positive(lr, "learning rate", strict=False)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def delta(self, grad):
        """Descent step for ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, size, lr):
        check_positive(lr, "learning rate", strict=False)
        self.lr = lr

    def delta(self, grad):
        return -self.lr * grad


def make_optimizer(kind, size, lr):
    check_choice(kind, ("adam", "sgd"), "optimizer")
    return Adam(size, lr) if kind == "adam" else SGD(size, lr)


class GaussianActor:
    """MLP policy head producing a diagonal Gaussian per state.

    The network emits ``(z_mean, z_std)``; ``mean = centre + half * tanh(z_mean)``
    when ``bounds`` is given (else ``z_mean``) and ``stddev = softplus(z_std) + sigma_min``.
    """

    def __init__(self, net, action_dim, bounds=None, sigma_min=SIGMA_MIN):
        if net.out_dim != 2 * action_dim:
            raise ContractViolation(f"actor network must output {2 * action_dim} values")
        self.net = net
        self.action_dim = action_dim
        self.bounds = None if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        self.sigma_min = sigma_min

    @classmethod
    def build(cls, state_dim, action_dim, hidden, activation, rng, init_mean=0.0, init_stddev=1.0,
              bounds=None, sigma_min=SIGMA_MIN):
        net = MLP((state_dim, *hidden, 2 * action_dim), activation, rng=rng)
        actor = cls(net, action_dim, bounds, sigma_min)
        if init_stddev <= sigma_min:
            raise ContractViolation("init_stddev must exceed sigma_min")
        mean0 = np.broadcast_to(np.asarray(init_mean, float), (action_dim,))
        if actor.bounds is not None:
            centre, half = actor._centre_half()
            ratio = (mean0 - centre) / half
            if np.any(np.abs(ratio) >= 1):
                raise ContractViolation("init_mean must lie strictly inside the action bounds")
            mean0 = np.arctanh(ratio)
        flat = net.params.copy()
        # small last layer so the initial policy barely depends on the state
        n_last = net.sizes[-2] * net.sizes[-1]
        flat[-2 * action_dim - n_last:-2 * action_dim] *= 0.01
        bias = flat[-2 * action_dim:]
        bias[:action_dim] = mean0
        bias[action_dim:] = softplus_inv(init_stddev - sigma_min)
        net.set_params(flat)
        return actor

    def _centre_half(self):
        lo, hi = self.bounds
        return 0.5 * (lo + hi), 0.5 * (hi - lo)

    def copy(self):
        return GaussianActor(self.net.copy(), self.action_dim, self.bounds, self.sigma_min)

    def heads(self, states):
        """``(mean, stddev, z)`` for a batch of states."""
        z = self.net.forward(states)
        zm, zs = z[..., :self.action_dim], z[..., self.action_dim:]
        if self.bounds is None:
            mean = zm
        else:
            centre, half = self._centre_half()
            mean = centre + half * np.tanh(zm)
        return mean, softplus(zs) + self.sigma_min, z

    def distribution(self, states):
        mean, std, _ = self.heads(states)
        return DiagGaussian(mean, std)

    def head_vjp(self, states, z, mean_cot, std_cot):
        """Parameter gradient of ``sum(mean_cot . mean + std_cot . stddev)`` over the batch."""
        zm, zs = z[..., :self.action_dim], z[..., self.action_dim:]
        if self.bounds is None:
            dm = mean_cot
        else:
            _, half = self._centre_half()
            dm = mean_cot * half * (1.0 - np.tanh(zm) ** 2)
        cot = np.concatenate([dm, std_cot * sigmoid(zs)], axis=-1)
        return self.net.backward_params(states, cot)

    def act(self, state, rng=None, deterministic=False):
        mean, std, _ = self.heads(np.asarray(state, dtype=float))
        if deterministic:
            return mean
        return mean + std * check_rng(rng).standard_normal(mean.shape)


@dataclass(frozen=True)
class TrajectorySegment:
    """Up to ``n`` consecutive transitions of one episode, first transition first."""

    transitions: tuple

    def __post_init__(self):
        if not self.transitions:
            raise ContractViolation("segment needs at least one transition")
        for prev, nxt in zip(self.transitions[:-1], self.transitions[1:]):
            if not np.array_equal(prev.next_state, nxt.state):
                raise ContractViolation("segment transitions do not chain")

    @property
    def state(self):
        return self.transitions[0].state

    @property
    def action(self):
        return self.transitions[0].action

    @property
    def rewards(self):
        return np.array([t.reward for t in self.transitions])

    @property
    def bootstrap_state(self):
        return self.transitions[-1].next_state

    @property
    def terminal(self):
        return self.transitions[-1].terminal

    def __len__(self):
        return len(self.transitions)


class NStepAssembler:
    """Turn a stream of transitions into n-step segments.

    A full window emits one segment per step; at episode end every remaining
    suffix is flushed so each transition starts exactly one segment.
    """

    def __init__(self, n_step):
        if n_step < 1:
            raise ContractViolation("n_step must be >= 1")
        self.n_step = n_step
        self._window = deque()

    def push(self, transition):
        self._window.append(transition)
        out = []
        if len(self._window) == self.n_step:
            out.append(TrajectorySegment(tuple(self._window)))
            self._window.popleft()
        if transition.done:
            while self._window:
                out.append(TrajectorySegment(tuple(self._window)))
                self._window.popleft()
        return out


class ReplayBuffer:
    """FIFO ring of n-step segments stored as flat arrays; uniform sampling."""

    def __init__(self, capacity, state_dim, action_dim, n_step):
        if capacity < 1:
            raise ContractViolation("replay capacity must be >= 1")
        self.capacity = int(capacity)
        self.n_step = n_step
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros((capacity, n_step))
        self.lengths = np.zeros(capacity, dtype=np.int64)
        self.boot_states = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.inserts = 0
        self.samples = 0

    def __len__(self):
        return min(self.inserts, self.capacity)

    def insert(self, segment):
        if len(segment) > self.n_step:
            raise ContractViolation(f"segment of length {len(segment)} exceeds n_step={self.n_step}")
        i = self.inserts % self.capacity
        self.states[i] = segment.state
        self.actions[i] = segment.action
        self.rewards[i] = 0.0
        self.rewards[i, :len(segment)] = segment.rewards
        self.lengths[i] = len(segment)
        self.boot_states[i] = segment.bootstrap_state
        self.terminal[i] = segment.terminal
        self.ids[i] = self.inserts
        self.inserts += 1

    def sample(self, rng, batch_size):
        if len(self) == 0:
            raise ContractViolation("cannot sample from an empty replay buffer")
        idx = rng.integers(0, len(self), size=batch_size)
        self.samples += batch_size
        return {
            "states": self.states[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
            "lengths": self.lengths[idx], "boot_states": self.boot_states[idx],
            "terminal": self.terminal[idx], "ids": self.ids[idx],
        }


def evaluate(env, policy, episodes=5, deterministic=True, seeds=None, rng=None):
    """Run ``episodes`` undiscounted episodes; returns a dict with mean/min/max return.

    ``policy(state, rng, deterministic)`` returns an action.  ``seeds`` fixes the
    reset seed of each episode.  The result also lists the visited states.
    """
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    rng = check_rng(rng)
    returns, visited = [], []
    for ep in range(episodes):
        state = env.reset(seed=None if seeds is None else int(seeds[ep]))
        total, done = 0.0, env.spec.horizon == 0
        while not done:
            visited.append(state)
            tr = env.step(policy(state, rng, deterministic))
            total += tr.reward
            state = tr.next_state
            done = tr.done
        returns.append(total)
    r = np.array(returns)
    return {"mean": float(r.mean()), "min": float(r.min()), "max": float(r.max()),
            "returns": r, "states": np.array(visited)}


def eval_seeds(seed, episodes):
    ss = np.random.SeedSequence([int(seed), 7919])
    return [int(x) for x in ss.generate_state(episodes, dtype=np.uint32)]


class WPOAgent(BaseEstimator):
    """Off-policy actor-critic with a Gaussian actor and an n-step TD critic.

    ``algorithm`` chooses the actor update: ``wpo`` (optionally Fisher-rescaled
    at the head), ``classic_pg`` (score function with a sample-mean baseline),
    ``dpg`` (gradient at the mean) or ``svg0`` (reparameterised).  The actor
    always uses replay states with fresh actions from the current policy.

    After ``fit`` the agent exposes ``metrics_`` (rows keyed by
    ``METRIC_COLUMNS``), ``history_`` (per-update diagnostics), ``actor_``,
    ``target_actor_``, ``critic_`` and ``env_steps_``.
    """

    def __init__(self, algorithm="wpo", n_step=5, batch_size=256, action_samples=30, actor_lr=3e-4,
                 critic_lr=3e-4, optimizer="adam", target_period=100, gamma=0.99, kl_mode="soft",
                 alpha_mean=0.0, alpha_std=0.0, epsilon_mean=5e-3, epsilon_std=1e-6, dual_lr=1.0,
                 squash="identity", squash_scale=1.0, rescale=True, combiner="mean", combiner_temperature=1.0,
                 bootstrap_samples=30, actor_hidden=(64, 64), critic_hidden=(64, 64), activation="elu",
                 init_mean=0.0, init_stddev=1.0, sigma_min=SIGMA_MIN, bounded_mean=True,
                 replay_capacity=100000, warmup_steps=1000, updates_per_step=1.0, total_steps=10000,
                 eval_interval=20, eval_episodes=5, exact_critic=False, seed=0):
        self.algorithm = algorithm
        self.n_step = n_step
        self.batch_size = batch_size
        self.action_samples = action_samples
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.optimizer = optimizer
        self.target_period = target_period
        self.gamma = gamma
        self.kl_mode = kl_mode
        self.alpha_mean = alpha_mean
        self.alpha_std = alpha_std
        self.epsilon_mean = epsilon_mean
        self.epsilon_std = epsilon_std
        self.dual_lr = dual_lr
        self.squash = squash
        self.squash_scale = squash_scale
        self.rescale = rescale
        self.combiner = combiner
        self.combiner_temperature = combiner_temperature
        self.bootstrap_samples = bootstrap_samples
        self.actor_hidden = actor_hidden
        self.critic_hidden = critic_hidden
        self.activation = activation
        self.init_mean = init_mean
        self.init_stddev = init_stddev
        self.sigma_min = sigma_min
        self.bounded_mean = bounded_mean
        self.replay_capacity = replay_capacity
        self.warmup_steps = warmup_steps
        self.updates_per_step = updates_per_step
        self.total_steps = total_steps
        self.eval_interval = eval_interval
        self.eval_episodes = eval_episodes
        self.exact_critic = exact_critic
        self.seed = seed

    def _validate(self):
        check_choice(self.algorithm, ALGORITHMS, "algorithm")
        for name in ("n_step", "batch_size", "action_samples", "target_period", "bootstrap_samples",
                     "replay_capacity", "eval_interval", "eval_episodes"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be a positive integer")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractViolation(f"gamma must lie in (0, 1], got {self.gamma}")
        check_positive(self.actor_lr, "actor_lr", strict=False)
        check_positive(self.critic_lr, "critic_lr", strict=False)
        check_positive(self.updates_per_step, "updates_per_step", strict=False)
        check_positive(self.total_steps, "total_steps", strict=False)
        self.kl_config_ = KlConfig(self.kl_mode, self.alpha_mean, self.alpha_std, self.epsilon_mean,
                                   self.epsilon_std, self.dual_lr)
        self.squash_ = Squash(self.squash, self.squash_scale)
        self.combiner_ = BootstrapCombiner(self.combiner, self.combiner_temperature, self.bootstrap_samples)

    def _setup(self, env):
        spec = env.spec
        rng = check_rng(self.seed)
        bounds = (spec.action_low, spec.action_high) if self.bounded_mean else None
        self.actor_ = GaussianActor.build(spec.state_dim, spec.action_dim, tuple(self.actor_hidden),
                                          self.activation, rng, self.init_mean, self.init_stddev,
                                          bounds, self.sigma_min)
        self.target_actor_ = self.actor_.copy()
        if self.exact_critic:
            if not hasattr(env, "true_q"):
                raise ContractViolation("exact_critic needs an environment exposing true_q/true_q_grad")
            self.critic_ = ExactCritic(env.true_q, env.true_q_grad)
        else:
            self.critic_ = CriticPair.build(spec.state_dim, spec.action_dim, tuple(self.critic_hidden),
                                            self.activation, self.target_period, rng)
            self.critic_opt_ = make_optimizer(self.optimizer, self.critic_.online.n_params, self.critic_lr)
        self.actor_opt_ = make_optimizer(self.optimizer, self.actor_.net.n_params, self.actor_lr)
        self.alphas_ = initial_alphas(self.kl_config_)
        self.buffer_ = ReplayBuffer(self.replay_capacity, spec.state_dim, spec.action_dim, self.n_step)
        self.updates_ = 0
        self.history_ = {k: [] for k in ("critic_loss", "kl_mean", "kl_std", "alpha_mean", "alpha_std",
                                         "alpha_mean_next", "alpha_std_next", "q_grad_norm",
                                         "q_grad_norm_raw", "actor_grad_norm", "sigma_mean", "mean_mean")}
        return rng

    # -- updates ---------------------------------------------------------

    def _critic_step(self, batch, rng):
        if self.exact_critic:
            return float("nan")
        b, ad = self.batch_size, self.actor_.action_dim
        mean_t, std_t, _ = self.target_actor_.heads(batch["boot_states"])
        noise = rng.standard_normal((b, self.bootstrap_samples, ad))
        acts = mean_t[:, None, :] + std_t[:, None, :] * noise
        q_next = self.critic_.q_value(batch["boot_states"][:, None, :], acts, which="target")
        boot = self.combiner_.combine(q_next, axis=1)
        targets = td_n_targets(batch["rewards"], batch["lengths"], self.gamma, boot, batch["terminal"])
        x = np.concatenate([batch["states"], batch["actions"]], axis=1)
        q = self.critic_.online.forward(x)[:, 0]
        err = q - targets
        loss = 0.5 * float(np.mean(err**2))
        grad = self.critic_.online.backward_params(x, (err / b)[:, None])
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingAborted("non-finite critic loss or gradient",
                                  UpdateReport(grad, float("nan"), float(np.linalg.norm(grad)),
                                               extra={"critic_loss": loss, "update": self.updates_}))
        self.critic_.online.set_params(self.critic_.online.params + self.critic_opt_.delta(grad))
        return loss

    def _actor_step(self, batch, rng):
        states = batch["states"]
        b, n, ad = states.shape[0], self.action_samples, self.actor_.action_dim
        mean, std, z = self.actor_.heads(states)
        eta = rng.standard_normal((b, n, ad))
        acts = mean[:, None, :] + std[:, None, :] * eta
        s_rep = np.broadcast_to(states[:, None, :], (b, n, states.shape[1]))
        if self.algorithm == "dpg":
            q_grad = self.critic_.grad_action_q(states, mean)
            g_raw = q_grad[:, None, :]
        else:
            q_vals, g_raw = self.critic_.q_and_grad_action(s_rep, acts)
        if not np.all(np.isfinite(g_raw)):
            norm = float(np.linalg.norm(np.nan_to_num(g_raw, nan=np.inf)))
            raise TrainingAborted(f"non-finite action-value gradient (norm={norm})",
                                  UpdateReport(np.array([]), norm, float("nan"), extra={"update": self.updates_}))
        g = self.squash_(g_raw)
        if self.algorithm == "wpo":
            mc, sc = gaussian_head_cotangents(mean[:, None, :], std[:, None, :], acts, g_raw,
                                              self.squash_, self.rescale)
        elif self.algorithm == "svg0":
            mc, sc = g * np.ones_like(eta), eta * g
        elif self.algorithm == "dpg":
            mc, sc = g, np.zeros_like(g)
        else:
            adv = (q_vals - q_vals.mean(axis=1, keepdims=True))[..., None]
            mc = adv * eta / std[:, None, :]
            sc = adv * (eta**2 - 1.0) / std[:, None, :]
        mean_cot, std_cot = mc.mean(axis=1), sc.mean(axis=1)

        # KL towards the target policy, averaged over states
        mean_bar, std_bar, _ = self.target_actor_.heads(states)
        p, q = DiagGaussian(mean_bar, std_bar), DiagGaussian(mean, std)
        kl_m = float(np.mean(kl_mean_part(p, q)))
        kl_s = float(np.mean(kl_std_part(p, q)))
        gm, gs = kl_gradients(p, q)
        a_m, a_s = self.alphas_
        mean_cot = mean_cot - a_m * gm["mean"] - a_s * gs["mean"]
        std_cot = std_cot - a_m * gm["stddev"] - a_s * gs["stddev"]

        grad = self.actor_.head_vjp(states, z, mean_cot / b, std_cot / b)
        q_norm = float(np.mean(np.linalg.norm(g, axis=-1)))
        q_norm_raw = float(np.mean(np.linalg.norm(g_raw, axis=-1)))
        report = UpdateReport(grad, q_norm, float(np.linalg.norm(grad)), kl_m, kl_s, self.alphas_,
                              {"q_grad_norm_raw": q_norm_raw, "update": self.updates_})
        if not np.all(np.isfinite(grad)):
            raise TrainingAborted("non-finite actor gradient", report)
        self.actor_.net.set_params(self.actor_.net.params - self.actor_opt_.delta(grad))
        next_alphas = update_alphas(self.alphas_, (kl_m, kl_s), self.kl_config_)
        h = self.history_
        h["kl_mean"].append(kl_m)
        h["kl_std"].append(kl_s)
        h["alpha_mean"].append(a_m)
        h["alpha_std"].append(a_s)
        h["alpha_mean_next"].append(next_alphas[0])
        h["alpha_std_next"].append(next_alphas[1])
        h["q_grad_norm"].append(q_norm)
        h["q_grad_norm_raw"].append(q_norm_raw)
        h["actor_grad_norm"].append(report.actor_grad_norm)
        h["sigma_mean"].append(float(np.mean(std)))
        h["mean_mean"].append(float(np.mean(mean)))
        self.alphas_ = next_alphas
        return report

    def update(self, rng):
        """One learner step: critic, actor, dual variables, then target sync."""
        batch = self.buffer_.sample(rng, self.batch_size)
        loss = self._critic_step(batch, rng)
        self.history_["critic_loss"].append(loss)
        report = self._actor_step(batch, rng)
        self.updates_ += 1
        if self.updates_ % self.target_period == 0:
            self.target_actor_ = self.actor_.copy()
            if not self.exact_critic:
                self.critic_.hard_update()
        return report

    # -- loop --------------------------------------------------------------

    def policy(self, state, rng=None, deterministic=True):
        return self.actor_.act(state, rng, deterministic)

    def predict(self, states):
        """Deterministic (mean) actions for a batch of states."""
        return self.actor_.heads(np.atleast_2d(np.asarray(states, dtype=float)))[0]

    def sample(self, states, rng=None):
        return self.actor_.act(np.atleast_2d(np.asarray(states, dtype=float)), check_rng(rng))

    def _metrics_row(self, env_steps, episode, eval_env, since):
        ev = evaluate(eval_env, self.policy, self.eval_episodes, True, eval_seeds(self.seed, self.eval_episodes))
        h = self.history_

        def recent(key):
            vals = h[key][since:]
            return float(np.mean(vals)) if vals else float("nan")

        sigma = float(np.mean(self.actor_.heads(ev["states"])[1])) if len(ev["states"]) else float("nan")
        return {
            "step": env_steps, "episode": episode, "eval_return_mean": ev["mean"],
            "eval_return_min": ev["min"], "eval_return_max": ev["max"], "critic_loss": recent("critic_loss"),
            "kl_mean": recent("kl_mean"), "kl_std": recent("kl_std"), "alpha_mean": float(self.alphas_[0]),
            "alpha_std": float(self.alphas_[1]), "q_grad_norm": recent("q_grad_norm"),
            "actor_grad_norm": recent("actor_grad_norm"), "policy_sigma_mean": sigma,
        }

    def fit(self, env, eval_env=None, callback=None):
        """Train on ``env`` for ``total_steps`` environment steps (finishing the last episode)."""
        self._validate()
        if eval_env is None:
            eval_env = env
        rng = self._setup(env)
        assembler = NStepAssembler(self.n_step)
        self.metrics_ = []
        steps, episode, credit, logged = 0, 0, 0.0, 0
        while steps < self.total_steps:
            state = env.reset(seed=int(rng.integers(2**63 - 1)))
            done = env.spec.horizon == 0
            while not done:
                noise = rng.standard_normal(self.actor_.action_dim)
                mean, std, _ = self.actor_.heads(state)
                tr = env.step(mean + std * noise)
                steps += 1
                for seg in assembler.push(tr):
                    self.buffer_.insert(seg)
                if steps >= self.warmup_steps:
                    credit += self.updates_per_step
                    while credit >= 1.0:
                        self.update(rng)
                        credit -= 1.0
                state = tr.next_state
                done = tr.done
            episode += 1
            last = steps >= self.total_steps
            if episode % self.eval_interval == 0 or last:
                self.metrics_.append(self._metrics_row(steps, episode, eval_env, logged))
                logged = len(self.history_["kl_mean"])
                if callback is not None:
                    callback(self.metrics_[-1])
        self.env_steps_ = steps
        self.episodes_ = episode
        return self

    def save(self, path, extra=None):
        nets = {"actor": self.actor_.net, "target_actor": self.target_actor_.net}
        if isinstance(self.critic_, CriticPair):
            nets.update(critic=self.critic_.online, target_critic=self.critic_.target)
        save_checkpoint(path, nets, extra)


def write_metrics_csv(path, rows):
    """Write metric rows with ``repr`` floats so equal runs give identical bytes."""
    def fmt(v):
        return repr(float(v)) if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(fmt(row[c]) for c in METRIC_COLUMNS) + "\n")


def read_metrics_csv(path):
    import csv

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ContractViolation(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{k: (int(v) if k in ("step", "episode") else float(v)) for k, v in row.items()} for row in reader]


class MixtureBanditOptimizer(BaseEstimator):
    """Train a state-free 1D Gaussian mixture directly on an analytic ``Q``.

    Each step draws ``batch_size`` actions, averages the per-sample update
    (WPO mixed derivative times ``Q'`` or score times ``Q - mean Q``), optionally
    multiplies every slot of component k by ``s_k^2`` and takes a plain ascent
    step.  Stddevs are floored at ``sigma_min``.
    """

    def __init__(self, algorithm="wpo", steps=12000, batch_size=1024, lr=0.003, means=(-1.0, 1.0),
                 stddevs=(10.0, 10.0), weights=(0.5, 0.5), rescale=True, sigma_min=SIGMA_MIN,
                 log_every=10, seed=0):
        self.algorithm = algorithm
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.means = means
        self.stddevs = stddevs
        self.weights = weights
        self.rescale = rescale
        self.sigma_min = sigma_min
        self.log_every = log_every
        self.seed = seed

    def fit(self, q=None, dq=None):
        check_choice(self.algorithm, ("wpo", "classic_pg"), "algorithm")
        if q is None:
            q, dq = bandit_q("quartic")
        rng = check_rng(self.seed)
        logits = np.log(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float).copy()
        sd = np.asarray(self.stddevs, dtype=float).copy()
        log = {"step": [], "means": [], "stddevs": [], "weights": []}

        def record(t):
            w = np.exp(logits - logits.max())
            log["step"].append(t)
            log["means"].append(mu.copy())
            log["stddevs"].append(sd.copy())
            log["weights"].append(w / w.sum())

        record(0)
        for t in range(1, self.steps + 1):
            pi = GaussianMixture(logits, mu[:, None], sd[:, None])
            a = pi.sample(rng, self.batch_size)
            if self.algorithm == "wpo":
                mixed = pi.grad_params_grad_action_log_prob(a)[..., 0]
                flat = np.mean(mixed * np.asarray(dq(a[:, 0]))[:, None], axis=0)
            else:
                qa = np.asarray(q(a[:, 0]))
                flat = np.mean(pi.grad_params_log_prob(a).flat(batch_ndim=1) * (qa - qa.mean())[:, None], axis=0)
            k = mu.size
            if not np.all(np.isfinite(flat)):
                raise TrainingAborted("non-finite mixture update", UpdateReport(flat, float("nan"), float("nan")))
            scale = np.tile(sd**2, 3) if self.rescale else np.ones(3 * k)
            step = self.lr * scale * flat
            logits = logits + step[:k]
            mu = mu + step[k:2 * k]
            sd = np.maximum(sd + step[2 * k:], self.sigma_min)
            if t % self.log_every == 0 or t == self.steps:
                record(t)
        self.steps_ = np.array(log["step"])
        self.means_ = np.array(log["means"])
        self.stddevs_ = np.array(log["stddevs"])
        self.weights_ = np.array(log["weights"])
        return self


def run_mog_experiment(algorithm="wpo", **kwargs):
    """Mixture-of-Gaussians experiment on ``Q(a) = -a^4/100 + a^2``; returns the fitted optimizer."""
    return MixtureBanditOptimizer(algorithm=algorithm, **kwargs).fit()
