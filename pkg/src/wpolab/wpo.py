"""The WPO actor update and its regularisation.

The per-sample update is ``grad_theta (grad_a log pi(a)) . f(grad_a Q(a))`` where
``f`` is an optional odd squashing map and ``grad_a Q`` is a constant (no
gradient flows into the critic).  With ``rescale=True`` each parameter slot is
multiplied by its inverse diagonal Fisher entry, which for a Gaussian head
reduces to the closed forms in :func:`gaussian_head_cotangents`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ContractViolation, NonFiniteError, check_choice, check_positive
from .policies import DiagGaussian, PolicyGradients, fisher_scale_factors

SQUASH_KINDS = ("identity", "cube_root", "tanh_scaled")
KL_MODES = ("soft", "hard")


@dataclass(frozen=True)
class Squash:
    kind: str = "identity"
    scale: float = 1.0

    def __post_init__(self):
        check_choice(self.kind, SQUASH_KINDS, "squash")
        if self.kind == "tanh_scaled":
            check_positive(self.scale, "squash scale")

    def __call__(self, g):
        g = np.asarray(g, dtype=float)
        if self.kind == "identity":
            return g
        if self.kind == "cube_root":
            return np.cbrt(g)
        return self.scale * np.tanh(g / self.scale)


def squash(g, kind="identity", scale=1.0):
    """Apply an elementwise odd monotone map to an action-value gradient."""
    if not isinstance(kind, Squash):
        kind = Squash(kind, scale)
    return kind(g)


@dataclass(frozen=True)
class KlConfig:
    """KL regularisation towards the target policy.

    ``soft`` keeps ``alpha_mean``/``alpha_std`` fixed; ``hard`` treats them as
    Lagrange multipliers updated by projected dual ascent on ``KL - epsilon``.
    """

    mode: str = "soft"
    alpha_mean: float = 0.0
    alpha_std: float = 0.0
    epsilon_mean: float = 5e-3
    epsilon_std: float = 1e-6
    dual_lr: float = 1.0
    alpha_min: float = 1e-6
    alpha_max: float = 1e6

    def __post_init__(self):
        check_choice(self.mode, KL_MODES, "kl_mode")
        check_positive(self.alpha_mean, "alpha_mean", strict=False)
        check_positive(self.alpha_std, "alpha_std", strict=False)
        check_positive(self.epsilon_mean, "epsilon_mean")
        check_positive(self.epsilon_std, "epsilon_std")
        check_positive(self.dual_lr, "dual_lr")
        check_positive(self.alpha_min, "alpha_min", strict=False)
        if not self.alpha_max > self.alpha_min:
            raise ContractViolation("alpha_max must exceed alpha_min")


@dataclass
class UpdateReport:
    """Diagnostics for one actor update."""

    actor_grad: np.ndarray
    q_grad_norm: float
    actor_grad_norm: float
    kl_mean: float = 0.0
    kl_std: float = 0.0
    alphas: tuple = (0.0, 0.0)
    extra: dict = field(default_factory=dict)


def _check_q_grad(q_grad, dim):
    q_grad = np.asarray(q_grad, dtype=float)
    if q_grad.ndim == 0 or q_grad.shape[-1] != dim:
        raise ContractViolation(f"q_grad has trailing dimension {q_grad.shape[-1:]}, expected {dim}")
    if not np.all(np.isfinite(q_grad)):
        norm = float(np.linalg.norm(np.nan_to_num(q_grad, nan=np.inf)))
        raise NonFiniteError(f"non-finite action-value gradient (norm={norm})", {"q_grad_norm": norm})
    return q_grad


def gaussian_head_cotangents(mean, stddev, action, q_grad, squash_kind=Squash(), rescale=True):
    """Per-sample WPO cotangents for the mean and stddev outputs of a Gaussian head.

    Broadcasts over leading axes.  Rescaled:
    ``mean <- f(g)``, ``stddev <- ((a - mu) / s) * f(g)``.
    Raw: ``mean <- f(g) / s^2``, ``stddev <- 2 (a - mu) / s^3 * f(g)``.
    """
    g = squash(q_grad, squash_kind)
    d = np.asarray(action, dtype=float) - mean
    if rescale:
        return g * np.ones_like(d), (d / stddev) * g
    return g / stddev**2, 2.0 * d / stddev**3 * g


def chain_head_jacobian(head_cot, head_jacobian):
    """Push a per-head cotangent through ``head_jacobian``.

    ``None`` means the distribution parameters are the trainable parameters;
    an array ``J`` of shape ``(n_head_params, n_theta)`` gives ``flat(head) @ J``;
    a callable receives the :class:`PolicyGradients` and returns the result.
    """
    if head_jacobian is None:
        return head_cot
    if callable(head_jacobian):
        return head_jacobian(head_cot)
    jac = np.asarray(head_jacobian, dtype=float)
    return head_cot.flat() @ jac


def wpo_head_gradient(params, action, q_grad, squash_kind=Squash(), rescale=True):
    """Per-sample WPO gradient with respect to the distribution parameters."""
    q_grad = _check_q_grad(q_grad, params.dim)
    if isinstance(params, DiagGaussian) and params.mean.ndim == 1:
        a = params._check_action(action)
        mean_cot, std_cot = gaussian_head_cotangents(
            params.mean, params.stddev, a, q_grad, squash_kind, rescale
        )
        return PolicyGradients({"mean": mean_cot, "stddev": std_cot})
    mixed = params.grad_params_grad_action_log_prob(action)
    flat = np.einsum("...pn,...n->...p", mixed, squash(q_grad, squash_kind))
    grads = params.unflatten_gradients(flat)
    if rescale:
        factors = fisher_scale_factors(params)
        grads = PolicyGradients({k: grads[k] * factors[k] for k in grads.names})
    return grads


def wpo_sample_gradient(params, action, q_grad, squash_kind=Squash(), rescale=True, head_jacobian=None):
    """WPO gradient for one sampled action, chained through ``head_jacobian``."""
    return chain_head_jacobian(wpo_head_gradient(params, action, q_grad, squash_kind, rescale), head_jacobian)


def update_alphas(alphas, kl_values, cfg):
    """One projected dual-ascent step (hard mode); soft mode returns the alphas unchanged."""
    alphas = tuple(float(a) for a in alphas)
    if cfg.mode == "soft":
        return alphas
    eps = (cfg.epsilon_mean, cfg.epsilon_std)
    return tuple(
        float(np.clip(a + cfg.dual_lr * (float(kl) - e), cfg.alpha_min, cfg.alpha_max))
        for a, kl, e in zip(alphas, kl_values, eps)
    )


def initial_alphas(cfg):
    if cfg.mode == "soft":
        return (cfg.alpha_mean, cfg.alpha_std)
    return (
        float(np.clip(cfg.alpha_mean, cfg.alpha_min, cfg.alpha_max)),
        float(np.clip(cfg.alpha_std, cfg.alpha_min, cfg.alpha_max)),
    )


def kl_regularized_direction(avg_wpo_grad, kl_grad_mean, kl_grad_std, alphas):
    """Ascent direction ``g_wpo - alpha_mean dKL_mean - alpha_std dKL_std``."""
    return np.asarray(avg_wpo_grad) - alphas[0] * np.asarray(kl_grad_mean) - alphas[1] * np.asarray(kl_grad_std)


def kl_regularized_actor_step(theta, avg_wpo_grad, kl_grads, kl_values, cfg, alphas, lr):
    """Plain gradient-ascent actor step with KL penalty; returns ``(theta, alphas)``.

    ``kl_grads`` is ``(dKL_mean/dtheta, dKL_std/dtheta)`` computed conventionally;
    ``kl_values`` the matching measured KL values used for dual ascent.
    The step uses the alphas in force before the dual update.
    """
    direction = kl_regularized_direction(avg_wpo_grad, kl_grads[0], kl_grads[1], alphas)
    if not np.all(np.isfinite(direction)):
        raise NonFiniteError("non-finite actor step")
    new_theta = np.asarray(theta, dtype=float) + lr * direction
    return new_theta, update_alphas(alphas, kl_values, cfg)


@dataclass(frozen=True)
class FlowProjection:
    """Two quadrature evaluations of the projected flow for a 1D policy."""

    expectation: PolicyGradients
    integration_by_parts: PolicyGradients

    @property
    def max_abs_error(self):
        return float(np.max(np.abs(self.expectation.flat() - self.integration_by_parts.flat())))

    @property
    def rel_error(self):
        scale = max(float(np.max(np.abs(self.expectation.flat()))), 1e-300)
        return self.max_abs_error / scale


def _derivatives(q, dq, d2q):
    if dq is None and hasattr(q, "deriv"):
        dq = q.deriv(1)
    if d2q is None and dq is not None and hasattr(dq, "deriv"):
        d2q = dq.deriv(1)
    if dq is None or d2q is None:
        raise ContractViolation("flow projection needs dQ and d2Q (pass them or use a numpy Polynomial)")
    return dq, d2q


def flow_projection_lhs(params, q, grid=None, dq=None, d2q=None, width=10.0, points=4097):
    """Evaluate the projected flow term two ways for a 1D policy.

    (i)  E_pi[ grad_theta grad_a log pi(a) * Q'(a) ]
    (ii) -int grad_theta log pi(a) * d/da( pi(a) Q'(a) ) da
    Both use trapezoid quadrature on ``grid`` (default: ``width`` stddevs either
    side of the mean with ``points`` nodes).  Neither side is rescaled.
    """
    if params.dim != 1:
        raise ContractViolation("flow projection is implemented for 1D actions")
    dq, d2q = _derivatives(q, dq, d2q)
    if grid is None:
        if isinstance(params, DiagGaussian):
            c, s = float(params.mean[0]), float(params.stddev[0])
        else:
            c = float(np.sum(params.weights * params.means[:, 0]))
            s = float(np.max(params.stddevs)) + float(np.max(np.abs(params.means[:, 0] - c)))
        grid = np.linspace(c - width * s, c + width * s, points)
    a = np.asarray(grid, dtype=float)[:, None]
    dens = np.exp(params.log_prob(a))
    qp = np.asarray(dq(a[:, 0]), dtype=float)
    qpp = np.asarray(d2q(a[:, 0]), dtype=float)

    mixed = params.grad_params_grad_action_log_prob(a)[..., 0]          # (G, P)
    side_i = np.trapezoid(dens[:, None] * mixed * qp[:, None], a[:, 0], axis=0)

    score = params.grad_params_log_prob(a).flat(batch_ndim=1)           # (G, P)
    dens_prime = dens * params.grad_action_log_prob(a)[:, 0]
    divergence = dens_prime * qp + dens * qpp
    side_ii = -np.trapezoid(score * divergence[:, None], a[:, 0], axis=0)

    return FlowProjection(params.unflatten_gradients(side_i), params.unflatten_gradients(side_ii))
