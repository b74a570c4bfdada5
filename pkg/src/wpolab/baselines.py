"""Reference actor updates: score-function policy gradient, DPG and SVG(0)."""
from __future__ import annotations

import numpy as np

from ._validation import ContractViolation, check_last_dim
from .policies import DiagGaussian, Exponential, PolicyGradients, fisher_rescale
from .wpo import chain_head_jacobian

BASELINE_KINDS = ("classic_pg", "dpg", "svg0")


def classic_pg_gradient(params, action, q_value, baseline=0.0, rescale=False, head_jacobian=None):
    """``(Q(a) - baseline) * grad_theta log pi(a)``, optionally Fisher-rescaled.

    ``q_value`` and ``baseline`` broadcast against the action's batch axes.
    """
    adv = np.asarray(q_value, dtype=float) - np.asarray(baseline, dtype=float)
    if not np.all(np.isfinite(adv)):
        raise ContractViolation("non-finite advantage")
    score = params.grad_params_log_prob(action)
    grads = PolicyGradients({
        k: v * adv.reshape(adv.shape + (1,) * (v.ndim - adv.ndim)) for k, v in score.slots.items()
    })
    if rescale:
        grads = fisher_rescale(params, grads)
    return chain_head_jacobian(grads, head_jacobian)


def dpg_gradient(q_grad_at_mean, mean_head_jacobian=None):
    """Deterministic policy gradient: ``grad_a Q(mu)`` pushed through the mean head only."""
    g = np.asarray(q_grad_at_mean, dtype=float)
    if mean_head_jacobian is None:
        return g.copy()
    if callable(mean_head_jacobian):
        return mean_head_jacobian(g)
    return g @ np.asarray(mean_head_jacobian, dtype=float)


def svg0_gradient(params, noise, q_grad, head_jacobian=None):
    """Reparameterised gradient ``grad_a Q(a) * d a / d theta`` at ``a = g(theta, noise)``.

    Gaussian (a = mu + s * eta): mean slot ``q_grad``, stddev slot ``eta * q_grad``.
    Exponential (a = beta * eta): scales slot ``eta * q_grad``.
    """
    eta = check_last_dim(np.asarray(noise, dtype=float), params.dim, "noise")
    g = check_last_dim(np.asarray(q_grad, dtype=float), params.dim, "q_grad")
    if isinstance(params, DiagGaussian):
        grads = PolicyGradients({"mean": g * np.ones_like(eta), "stddev": eta * g})
    elif isinstance(params, Exponential):
        grads = PolicyGradients({"scales": eta * g})
    else:
        raise TypeError(f"{type(params).__name__} has no reparameterisation here")
    return chain_head_jacobian(grads, head_jacobian)


def reparameterize(params, noise):
    """Map standard noise to an action (and back via :func:`noise_from_action`)."""
    if isinstance(params, DiagGaussian):
        return params.mean + params.stddev * noise
    if isinstance(params, Exponential):
        return params.scales * noise
    raise TypeError(f"{type(params).__name__} has no reparameterisation here")


def noise_from_action(params, action):
    if isinstance(params, DiagGaussian):
        return (np.asarray(action) - params.mean) / params.stddev
    if isinstance(params, Exponential):
        return np.asarray(action) / params.scales
    raise TypeError(f"{type(params).__name__} has no reparameterisation here")
