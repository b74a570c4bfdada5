"""Analytic action distributions used as policy heads.

Every family exposes the same small surface:

* ``log_prob`` / ``sample``
* ``grad_action_log_prob``            -- d/da log pi(a)
* ``grad_params_log_prob``            -- d/dtheta log pi(a), as :class:`PolicyGradients`
* ``grad_params_grad_action_log_prob`` -- the mixed derivative, a (params x action) matrix

Parameters are plain value objects: they are validated once on construction
and never mutated. Actions may carry leading batch axes; the trailing axis is
always the action dimension.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from ._validation import ContractViolation, as_float_array, check_last_dim, check_rng

SIGMA_MIN = 1e-3
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PolicyGradients:
    """One gradient array per parameter field of the owning distribution."""

    slots: Mapping[str, np.ndarray]

    def __getitem__(self, name):
        return self.slots[name]

    @property
    def names(self):
        return tuple(self.slots)

    def flat(self, batch_ndim=0):
        """Concatenate the slots in declaration order.

        The first ``batch_ndim`` axes are kept; everything after is flattened.
        """
        parts = [np.asarray(v) for v in self.slots.values()]
        lead = parts[0].shape[:batch_ndim]
        return np.concatenate([p.reshape(lead + (-1,)) for p in parts], axis=-1)

    def map(self, fn):
        return PolicyGradients({k: fn(k, v) for k, v in self.slots.items()})

    def __add__(self, other):
        _check_same_slots(self, other)
        return PolicyGradients({k: self.slots[k] + other.slots[k] for k in self.slots})

    def __sub__(self, other):
        _check_same_slots(self, other)
        return PolicyGradients({k: self.slots[k] - other.slots[k] for k in self.slots})

    def __mul__(self, scalar):
        return PolicyGradients({k: v * scalar for k, v in self.slots.items()})

    __rmul__ = __mul__

    def mean(self, axis=0):
        return PolicyGradients({k: np.mean(v, axis=axis) for k, v in self.slots.items()})


def _check_same_slots(a, b):
    if a.names != b.names:
        raise ContractViolation(f"gradient slots differ: {a.names} vs {b.names}")
    for k in a.names:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ContractViolation(f"slot {k!r} shape {np.shape(a[k])} != {np.shape(b[k])}")


class _Family:
    """Shared helpers; subclasses are frozen dataclasses."""

    def _check_action(self, action):
        return check_last_dim(as_float_array(action, "action"), self.dim, "action")

    def unflatten_gradients(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape[-1] != self.n_params:
            raise ContractViolation(f"expected {self.n_params} gradient entries, got {flat.shape[-1]}")
        out, start = {}, 0
        lead = flat.shape[:-1]
        for name, shape in self.param_shapes().items():
            size = int(np.prod(shape))
            out[name] = flat[..., start:start + size].reshape(lead + shape)
            start += size
        return PolicyGradients(out)

    @property
    def n_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def check_gradients(self, grads):
        shapes = self.param_shapes()
        if tuple(shapes) != grads.names:
            raise ContractViolation(f"gradient slots {grads.names} do not match {tuple(shapes)}")
        for name, shape in shapes.items():
            if np.shape(grads[name])[-len(shape):] != shape:
                raise ContractViolation(f"slot {name!r} has shape {np.shape(grads[name])}, expected {shape}")
        return grads


@dataclass(frozen=True)
class DiagGaussian(_Family):
    """Diagonal Gaussian N(mean, diag(stddev**2)).

    ``mean`` and ``stddev`` may carry the same leading batch axes (one
    distribution per state); the last axis is the action dimension.
    """

    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        mean = as_float_array(self.mean, "mean")
        stddev = as_float_array(self.stddev, "stddev")
        if mean.ndim == 0:
            mean = mean.reshape(1)
        if stddev.ndim == 0:
            stddev = stddev.reshape(1)
        if mean.shape != stddev.shape:
            raise ContractViolation(f"mean shape {mean.shape} != stddev shape {stddev.shape}")
        if not np.all(np.isfinite(mean)):
            raise ContractViolation("mean contains non-finite values")
        if not np.all(stddev >= SIGMA_MIN):
            raise ContractViolation(f"stddev must be >= sigma_min={SIGMA_MIN}, got min {stddev.min()}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stddev", stddev)

    @property
    def dim(self):
        return self.mean.shape[-1]

    def param_shapes(self):
        return {"mean": (self.dim,), "stddev": (self.dim,)}

    def log_prob(self, action):
        a = self._check_action(action)
        z = (a - self.mean) / self.stddev
        return np.sum(-0.5 * z**2 - np.log(self.stddev) - 0.5 * _LOG_2PI, axis=-1)

    def sample(self, rng=None, size=None):
        rng = check_rng(rng)
        shape = (() if size is None else tuple(np.atleast_1d(size))) + self.mean.shape
        return self.mean + self.stddev * rng.standard_normal(shape)

    def mode(self):
        return self.mean.copy()

    def grad_action_log_prob(self, action):
        a = self._check_action(action)
        return -(a - self.mean) / self.stddev**2

    def grad_params_log_prob(self, action):
        a = self._check_action(action)
        d = a - self.mean
        return PolicyGradients({
            "mean": d / self.stddev**2,
            "stddev": d**2 / self.stddev**3 - 1.0 / self.stddev,
        })

    def grad_params_grad_action_log_prob(self, action):
        """Mixed derivative, shape ``(..., 2n, n)``; rows are [mean_0.., stddev_0..]."""
        if self.mean.ndim != 1:
            raise ContractViolation("mixed derivative matrix is defined for a single distribution")
        a = self._check_action(action)
        n = self.dim
        out = np.zeros(a.shape[:-1] + (2 * n, n))
        idx = np.arange(n)
        out[..., idx, idx] = 1.0 / self.stddev**2
        out[..., n + idx, idx] = 2.0 * (a - self.mean) / self.stddev**3
        return out

    def fisher_diag(self):
        return PolicyGradients({"mean": 1.0 / self.stddev**2, "stddev": 2.0 / self.stddev**2})

    def entropy(self):
        return np.sum(np.log(self.stddev) + 0.5 * (1.0 + _LOG_2PI), axis=-1)


@dataclass(frozen=True)
class GaussianMixture(_Family):
    """Mixture of K diagonal Gaussians with weights ``softmax(logits)``."""

    logits: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self):
        logits = as_float_array(self.logits, "logits", ndim=1)
        means = as_float_array(self.means, "means", ndim=(1, 2))
        stddevs = as_float_array(self.stddevs, "stddevs", ndim=(1, 2))
        if means.ndim == 1:
            means = means[:, None]
        if stddevs.ndim == 1:
            stddevs = stddevs[:, None]
        k = logits.shape[0]
        if means.shape != stddevs.shape or means.shape[0] != k:
            raise ContractViolation(
                f"inconsistent mixture shapes: logits {logits.shape}, means {means.shape}, stddevs {stddevs.shape}"
            )
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(means))):
            raise ContractViolation("mixture parameters contain non-finite values")
        if not np.all(stddevs >= SIGMA_MIN):
            raise ContractViolation(f"stddevs must be >= sigma_min={SIGMA_MIN}")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddevs", stddevs)

    @classmethod
    def from_weights(cls, weights, means, stddevs):
        weights = as_float_array(weights, "weights", ndim=1)
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ContractViolation("weights must be positive and sum to 1")
        return cls(np.log(weights), means, stddevs)

    @property
    def weights(self):
        return softmax(self.logits)

    @property
    def n_components(self):
        return self.logits.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def param_shapes(self):
        k, n = self.means.shape
        return {"logits": (k,), "means": (k, n), "stddevs": (k, n)}

    def _component_terms(self, a):
        # a: (..., n) -> per-component quantities with shape (..., K[, n])
        d = a[..., None, :] - self.means
        s = self.stddevs
        log_comp = np.sum(-0.5 * (d / s) ** 2 - np.log(s) - 0.5 * _LOG_2PI, axis=-1)
        log_joint = log_softmax(self.logits) + log_comp
        log_pi = logsumexp(log_joint, axis=-1)
        resp = np.exp(log_joint - log_pi[..., None])
        return d, log_pi, resp

    def log_prob(self, action):
        a = self._check_action(action)
        return self._component_terms(a)[1]

    def responsibilities(self, action):
        return self._component_terms(self._check_action(action))[2]

    def sample(self, rng=None, size=None):
        rng = check_rng(rng)
        shape = () if size is None else tuple(np.atleast_1d(size))
        comp = rng.choice(self.n_components, size=shape, p=self.weights)
        eps = rng.standard_normal(shape + (self.dim,))
        return self.means[comp] + self.stddevs[comp] * eps

    def mode(self):
        """Mean of the highest-weight component (used for deterministic evaluation)."""
        return self.means[int(np.argmax(self.logits))].copy()

    def grad_action_log_prob(self, action):
        a = self._check_action(action)
        d, _, r = self._component_terms(a)
        return np.sum(r[..., None] * (-d / self.stddevs**2), axis=-2)

    def grad_params_log_prob(self, action):
        a = self._check_action(action)
        d, _, r = self._component_terms(a)
        s = self.stddevs
        return PolicyGradients({
            "logits": r - self.weights,
            "means": r[..., None] * d / s**2,
            "stddevs": r[..., None] * (d**2 / s**3 - 1.0 / s),
        })

    def grad_params_grad_action_log_prob(self, action):
        """Mixed derivative, shape ``(..., K + 2Kn, n)`` in [logits, means, stddevs] order.

        With responsibilities r_k, per-component scores g_k = -(a - mu_k)/s_k^2 and
        their responsibility-weighted mean gbar, the action score is sum_k r_k g_k.
        Differentiating through r_k gives the coupling terms below.
        """
        a = self._check_action(action)
        d, _, r = self._component_terms(a)
        s = self.stddevs
        k, n = self.means.shape
        g = -d / s**2                                  # (..., K, n)
        gbar = np.sum(r[..., None] * g, axis=-2)       # (..., n)
        diff = g - gbar[..., None, :]                  # (..., K, n)
        h = d**2 / s**3 - 1.0 / s                      # d/ds log N_k
        eye = np.eye(n)

        d_logits = r[..., None] * diff                 # (..., K, n)
        # means: [..., k, i, j] = r_k g_ki (gbar_j - g_kj) + r_k delta_ij / s_ki^2
        d_means = (r[..., None, None] * (-g[..., :, :, None] * diff[..., :, None, :])
                   + r[..., None, None] * eye / s[..., :, :, None] ** 2)
        # stddevs: [..., k, i, j] = r_k h_ki (g_kj - gbar_j) + r_k delta_ij 2 d_ki / s_ki^3
        d_stds = (r[..., None, None] * (h[..., :, :, None] * diff[..., :, None, :])
                  + r[..., None, None] * eye * (2.0 * d / s**3)[..., :, :, None])
        lead = a.shape[:-1]
        return np.concatenate([
            d_logits,
            d_means.reshape(lead + (k * n, n)),
            d_stds.reshape(lead + (k * n, n)),
        ], axis=-2)


@dataclass(frozen=True)
class Exponential(_Family):
    """Independent exponentials on a >= 0 with per-dimension scale (mean) ``scales``."""

    scales: np.ndarray

    def __post_init__(self):
        scales = as_float_array(self.scales, "scales")
        if scales.ndim == 0:
            scales = scales.reshape(1)
        if not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise ContractViolation("scales must be finite and > 0")
        object.__setattr__(self, "scales", scales)

    @property
    def dim(self):
        return self.scales.shape[-1]

    def param_shapes(self):
        return {"scales": (self.dim,)}

    def log_prob(self, action):
        a = self._check_action(action)
        lp = np.sum(-np.log(self.scales) - a / self.scales, axis=-1)
        return np.where(np.all(a >= 0, axis=-1), lp, -np.inf)

    def sample(self, rng=None, size=None):
        rng = check_rng(rng)
        shape = (() if size is None else tuple(np.atleast_1d(size))) + self.scales.shape
        return self.scales * rng.standard_exponential(shape)

    def mode(self):
        return np.zeros_like(self.scales)

    def grad_action_log_prob(self, action):
        a = self._check_action(action)
        return np.broadcast_to(-1.0 / self.scales, a.shape).copy()

    def grad_params_log_prob(self, action):
        a = self._check_action(action)
        return PolicyGradients({"scales": a / self.scales**2 - 1.0 / self.scales})

    def grad_params_grad_action_log_prob(self, action):
        a = self._check_action(action)
        out = np.zeros(a.shape[:-1] + (self.dim, self.dim))
        idx = np.arange(self.dim)
        out[..., idx, idx] = 1.0 / self.scales**2
        return out

    def fisher_diag(self):
        return PolicyGradients({"scales": 1.0 / self.scales**2})


def fisher_scale_factors(params):
    """Diagonal multipliers that turn raw gradients into rescaled (natural-like) ones."""
    if isinstance(params, DiagGaussian):
        var = params.stddev**2
        return PolicyGradients({"mean": var, "stddev": 0.5 * var})
    if isinstance(params, GaussianMixture):
        var = params.stddevs**2
        # a component's logit has no action axis; use its mean variance over dimensions
        return PolicyGradients({"logits": var.mean(axis=1), "means": var, "stddevs": var})
    if isinstance(params, Exponential):
        return PolicyGradients({"scales": params.scales**2})
    raise TypeError(f"no Fisher rescaling for {type(params).__name__}")


def fisher_rescale(params, raw, inverse=False):
    """Multiply each gradient slot by the inverse diagonal Fisher entry of its parameter.

    Gaussian: mean by s^2, stddev by s^2/2.  Mixture: every slot of component k
    by s_k^2.  Exponential: scales by beta^2.  ``inverse=True`` undoes it.
    """
    params.check_gradients(raw)
    factors = fisher_scale_factors(params)
    if inverse:
        return PolicyGradients({k: raw[k] / factors[k] for k in raw.names})
    return PolicyGradients({k: raw[k] * factors[k] for k in raw.names})


def _check_kl_pair(p, q):
    if not isinstance(p, DiagGaussian) or not isinstance(q, DiagGaussian):
        raise TypeError("KL divergence is implemented for DiagGaussian pairs")
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ContractViolation(f"dimension mismatch: {p.dim} vs {q.dim}")


def kl_mean_part(p, q):
    """Mean term of KL(p || q): sum (mu_p - mu_q)^2 / (2 s_q^2)."""
    _check_kl_pair(p, q)
    return np.sum((p.mean - q.mean) ** 2 / (2.0 * q.stddev**2), axis=-1)


def kl_std_part(p, q):
    """Scale term of KL(p || q); kl_mean_part + kl_std_part == kl_divergence."""
    _check_kl_pair(p, q)
    ratio = p.stddev**2 / q.stddev**2
    return np.sum(0.5 * ratio - 0.5 - 0.5 * np.log(ratio), axis=-1)


def kl_divergence(p, q):
    """KL(p || q) for diagonal Gaussians, summed over action dimensions."""
    return kl_mean_part(p, q) + kl_std_part(p, q)


def kl_gradients(p, q):
    """Gradients of the two KL parts with respect to ``q``'s mean and stddev.

    Returns ``(mean_part, std_part)`` as :class:`PolicyGradients` with slots
    ``mean`` and ``stddev``; ``p`` is treated as a constant (the target policy).
    """
    _check_kl_pair(p, q)
    d = q.mean - p.mean
    var_q = q.stddev**2
    mean_part = PolicyGradients({"mean": d / var_q, "stddev": -(d**2) / q.stddev**3})
    std_part = PolicyGradients({
        "mean": np.zeros_like(q.mean),
        "stddev": 1.0 / q.stddev - p.stddev**2 / q.stddev**3,
    })
    return mean_part, std_part
