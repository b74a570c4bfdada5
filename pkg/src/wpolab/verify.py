"""Analytic identity checks for the actor updates.

Each check returns a :class:`CheckResult` with the measured error and the
tolerance it was held to.  ``run_all`` drives them.  Setting ``STD_RESCALE``
to anything but 0.5 corrupts the Gaussian stddev rescaling, which the
equivalence checks must notice.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.hermite_e import hermegauss

from .baselines import classic_pg_gradient, svg0_gradient
from .policies import DiagGaussian, Exponential, PolicyGradients
from .wpo import flow_projection_lhs, wpo_head_gradient

# Gaussian stddev gradients are rescaled by STD_RESCALE * s^2.  Only the mutation hook changes it.
STD_RESCALE = 0.5


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{tag}  {self.name}: error={self.error:.3e} (tol {self.tolerance:.1e}){extra}"


def gauss_hermite_nodes(mean, stddev, order=40):
    """Tensor-product nodes and weights for expectations under N(mean, diag(stddev^2))."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    stddev = np.atleast_1d(np.asarray(stddev, dtype=float))
    x, w = hermegauss(order)
    w = w / w.sum()
    n = mean.size
    grid = np.array(list(itertools.product(x, repeat=n)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=n))), axis=1)
    return mean + stddev * grid, weights


def gaussian_expectation(mean, stddev, fn, order=40):
    """E[fn(a)] by Gauss-Hermite quadrature; ``fn`` maps (G, n) actions to (G, ...) values."""
    a, w = gauss_hermite_nodes(mean, stddev, order)
    vals = np.asarray(fn(a), dtype=float)
    return np.tensordot(w, vals, axes=(0, 0))


def _rescale(params, raw):
    var = params.stddev**2
    return PolicyGradients({"mean": raw["mean"] * var, "stddev": raw["stddev"] * STD_RESCALE * var})


def expected_wpo_update(params, dq, order=40, rescale=True):
    """Expected (optionally rescaled) WPO update for a Gaussian by quadrature."""
    def per_sample(a):
        return wpo_head_gradient(params, a, dq(a), rescale=False).flat(batch_ndim=1)

    raw = params.unflatten_gradients(gaussian_expectation(params.mean, params.stddev, per_sample, order))
    return _rescale(params, raw) if rescale else raw


def expected_classic_pg(params, q, order=40, rescale=False):
    def per_sample(a):
        return classic_pg_gradient(params, a, q(a)).flat(batch_ndim=1)

    raw = params.unflatten_gradients(gaussian_expectation(params.mean, params.stddev, per_sample, order))
    return _rescale(params, raw) if rescale else raw


def expected_svg0(params, dq, order=40):
    def per_sample(a):
        eta = (a - params.mean) / params.stddev
        return svg0_gradient(params, eta, dq(a)).flat(batch_ndim=1)

    return params.unflatten_gradients(gaussian_expectation(params.mean, params.stddev, per_sample, order))


def random_quadratic(rng, n):
    """``Q(a) = -0.5 a^T A a + b^T a + c`` with symmetric A; returns (q, dq)."""
    m = rng.normal(size=(n, n))
    a_mat = 0.5 * (m + m.T)
    b = rng.normal(size=n)
    c = rng.normal()

    def q(a):
        return -0.5 * np.einsum("...i,ij,...j->...", a, a_mat, a) + a @ b + c

    def dq(a):
        return -a @ a_mat + b

    return q, dq


def check_gaussian_values(order=40):
    out = []
    params = DiagGaussian([1.0], [1.0])
    for sign, target in ((-1.0, -1.0), (1.0, 1.0)):
        upd = expected_wpo_update(params, lambda a, s=sign: s * a, order).flat()
        err = float(np.max(np.abs(upd - target)))
        label = "-a^2/2" if sign < 0 else "+a^2/2"
        detail = f"(dmu, dsigma)=({upd[0]:.10g}, {upd[1]:.10g})"
        out.append(CheckResult(f"gaussian update Q={label}", err, 1e-8, detail))
    return out


def check_three_way(cases=20, seed=0, order=30):
    rng = np.random.default_rng(seed)
    err_pg, err_svg, err_sample = 0.0, 0.0, 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 4))
        params = DiagGaussian(rng.normal(size=n), rng.uniform(0.3, 2.0, size=n))
        q, dq = random_quadratic(rng, n)
        wpo = expected_wpo_update(params, dq, order).flat()
        pg = expected_classic_pg(params, q, order).flat()
        svg = expected_svg0(params, dq, order).flat()
        scale = max(1.0, float(np.max(np.abs(wpo))))
        err_pg = max(err_pg, float(np.max(np.abs(wpo - pg))) / scale)
        err_svg = max(err_svg, float(np.max(np.abs(wpo - svg))) / scale)
        a = params.sample(rng, 50)
        per_svg = svg0_gradient(params, (a - params.mean) / params.stddev, dq(a)).flat(1)
        closed_form = wpo_head_gradient(params, a, dq(a), rescale=True).flat(1)
        generic = _rescale(params, wpo_head_gradient(params, a, dq(a), rescale=False)).flat(1)
        err_sample = max(err_sample, float(np.max(np.abs(closed_form - per_svg))),
                         float(np.max(np.abs(generic - per_svg))))
    return [
        CheckResult("E[rescaled WPO] = E[policy gradient]", err_pg, 1e-6, f"{cases} random quadratics"),
        CheckResult("E[rescaled WPO] = E[SVG(0)]", err_svg, 1e-6, f"{cases} random quadratics"),
        CheckResult("per-sample rescaled WPO = SVG(0)", err_sample, 1e-12),
    ]


def check_variance_identity(cases=20, seed=1, order=40):
    """Stddev part of the rescaled WPO update equals the score-function stddev gradient."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        poly = Polynomial(rng.normal(size=int(rng.integers(2, 6))))
        params = DiagGaussian([rng.normal()], [rng.uniform(0.3, 2.0)])
        lhs = gaussian_expectation(params.mean, params.stddev,
                                   lambda a: (a - params.mean) / params.stddev * poly.deriv()(a), order)
        rhs = gaussian_expectation(params.mean, params.stddev,
                                   lambda a: poly(a)[:, 0, None] * params.grad_params_log_prob(a)["stddev"], order)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) / max(1.0, float(np.max(np.abs(rhs)))))
    return [CheckResult("stddev update = score-function stddev gradient", worst, 1e-8, f"{cases} polynomials")]


def check_exponential_counterexample(samples=1_000_000, seed=2, dim=2):
    """For Q = sum a_i^2 the natural WPO and SVG(0) scale updates differ in expectation."""
    rng = np.random.default_rng(seed)
    params = Exponential(rng.uniform(0.5, 2.0, size=dim))
    a = params.sample(rng, samples)
    dq = 2.0 * a
    wpo = wpo_head_gradient(params, a, dq, rescale=True)["scales"]
    svg = svg0_gradient(params, a / params.scales, dq)["scales"]
    diff = wpo - svg
    gap = np.abs(diff.mean(axis=0))
    se = diff.std(axis=0, ddof=1) / np.sqrt(samples)
    natural_err = float(np.max(np.abs(wpo.mean(axis=0) - dq.mean(axis=0))))
    ratio = float(np.min(gap / se))
    return [
        CheckResult("natural WPO scale update = E[dQ/da]", natural_err, 1e-12),
        # passes when the gap exceeds 10 standard errors (error reported as 10/ratio)
        CheckResult("exponential WPO != SVG(0)", 10.0 / ratio, 1.0, f"gap/stderr={ratio:.1f}"),
    ]


def check_zero_variance(samples=10_000, seed=3):
    rng = np.random.default_rng(seed)
    n = 3
    params = DiagGaussian(rng.normal(size=n), rng.uniform(0.5, 2.0, size=n))
    w = rng.normal(size=n)
    a = params.sample(rng, samples)
    g = np.broadcast_to(w, a.shape)
    wpo_mean = wpo_head_gradient(params, a, g, rescale=True)["mean"]
    pg_mean = classic_pg_gradient(params, a, a @ w)["mean"]
    # shifted-data standard deviation: exact zero for identical samples
    wpo_sd = float(np.max((wpo_mean - wpo_mean[0]).std(axis=0)))
    pg_ratio = float(np.min(pg_mean.std(axis=0) / np.abs(pg_mean.mean(axis=0))))
    return [
        CheckResult("linear critic: WPO mean-update std", wpo_sd, 1e-12),
        CheckResult("linear critic: policy-gradient std / |mean| > 0.1", 0.1 / pg_ratio, 1.0,
                    f"ratio={pg_ratio:.2f}"),
    ]


def check_integration_by_parts(cases=20, seed=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        poly = Polynomial(rng.normal(size=int(rng.integers(2, 6))))
        params = DiagGaussian([rng.normal()], [rng.uniform(0.3, 2.0)])
        worst = max(worst, flow_projection_lhs(params, poly).rel_error)
    return [CheckResult("projected flow: expectation = integration by parts", worst, 1e-6, f"{cases} cases")]


CHECKS = (
    check_gaussian_values,
    check_three_way,
    check_variance_identity,
    check_exponential_counterexample,
    check_zero_variance,
    check_integration_by_parts,
)


def run_all(echo=print):
    results = []
    for check in CHECKS:
        for res in check():
            results.append(res)
            if echo is not None:
                echo(res.line())
    return results
