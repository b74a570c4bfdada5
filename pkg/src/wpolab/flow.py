"""Nonparametric 1D density flows used as an oracle for the parametric updates.

``wasserstein_flow_step`` advances the continuity equation
``d pi/dt = -d/da (pi * v)`` with ``v = f(Q'(a))`` (``f`` a squashing map) using
a conservative finite-volume scheme with zero-flux walls.  Two flux
reconstructions are available: ``"upwind"`` (first-order donor cell) and the
default ``"van_leer"`` (second-order, slope-limited).  Both conserve mass to
rounding and stay non-negative under ``dt * max|v| <= 0.5 * da``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ContractViolation, check_choice, check_positive
from .wpo import Squash, squash as apply_squash

SCHEMES = ("upwind", "van_leer")


class CFLViolation(ContractViolation):
    pass


@dataclass(frozen=True)
class GridDensity:
    """Cell-averaged density on ``[lo, hi]`` with ``len(values)`` equal cells."""

    lo: float
    hi: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise ContractViolation("density needs a 1D array of at least 2 cells")
        if not self.hi > self.lo:
            raise ContractViolation(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ContractViolation("density values must be finite and non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_pdf(cls, pdf, lo=-15.0, hi=15.0, cells=4096):
        """Sample ``pdf`` at cell centres and normalise to unit mass."""
        dx = (hi - lo) / cells
        centers = lo + dx * (np.arange(cells) + 0.5)
        values = np.asarray(pdf(centers), dtype=float)
        return cls(lo, hi, values / (values.sum() * dx))

    @classmethod
    def gaussian(cls, mean, stddev, lo=-15.0, hi=15.0, cells=4096):
        return cls.from_pdf(lambda x: np.exp(-0.5 * ((x - mean) / stddev) ** 2), lo, hi, cells)

    @property
    def cells(self):
        return self.values.size

    @property
    def dx(self):
        return (self.hi - self.lo) / self.cells

    @property
    def centers(self):
        return self.lo + self.dx * (np.arange(self.cells) + 0.5)

    @property
    def faces(self):
        return self.lo + self.dx * np.arange(self.cells + 1)

    def mass(self):
        return float(self.values.sum() * self.dx)

    def mean(self):
        return float(np.sum(self.values * self.centers) * self.dx)

    def stddev(self):
        m = self.mean()
        return float(np.sqrt(np.sum(self.values * (self.centers - m) ** 2) * self.dx))

    def with_values(self, values):
        return GridDensity(self.lo, self.hi, values)


def _grad(q, x, dq):
    if dq is not None:
        return np.asarray(dq(x), dtype=float)
    if hasattr(q, "deriv"):
        return np.asarray(q.deriv(1)(x), dtype=float)
    h = 1e-5 * np.maximum(1.0, np.abs(x))
    return (np.asarray(q(x + h)) - np.asarray(q(x - h))) / (2.0 * h)


def face_velocity(density, q, squash="identity", dq=None):
    """Velocity ``f(Q'(a))`` at the ``M + 1`` cell faces."""
    kind = squash if isinstance(squash, Squash) else Squash(squash)
    return apply_squash(_grad(q, density.faces, dq), kind)


def max_stable_dt(density, velocity, cfl=0.5):
    vmax = float(np.max(np.abs(velocity)))
    return np.inf if vmax == 0.0 else cfl * density.dx / vmax


def _fluxes(p, v, dt, dx, scheme):
    vf = v[1:-1]
    if scheme == "upwind":
        inner = np.where(vf > 0, vf * p[:-1], vf * p[1:])
    else:
        d = np.diff(p)
        left = np.concatenate(([0.0], d))
        right = np.concatenate((d, [0.0]))
        prod = left * right
        with np.errstate(invalid="ignore", divide="ignore"):
            slope = np.where(prod > 0, 2.0 * prod / (left + right), 0.0)
        courant = vf * dt / dx
        p_left = p[:-1] + 0.5 * slope[:-1] * (1.0 - courant)
        p_right = p[1:] - 0.5 * slope[1:] * (1.0 + courant)
        inner = np.where(vf > 0, vf * p_left, vf * p_right)
    return np.concatenate(([0.0], inner, [0.0]))


def wasserstein_flow_step(density, q, dt, squash="identity", dq=None, scheme="van_leer", velocity=None):
    """Advance the density by ``dt`` along ``v = f(Q')`` (ascent on E[Q]).

    Raises :class:`CFLViolation` if ``dt * max|v| > 0.5 * dx``.
    """
    check_positive(dt, "dt")
    check_choice(scheme, SCHEMES, "scheme")
    v = face_velocity(density, q, squash, dq) if velocity is None else np.asarray(velocity, dtype=float)
    if v.shape != (density.cells + 1,) or not np.all(np.isfinite(v)):
        raise ContractViolation("velocity must be finite with one value per cell face")
    vmax = float(np.max(np.abs(v)))
    if dt * vmax > 0.5 * density.dx * (1.0 + 1e-12):
        raise CFLViolation(f"dt={dt} violates CFL: dt*max|v|={dt * vmax:.3g} > 0.5*dx={0.5 * density.dx:.3g}")
    p = density.values
    flux = _fluxes(p, v, dt, density.dx, scheme)
    new = p - dt / density.dx * np.diff(flux)
    # Roundoff can leave -1e-300-sized values in empty cells.
    new = np.where((new < 0) & (new > -1e-12 * p.max()), 0.0, new)
    if np.any(new < 0):
        raise CFLViolation("flow step produced negative density")
    return density.with_values(new)


def expected_functional(density, q):
    """E_pi[Q] by the midpoint rule on the density's cells."""
    return float(np.sum(density.values * np.asarray(q(density.centers), dtype=float)) * density.dx)


def fisher_rao_flow_step(density, q, dt):
    """Multiplicative step ``pi <- pi (1 + dt (Q - E[Q]))`` followed by renormalisation."""
    check_positive(dt, "dt")
    qc = np.asarray(q(density.centers), dtype=float)
    new = density.values * (1.0 + dt * (qc - expected_functional(density, q)))
    if np.any(new < 0):
        raise ContractViolation("Fisher-Rao step made the density negative; reduce dt")
    return density.with_values(new / (new.sum() * density.dx))


def project_flow_to_gaussian(before, after, dt):
    """Moment-matching rates ``(d mean/dt, d stddev/dt)`` between two densities."""
    check_positive(dt, "dt")
    return ((after.mean() - before.mean()) / dt, (after.stddev() - before.stddev()) / dt)


class DensityFlow(BaseEstimator):
    """Run a flow from an initial density and record moment trajectories.

    ``fit(q)`` integrates to ``t_final`` and stores ``times_``, ``means_``,
    ``stddevs_``, ``expected_q_`` and the final ``density_``.
    """

    def __init__(self, mode="wasserstein", t_final=1.0, dt=None, cfl=0.4, squash="identity",
                 scheme="van_leer", record_every=1, snapshot_every=0):
        self.mode = mode
        self.t_final = t_final
        self.dt = dt
        self.cfl = cfl
        self.squash = squash
        self.scheme = scheme
        self.record_every = record_every
        self.snapshot_every = snapshot_every

    def fit(self, density, q, dq=None):
        check_choice(self.mode, ("wasserstein", "fisher_rao"), "mode")
        check_positive(self.t_final, "t_final", strict=False)
        if self.mode == "wasserstein":
            velocity = face_velocity(density, q, self.squash, dq)
            dt = self.dt if self.dt else max_stable_dt(density, velocity, self.cfl)
        else:
            velocity = None
            qc = np.asarray(q(density.centers), dtype=float)
            spread = float(np.max(np.abs(qc - qc.mean()))) or 1.0
            dt = self.dt if self.dt else 0.25 / spread
        n_steps = 0 if self.t_final == 0 else max(1, int(np.ceil(self.t_final / min(dt, self.t_final))))
        dt = self.t_final / n_steps if n_steps else 0.0
        times, means, stds, eq, snaps = [], [], [], [], []

        def record(t, d):
            times.append(t)
            means.append(d.mean())
            stds.append(d.stddev())
            eq.append(expected_functional(d, q))

        current = density
        record(0.0, current)
        if self.snapshot_every:
            snaps.append(current.values)
        for i in range(1, n_steps + 1):
            if self.mode == "wasserstein":
                current = wasserstein_flow_step(current, q, dt, self.squash, scheme=self.scheme, velocity=velocity)
            else:
                current = fisher_rao_flow_step(current, q, dt)
            if i % self.record_every == 0 or i == n_steps:
                record(i * dt, current)
            if self.snapshot_every and (i % self.snapshot_every == 0 or i == n_steps):
                snaps.append(current.values)
        self.dt_ = dt
        self.n_steps_ = n_steps
        self.times_ = np.array(times)
        self.means_ = np.array(means)
        self.stddevs_ = np.array(stds)
        self.expected_q_ = np.array(eq)
        self.snapshots_ = np.array(snaps) if snaps else None
        self.density_ = current
        return self
