"""Input checking shared by the estimators and the numerical routines."""
from __future__ import annotations

import numbers

import numpy as np


class ContractViolation(ValueError):
    """Raised when an argument breaks a documented precondition."""


class NonFiniteError(FloatingPointError):
    """A gradient or loss became NaN/inf.

    ``report`` carries whatever diagnostics were available at the time
    (an :class:`~wpolab.wpo.UpdateReport` or a plain dict).
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def as_float_array(x, name="array", ndim=None, allow_empty=False):
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim not in np.atleast_1d(ndim):
        raise ContractViolation(f"{name} must have ndim in {ndim}, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ContractViolation(f"{name} is empty")
    return arr


def check_finite(x, name="array"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    return arr


def check_last_dim(x, n, name="action"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != n:
        raise ContractViolation(
            f"{name} has trailing dimension {arr.shape[-1] if arr.ndim else 'scalar'}, expected {n}"
        )
    return arr


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real):
        raise ContractViolation(f"{name} must be a real number, got {type(value).__name__}")
    if strict and not value > 0:
        raise ContractViolation(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise ContractViolation(f"{name} must be >= 0, got {value}")
    return value


def check_choice(value, options, name):
    if value not in options:
        raise ContractViolation(
            f"{name}={value!r} is not valid; choose one of {', '.join(map(str, options))}"
        )
    return value


def check_rng(rng):
    """Accept a Generator, an int seed or None and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    raise ContractViolation(f"cannot build a random generator from {rng!r}")
