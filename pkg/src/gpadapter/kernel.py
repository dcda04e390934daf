"""Stationary covariance functions and their log-space hyperparameters.

Only the squared exponential kernel ``k(t, t') = a exp(-b (t - t')^2)`` is
provided. Every optimizer in the package sees the unconstrained triple
``(alpha, beta, gamma)`` with ``a = exp(alpha)``, ``b = exp(beta)`` and noise
variance ``exp(gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "GpParams",
    "Kernel",
    "SquaredExponential",
    "SE",
    "se_kernel",
    "se_kernel_grad",
    "build_kernel_matrix",
    "build_kernel_matrix_grads",
]


@dataclass(frozen=True)
class GpParams:
    """GP hyperparameters in unconstrained log form."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidArgumentError(f"GpParams.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    @property
    def amplitude(self) -> float:
        return math.exp(self.alpha)

    @property
    def inv_length(self) -> float:
        return math.exp(self.beta)

    @property
    def noise(self) -> float:
        return math.exp(self.gamma)

    # short aliases matching the usual notation
    a = amplitude
    b = inv_length

    @classmethod
    def from_natural(cls, amplitude: float, inv_length: float, noise: float) -> "GpParams":
        if min(amplitude, inv_length, noise) <= 0:
            raise InvalidArgumentError("natural GP parameters must be strictly positive")
        return cls(math.log(amplitude), math.log(inv_length), math.log(noise))

    @classmethod
    def from_array(cls, arr) -> "GpParams":
        alpha, beta, gamma = (float(x) for x in np.asarray(arr, dtype=float).ravel())
        return cls(alpha, beta, gamma)

    def to_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])

    def replace(self, **kwargs) -> "GpParams":
        values = {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}
        values.update(kwargs)
        return GpParams(**values)


class Kernel:
    """Interface for stationary kernels expressed as functions of the lag."""

    def from_lag(self, lag, params: GpParams):
        raise NotImplementedError

    def grad_from_lag(self, lag, params: GpParams):
        """Return ``(dk/dalpha, dk/dbeta)`` evaluated at ``lag``."""
        raise NotImplementedError

    def __call__(self, t1, t2, params: GpParams):
        return self.from_lag(np.subtract(t1, t2), params)

    def matrix(self, rows_at, cols_at, params: GpParams) -> np.ndarray:
        rows_at = _as_times(rows_at, "rows_at")
        cols_at = _as_times(cols_at, "cols_at")
        return self.from_lag(rows_at[:, None] - cols_at[None, :], params)

    def matrix_grads(self, rows_at, cols_at, params: GpParams):
        rows_at = _as_times(rows_at, "rows_at")
        cols_at = _as_times(cols_at, "cols_at")
        return self.grad_from_lag(rows_at[:, None] - cols_at[None, :], params)


class SquaredExponential(Kernel):
    def from_lag(self, lag, params: GpParams):
        lag = np.asarray(lag, dtype=float)
        return params.amplitude * np.exp(-params.inv_length * lag * lag)

    def grad_from_lag(self, lag, params: GpParams):
        lag = np.asarray(lag, dtype=float)
        k = self.from_lag(lag, params)
        # chain rule through a = e^alpha, b = e^beta
        return k, -params.inv_length * lag * lag * k


SE = SquaredExponential()


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("kernel inputs must be finite")


def _as_times(times, name) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(times, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty 1-d list of times")
    _check_finite(arr)
    return arr


def se_kernel(t1: float, t2: float, params: GpParams) -> float:
    _check_finite(t1, t2)
    return float(SE(t1, t2, params))


def se_kernel_grad(t1: float, t2: float, params: GpParams) -> tuple[float, float]:
    _check_finite(t1, t2)
    d_alpha, d_beta = SE.grad_from_lag(t1 - t2, params)
    return float(d_alpha), float(d_beta)


def build_kernel_matrix(rows_at, cols_at, params: GpParams, kernel: Kernel = SE) -> np.ndarray:
    """Dense matrix with entry ``(i, j) = k(rows_at[i], cols_at[j])``."""
    return kernel.matrix(rows_at, cols_at, params)


def build_kernel_matrix_grads(rows_at, cols_at, params: GpParams, kernel: Kernel = SE):
    """Element-wise derivatives of :func:`build_kernel_matrix` in (alpha, beta)."""
    return kernel.matrix_grads(rows_at, cols_at, params)
