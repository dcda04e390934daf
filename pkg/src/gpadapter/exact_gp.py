"""Dense GP posterior inference at reference times.

Everything here costs O(n^3 + n^2 d + n d^2) and serves two purposes: the
exact mode of the adapter, and the brute-force reference the structured
approximations are checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, NumericBreakdownError, UnsupportedModeError
from .kernel import SE, GpParams, Kernel
from .linalg import SymmetricSqrt

__all__ = [
    "TimeSeries",
    "GaussianRepr",
    "ExactPosterior",
    "exact_posterior",
    "exact_sample",
    "log_marginal_likelihood",
    "log_marginal_likelihood_grad",
    "exact_posterior_grad",
]


@dataclass(frozen=True)
class TimeSeries:
    """An irregularly sampled series: strictly increasing times, matching values."""

    times: np.ndarray
    values: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if times.size == 0:
            raise InvalidArgumentError("a time series needs at least one observation")
        if times.shape != values.shape:
            raise InvalidArgumentError(
                f"times and values differ in length ({times.size} vs {values.size})"
            )
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise InvalidArgumentError("time series entries must be finite")
        if np.any(np.diff(times) <= 0):
            raise InvalidArgumentError("times must be strictly increasing")
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self):
        return self.times.size

    @classmethod
    def from_unsorted(cls, times, values, label=None) -> "TimeSeries":
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        order = np.argsort(times, kind="stable")
        return cls(times[order], values[order], label)


MatvecOperator = Callable[[np.ndarray], np.ndarray]


@dataclass
class GaussianRepr:
    """Posterior mean plus covariance at the reference times.

    ``cov`` is a dense matrix in exact mode or a matvec callable in SKI mode.
    """

    mean: np.ndarray
    cov: Union[np.ndarray, MatvecOperator]
    ref_times: np.ndarray
    _sqrt: Optional[SymmetricSqrt] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.ref_times = np.asarray(self.ref_times, dtype=float)
        if self.mean.shape != self.ref_times.shape:
            raise InvalidArgumentError("mean and reference times must have the same length")
        if isinstance(self.cov, np.ndarray) and self.cov.shape != (self.dim, self.dim):
            raise InvalidArgumentError("dense covariance has the wrong shape")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_dense(self) -> bool:
        return isinstance(self.cov, np.ndarray)

    def cov_matvec(self, vecs: np.ndarray) -> np.ndarray:
        if self.is_dense:
            return self.cov @ vecs
        return self.cov(vecs)

    @property
    def sqrt(self) -> SymmetricSqrt:
        if not self.is_dense:
            raise UnsupportedModeError("square root requires a dense covariance")
        if self._sqrt is None:
            self._sqrt = SymmetricSqrt(self.cov)
        return self._sqrt


def _cholesky(mat: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.cholesky(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        diag = np.diag(mat)
        raise NumericBreakdownError(
            "Cholesky factorization of the regularized Gram matrix failed",
            size=mat.shape[0],
            min_diag=float(diag.min()),
            max_diag=float(diag.max()),
            cond_estimate=float(np.linalg.cond(mat)),
        ) from exc


class ExactPosterior:
    """Cholesky-factored dense posterior with cached intermediates.

    Keeps what the reverse pass needs: the Cholesky factor L of
    ``K_tt + noise I``, ``L^{-1} K_tx`` and ``(K_tt + noise I)^{-1} v``.
    """

    def __init__(self, series: TimeSeries, ref_times, params: GpParams, kernel: Kernel = SE):
        ref_times = np.asarray(ref_times, dtype=float).ravel()
        if ref_times.size == 0:
            raise InvalidArgumentError("need at least one reference time")
        self.series = series
        self.ref_times = ref_times
        self.params = params
        self.kernel = kernel
        t = series.times
        k_tt = kernel.matrix(t, t, params)
        k_tt[np.diag_indices_from(k_tt)] += params.noise
        self.chol = _cholesky(k_tt)
        self.k_xt = kernel.matrix(ref_times, t, params)
        self.solved_values = scipy.linalg.cho_solve((self.chol, True), series.values, check_finite=False)
        self.half_solve = scipy.linalg.solve_triangular(self.chol, self.k_xt.T, lower=True, check_finite=False)
        self.mean = self.k_xt @ self.solved_values
        self._cov = None
        self._sqrt = None

    @property
    def cov(self) -> np.ndarray:
        if self._cov is None:
            v = self.half_solve
            cov = self.kernel.matrix(self.ref_times, self.ref_times, self.params) - v.T @ v
            self._cov = 0.5 * (cov + cov.T)
        return self._cov

    @property
    def sqrt(self) -> SymmetricSqrt:
        if self._sqrt is None:
            self._sqrt = SymmetricSqrt(self.cov)
        return self._sqrt

    def to_repr(self) -> GaussianRepr:
        return GaussianRepr(self.mean, self.cov, self.ref_times, _sqrt=self._sqrt)

    def sample(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        root_xi = self.sqrt.apply(xi)
        return root_xi + (self.mean if xi.ndim == 1 else self.mean[:, None])

    def _full_solve(self) -> np.ndarray:
        """``(K_tt + noise I)^{-1} K_tx``, n x d."""
        return scipy.linalg.solve_triangular(self.chol, self.half_solve, lower=True, trans="T", check_finite=False)

    def _derivative_blocks(self):
        x, t, p, k = self.ref_times, self.series.times, self.params, self.kernel
        dxx = k.matrix_grads(x, x, p)
        dxt = k.matrix_grads(x, t, p)
        dtt = k.matrix_grads(t, t, p)
        return dxx, dxt, dtt

    def tangents(self):
        """Per-parameter ``(d mean, d cov)`` in (alpha, beta, gamma)."""
        dxx, dxt, dtt = self._derivative_blocks()
        a = self.solved_values
        solve = self._full_solve()
        noise = self.params.noise
        out = []
        for i in range(3):
            if i < 2:
                d_kxx, d_kxt, d_a = dxx[i], dxt[i], dtt[i]
                d_mean = d_kxt @ a - solve.T @ (d_a @ a)
                cross = d_kxt @ solve
                d_cov = d_kxx - cross - cross.T + solve.T @ d_a @ solve
            else:
                d_mean = -noise * (solve.T @ a)
                d_cov = noise * (solve.T @ solve)
            out.append((d_mean, 0.5 * (d_cov + d_cov.T)))
        return out

    def vjp(self, mean_bar: Optional[np.ndarray], cov_bar: Optional[np.ndarray]) -> np.ndarray:
        """Pull ``(mean_bar, cov_bar)`` back to (alpha, beta, gamma)."""
        grad = np.zeros(3)
        dxx, dxt, dtt = self._derivative_blocks()
        a = self.solved_values
        noise = self.params.noise
        if mean_bar is not None:
            mean_bar = np.asarray(mean_bar, dtype=float)
            # c = A^{-1} K_tx mean_bar
            c = scipy.linalg.cho_solve((self.chol, True), self.k_xt.T @ mean_bar, check_finite=False)
            for i in range(2):
                grad[i] += mean_bar @ (dxt[i] @ a) - c @ (dtt[i] @ a)
            grad[2] += -noise * (c @ a)
        if cov_bar is not None:
            sbar = 0.5 * (cov_bar + cov_bar.T)
            solve = self._full_solve()
            sp = sbar @ solve.T
            psp = solve @ sp
            for i in range(2):
                grad[i] += np.vdot(sbar, dxx[i]) - 2.0 * np.vdot(sp, dxt[i]) + np.vdot(psp, dtt[i])
            grad[2] += noise * np.trace(psp)
        return grad


def exact_posterior(series: TimeSeries, ref_times, params: GpParams) -> GaussianRepr:
    """Posterior mean and dense covariance at ``ref_times``."""
    return ExactPosterior(series, ref_times, params).to_repr()


def exact_sample(repr: GaussianRepr, xi: np.ndarray) -> np.ndarray:
    """``mean + cov^{1/2} xi`` with the symmetric root. ``xi`` may be d or d x S."""
    if not repr.is_dense:
        raise UnsupportedModeError("exact sampling needs a dense covariance")
    xi = np.asarray(xi, dtype=float)
    if xi.shape[0] != repr.dim:
        raise InvalidArgumentError(f"xi has length {xi.shape[0]}, expected {repr.dim}")
    out = repr.sqrt.apply(xi)
    return out + (repr.mean if xi.ndim == 1 else repr.mean[:, None])


def _regularized_gram(series: TimeSeries, params: GpParams, kernel: Kernel = SE) -> np.ndarray:
    t = series.times
    gram = kernel.matrix(t, t, params)
    gram[np.diag_indices_from(gram)] += params.noise
    return gram


def log_marginal_likelihood(series: TimeSeries, params: GpParams) -> float:
    chol = _cholesky(_regularized_gram(series, params))
    v = series.values
    half = scipy.linalg.solve_triangular(chol, v, lower=True, check_finite=False)
    n = v.size
    return float(-0.5 * half @ half - np.log(np.diag(chol)).sum() - 0.5 * n * math.log(2 * math.pi))


def log_marginal_likelihood_grad(series: TimeSeries, params: GpParams) -> np.ndarray:
    """Gradient in (alpha, beta, gamma) via the trace identity.

    ``dL/dtheta = 1/2 a^T dA a - 1/2 tr(A^{-1} dA)`` with ``a = A^{-1} v``.
    """
    t = series.times
    chol = _cholesky(_regularized_gram(series, params))
    a = scipy.linalg.cho_solve((chol, True), series.values, check_finite=False)
    a_inv = scipy.linalg.cho_solve((chol, True), np.eye(t.size), check_finite=False)
    inner = np.outer(a, a) - a_inv
    d_alpha, d_beta = SE.matrix_grads(t, t, params)
    return 0.5 * np.array(
        [
            np.vdot(inner, d_alpha),
            np.vdot(inner, d_beta),
            params.noise * np.trace(inner),
        ]
    )


def exact_posterior_grad(series: TimeSeries, ref_times, params: GpParams, xi: np.ndarray):
    """Exact ``d(mean + cov^{1/2} xi)/d theta`` for theta in (alpha, beta, gamma).

    Returns an array of shape ``(3,) + xi.shape`` plus a diagnostics dict
    noting whether the square root had to be regularized.
    """
    post = ExactPosterior(series, ref_times, params)
    xi = np.asarray(xi, dtype=float)
    root = post.sqrt
    out = []
    for d_mean, d_cov in post.tangents():
        d_root = root.sylvester(d_cov)
        d_z = d_root @ xi
        out.append(d_z + (d_mean if xi.ndim == 1 else d_mean[:, None]))
    return np.stack(out), {"regularized": bool(root.clamped)}
