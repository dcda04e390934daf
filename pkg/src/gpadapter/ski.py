"""Structured kernel interpolation (SKI) for GP posteriors.

A stationary kernel matrix is approximated as ``W_a K_uu W_b^T`` where ``u``
is an evenly spaced inducing grid, ``K_uu`` is symmetric Toeplitz (stored as
its first column and applied by FFT) and each row of the sparse ``W``
holds the four Keys cubic convolution weights of one target time. With
``A = W_t K_uu W_t^T + noise I``:

    mean       ~ W_x K_uu W_t^T A^{-1} v
    cov @ d    ~ W_x K_uu W_x^T d - W_x K_uu W_t^T A^{-1} W_t K_uu W_x^T d

Solves against A go through (block) conjugate gradient, so no dense n x n
or m x m matrix is ever formed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .errors import InvalidArgumentError
from .exact_gp import TimeSeries
from .kernel import SE, GpParams, Kernel
from .krylov import CG_MAX_ITER, CG_TOL, block_conjugate_gradient, conjugate_gradient

__all__ = [
    "InducingGrid",
    "SparseInterpMatrix",
    "ToeplitzColumn",
    "SkiOperator",
    "keys_kernel",
    "cubic_weights",
    "interp_matrix",
    "toeplitz_matvec",
    "ski_regularized_matvec",
    "ski_posterior_mean",
    "ski_cov_matvec",
    "ski_mean_grad",
    "ski_cov_matvec_grad",
    "ski_mean_tangents",
    "ski_cov_matvec_tangents",
]

KEYS_A = -0.5


def keys_kernel(x):
    """Keys cubic convolution kernel with a = -1/2."""
    x = np.abs(np.asarray(x, dtype=float))
    a = KEYS_A
    inner = ((a + 2) * x - (a + 3)) * x * x + 1
    outer = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, inner, np.where(x < 2, outer, 0.0))


@dataclass(frozen=True)
class InducingGrid:
    start: float
    spacing: float
    m: int

    def __post_init__(self):
        if self.m < 4:
            raise InvalidArgumentError("an inducing grid needs at least 4 points")
        if not self.spacing > 0:
            raise InvalidArgumentError("grid spacing must be positive")

    @classmethod
    def covering(cls, *time_arrays, m: int) -> "InducingGrid":
        """Grid with one spacing of margin beyond all given times."""
        if m < 4:
            raise InvalidArgumentError("an inducing grid needs at least 4 points")
        lo = min(float(np.min(t)) for t in time_arrays)
        hi = max(float(np.max(t)) for t in time_arrays)
        if hi <= lo:
            hi = lo + 1.0
        spacing = (hi - lo) / (m - 3)
        return cls(lo - spacing, spacing, int(m))

    @property
    def points(self) -> np.ndarray:
        return self.start + self.spacing * np.arange(self.m)


@dataclass(frozen=True)
class SparseInterpMatrix:
    """Rows of 4 cubic weights; ``matrix`` is the CSR form used for products."""

    indices: np.ndarray  # (p, 4)
    weights: np.ndarray  # (p, 4)
    m: int
    matrix: scipy.sparse.csr_matrix

    def __post_init__(self):
        # W^T in CSR so transpose products skip a format conversion per call
        object.__setattr__(self, "_transpose", self.matrix.T.tocsr())

    @property
    def shape(self):
        return (self.indices.shape[0], self.m)

    def __matmul__(self, other):
        return self.matrix @ other

    def rmatmul(self, other):
        """``W^T @ other``."""
        return self._transpose @ other

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def _locate(targets: np.ndarray, grid: InducingGrid):
    pos = (targets - grid.start) / grid.spacing
    # interior band [u_2, u_{m-1}] in 1-based terms, with roundoff slack
    slack = 1e-9
    bad = (pos < 1 - slack) | (pos > grid.m - 2 + slack) | ~np.isfinite(pos)
    if np.any(bad):
        raise InvalidArgumentError(
            f"target times {targets[bad][:5]} fall outside the interior of the inducing grid"
        )
    cell = np.clip(np.floor(pos), 1, grid.m - 3).astype(np.int64)
    offset = pos - cell
    return cell, offset


def cubic_weights(target: float, grid: InducingGrid):
    """Four grid indices and Keys weights interpolating at ``target``."""
    cell, s = _locate(np.atleast_1d(np.asarray(target, dtype=float)), grid)
    idx = cell[0] + np.arange(-1, 3)
    w = keys_kernel(np.array([s[0] + 1, s[0], 1 - s[0], 2 - s[0]]))
    return idx, w


def interp_matrix(targets, grid: InducingGrid) -> SparseInterpMatrix:
    """Sparse interpolation matrix; depends only on the targets and the grid."""
    targets = np.asarray(targets, dtype=float).ravel()
    cell, s = _locate(targets, grid)
    idx = cell[:, None] + np.arange(-1, 3)[None, :]
    s = s[:, None]
    w = keys_kernel(np.hstack([s + 1, s, 1 - s, 2 - s]))
    p = targets.size
    mat = scipy.sparse.csr_matrix(
        (w.ravel(), idx.ravel(), np.arange(0, 4 * p + 1, 4)), shape=(p, grid.m)
    )
    return SparseInterpMatrix(idx, w, grid.m, mat)


def _fft_length(m: int) -> int:
    return 1 << int(np.ceil(np.log2(2 * m)))


class ToeplitzColumn:
    """Symmetric Toeplitz matrix stored by its first column."""

    def __init__(self, first_col):
        self.first_col = np.asarray(first_col, dtype=float).ravel()
        if self.first_col.size == 0:
            raise InvalidArgumentError("Toeplitz column must be non-empty")
        self.m = self.first_col.size
        self.n_fft = _fft_length(self.m)
        circ = np.zeros(self.n_fft)
        circ[: self.m] = self.first_col
        if self.m > 1:
            circ[-(self.m - 1) :] = self.first_col[:0:-1]
        self.spectrum = np.fft.rfft(circ)

    def matvec(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape[0] != self.m:
            raise InvalidArgumentError(f"vector has length {vec.shape[0]}, expected {self.m}")
        spec = self.spectrum if vec.ndim == 1 else self.spectrum[:, None]
        out = np.fft.irfft(spec * np.fft.rfft(vec, n=self.n_fft, axis=0), n=self.n_fft, axis=0)
        return out[: self.m]

    __matmul__ = matvec


def toeplitz_matvec(col: ToeplitzColumn, vec) -> np.ndarray:
    """Symmetric Toeplitz times vector via circulant embedding and FFT."""
    if not isinstance(col, ToeplitzColumn):
        col = ToeplitzColumn(col)
    return col.matvec(vec)


def _array_key(arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    return arr.shape, hashlib.blake2b(arr.tobytes(), digest_size=16).digest()


class SkiOperator:
    """SKI machinery for one series under fixed GP parameters.

    Holds the grid, the sparse ``W_t`` / ``W_x`` and the Toeplitz ``K_uu``
    plus its two hyperparameter derivatives, all O(n + d + m) storage.
    Forward CG solutions are cached so gradient calls can reuse them; the
    cache makes a single operator unsafe for concurrent forward/backward
    pairs.
    """

    def __init__(
        self,
        series: TimeSeries,
        ref_times,
        m: int,
        params: GpParams,
        kernel: Kernel = SE,
        grid: InducingGrid | None = None,
        cg_tol: float = CG_TOL,
        cg_max_iter: int = CG_MAX_ITER,
    ):
        ref_times = np.asarray(ref_times, dtype=float).ravel()
        if grid is None:
            grid = InducingGrid.covering(series.times, ref_times, m=m)
        self.grid = grid
        self.series = series
        self.values = series.values
        self.ref_times = ref_times
        self.params = params
        self.kernel = kernel
        self.w_t = interp_matrix(series.times, grid)
        self.w_x = interp_matrix(ref_times, grid)
        lags = grid.spacing * np.arange(grid.m)
        d_alpha, d_beta = kernel.grad_from_lag(lags, params)
        self.k_uu = ToeplitzColumn(kernel.from_lag(lags, params))
        self.dk_uu = (ToeplitzColumn(d_alpha), ToeplitzColumn(d_beta))
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        self._mean_solve = None
        self._cov_solves = {}

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def m(self) -> int:
        return self.grid.m

    def clear_cache(self):
        self._mean_solve = None
        self._cov_solves.clear()

    def regularized_matvec(self, vec):
        w = self.w_t
        return w @ self.k_uu.matvec(w.rmatmul(vec)) + self.params.noise * vec

    def solve(self, rhs):
        """``A^{-1} rhs`` by (block) conjugate gradient."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return conjugate_gradient(self.regularized_matvec, rhs, self.cg_tol, self.cg_max_iter)
        if rhs.shape[1] == 1:
            # one column: plain CG avoids the per-iteration block orthogonalization
            return conjugate_gradient(self.regularized_matvec, rhs[:, 0], self.cg_tol, self.cg_max_iter)[:, None]
        return block_conjugate_gradient(self.regularized_matvec, rhs, self.cg_tol, self.cg_max_iter)

    def mean_solve(self) -> np.ndarray:
        if self._mean_solve is None:
            self._mean_solve = self.solve(self.values)
        return self._mean_solve

    def cov_solve(self, ref_w: SparseInterpMatrix, dvec):
        """``A^{-1} W_t K_uu W_x^T dvec``, cached by the value of dvec."""
        key = (id(ref_w), _array_key(dvec))
        hit = self._cov_solves.get(key)
        if hit is None:
            hit = self.solve(self.w_t @ self.k_uu.matvec(ref_w.rmatmul(dvec)))
            self._cov_solves[key] = hit
        return hit


def _ref(op: SkiOperator, ref_w):
    return op.w_x if ref_w is None else ref_w


def _check_len(vec, expected, what):
    vec = np.asarray(vec, dtype=float)
    if vec.shape[0] != expected:
        raise InvalidArgumentError(f"{what} has length {vec.shape[0]}, expected {expected}")
    return vec


def ski_regularized_matvec(op: SkiOperator, vec) -> np.ndarray:
    """``(W_t K_uu W_t^T + noise I) vec``."""
    return op.regularized_matvec(_check_len(vec, op.n, "vec"))


def ski_posterior_mean(op: SkiOperator, ref_w: SparseInterpMatrix | None = None) -> np.ndarray:
    ref_w = _ref(op, ref_w)
    return ref_w @ op.k_uu.matvec(op.w_t.rmatmul(op.mean_solve()))


def ski_cov_matvec(op: SkiOperator, ref_w: SparseInterpMatrix | None, dvec) -> np.ndarray:
    """Approximate posterior covariance times ``dvec`` (vector or d x r block)."""
    ref_w = _ref(op, ref_w)
    dvec = _check_len(dvec, ref_w.shape[0], "dvec")
    gamma = op.k_uu.matvec(ref_w.rmatmul(dvec))
    delta = op.cov_solve(ref_w, dvec)
    return ref_w @ (gamma - op.k_uu.matvec(op.w_t.rmatmul(delta)))


def ski_mean_grad(op: SkiOperator, ref_w: SparseInterpMatrix | None, upstream) -> np.ndarray:
    """``upstream^T d(mean)/d(alpha, beta, gamma)``.

    Reverse-mode form of the mean derivative: one extra CG solve shared by
    all three parameters and one Toeplitz product per kernel parameter.
    """
    ref_w = _ref(op, ref_w)
    g = _check_len(upstream, ref_w.shape[0], "upstream")
    if not np.any(g):
        return np.zeros(3)
    a = op.mean_solve()
    h = ref_w.rmatmul(g)
    c = op.solve(op.w_t @ op.k_uu.matvec(h))
    left = h - op.w_t.rmatmul(c)
    right = op.w_t.rmatmul(a)
    grad = np.empty(3)
    for i, dk in enumerate(op.dk_uu):
        grad[i] = left @ dk.matvec(right)
    # d/d gamma = noise * d/d noise
    grad[2] = -op.params.noise * (c @ a)
    return grad


def ski_cov_matvec_grad(op: SkiOperator, ref_w: SparseInterpMatrix | None, dvec, upstream):
    """Pullback of ``cov @ dvec`` given ``upstream`` of the same shape.

    Returns ``(grad, dvec_bar)`` where ``grad`` contracts upstream with the
    derivative in (alpha, beta, gamma), summed over columns for blocks, and
    ``dvec_bar = cov @ upstream`` (the operator is symmetric). Reuses the
    forward solve for ``dvec`` when it is cached.
    """
    ref_w = _ref(op, ref_w)
    dvec = _check_len(dvec, ref_w.shape[0], "dvec")
    g = _check_len(upstream, ref_w.shape[0], "upstream")
    if dvec.shape != g.shape:
        raise InvalidArgumentError("dvec and upstream must have the same shape")
    k_uu, w_t = op.k_uu, op.w_t
    alpha = ref_w.rmatmul(dvec)
    delta = op.cov_solve(ref_w, dvec)
    h = ref_w.rmatmul(g)
    k_h = k_uu.matvec(h)
    c = op.solve(w_t @ k_h)
    left = h - w_t.rmatmul(c)
    right = alpha - w_t.rmatmul(delta)
    grad = np.empty(3)
    for i, dk in enumerate(op.dk_uu):
        grad[i] = np.vdot(left, dk.matvec(right))
    grad[2] = op.params.noise * np.vdot(c, delta)
    dvec_bar = ref_w @ (k_h - k_uu.matvec(w_t.rmatmul(c)))
    return grad, dvec_bar


def ski_mean_tangents(op: SkiOperator, ref_w: SparseInterpMatrix | None = None) -> np.ndarray:
    """Forward-mode ``d(mean)/d theta`` rows for (alpha, beta, gamma).

    Uses the intermediates a = A^{-1} v, b = dK W_t^T a and
    c = K W_t^T A^{-1} W_t b, giving ``W_x (b - c)``; one CG per parameter.
    """
    ref_w = _ref(op, ref_w)
    k_uu, w_t = op.k_uu, op.w_t
    a = op.mean_solve()
    out = np.empty((3, ref_w.shape[0]))
    for i, dk in enumerate(op.dk_uu):
        b = dk.matvec(w_t.rmatmul(a))
        c = k_uu.matvec(w_t.rmatmul(op.solve(w_t @ b)))
        out[i] = ref_w @ (b - c)
    noise_deriv = -(ref_w @ k_uu.matvec(w_t.rmatmul(op.solve(a))))
    out[2] = op.params.noise * noise_deriv
    return out


def ski_cov_matvec_tangents(op: SkiOperator, ref_w: SparseInterpMatrix | None, dvec) -> np.ndarray:
    """Forward-mode ``d(cov @ dvec)/d theta`` rows for (alpha, beta, gamma).

    Shared intermediates: alpha = W_x^T d, gamma = K alpha,
    delta = A^{-1} W_t gamma. Per kernel parameter: beta = dK alpha,
    zeta = dK W_t^T delta, eta = K W_t^T A^{-1} W_t (zeta - beta) and the
    result ``W_x (beta - zeta + eta)``. The noise row is
    ``noise * W_x K W_t^T A^{-1} delta``.
    """
    ref_w = _ref(op, ref_w)
    dvec = _check_len(dvec, ref_w.shape[0], "dvec")
    k_uu, w_t = op.k_uu, op.w_t
    alpha = ref_w.rmatmul(dvec)
    delta = op.cov_solve(ref_w, dvec)
    wt_delta = w_t.rmatmul(delta)
    out = np.empty((3,) + dvec.shape)
    for i, dk in enumerate(op.dk_uu):
        beta = dk.matvec(alpha)
        zeta = dk.matvec(wt_delta)
        eta = k_uu.matvec(w_t.rmatmul(op.solve(w_t @ (zeta - beta))))
        out[i] = ref_w @ (beta - zeta + eta)
    out[2] = op.params.noise * (ref_w @ k_uu.matvec(w_t.rmatmul(op.solve(delta))))
    return out
