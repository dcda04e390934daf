"""Symmetric PSD square roots and the Sylvester solve used for their derivatives."""

from __future__ import annotations

import numpy as np

from .errors import NumericBreakdownError

SYLVESTER_REG = 1e-10
SYLVESTER_MIN_DENOM = 1e-12


class SymmetricSqrt:
    """Eigendecomposition-backed square root of a symmetric PSD matrix.

    Negative eigenvalues, and positive ones at roundoff level, are treated as
    zero. ``noise`` raises that level to a known absolute perturbation of the
    matrix. With ``drop_null`` the derivative is taken as zero on pairs of
    zeroed directions, where the root is not differentiable; otherwise they
    are regularized.
    """

    def __init__(
        self,
        matrix: np.ndarray,
        check_tol: float | None = None,
        noise: float = 0.0,
        drop_null: bool = False,
    ):
        matrix = np.asarray(matrix, dtype=float)
        sym = 0.5 * (matrix + matrix.T)
        eigvals, eigvecs = np.linalg.eigh(sym)
        if check_tol is not None and eigvals.size:
            scale = max(np.abs(eigvals).max(), np.finfo(float).tiny)
            if eigvals.min() < -check_tol * scale:
                raise NumericBreakdownError(
                    "matrix is not positive semidefinite",
                    min_eigenvalue=float(eigvals.min()),
                    max_abs_eigenvalue=float(scale),
                )
        self.eigvals = eigvals
        self.eigvecs = eigvecs
        # eigenvalues at roundoff level relative to the largest are zero
        floor = eigvals.size * np.finfo(float).eps * (np.abs(eigvals).max() if eigvals.size else 0.0)
        zero = eigvals <= max(floor, noise)
        self.zero = zero
        self.drop_null = drop_null
        self.clamped = int(np.count_nonzero(zero))
        self.root_eigvals = np.where(zero, 0.0, np.sqrt(np.maximum(eigvals, 0.0)))

    @property
    def root(self) -> np.ndarray:
        q = self.eigvecs
        return (q * self.root_eigvals) @ q.T

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``root @ x`` without forming the root."""
        q = self.eigvecs
        coeffs = q.T @ x
        if coeffs.ndim == 1:
            return q @ (self.root_eigvals * coeffs)
        return q @ (self.root_eigvals[:, None] * coeffs)

    def _denominators(self):
        lam = self.root_eigvals
        if self.clamped and self.drop_null:
            denom = lam[:, None] + lam[None, :]
            denom[np.ix_(self.zero, self.zero)] = np.inf
            return denom
        if self.clamped:
            lam = lam + SYLVESTER_REG
        denom = lam[:, None] + lam[None, :]
        if denom.min() < SYLVESTER_MIN_DENOM:
            raise NumericBreakdownError(
                "Sylvester system is singular",
                root_eigenvalues=lam.copy(),
            )
        return denom

    def sylvester(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``R X + X R = rhs`` for X where R is the square root.

        Works in the eigenbasis of R, where the system is diagonal. The map
        is self-adjoint, so the same call also pulls gradients back from the
        root to the matrix.
        """
        q = self.eigvecs
        tilde = q.T @ rhs @ q
        return q @ (tilde / self._denominators()) @ q.T

    def sylvester_outer(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        """:meth:`sylvester` for ``rhs = left @ right.T`` given in factored form."""
        q = self.eigvecs
        tilde = (q.T @ left) @ (q.T @ right).T
        return q @ (tilde / self._denominators()) @ q.T
