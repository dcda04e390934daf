"""Krylov solvers: (block) conjugate gradient and (block) Lanczos square roots.

The Lanczos routines approximate ``Sigma^{1/2} Xi`` as ``D H^{1/2} E_1 R``
where ``Xi = Q_1 R`` seeds the first block, D collects the orthonormal
Krylov blocks and H is the (block) tridiagonal projection ``D^T Sigma D``.
With a single column this is the textbook ``||xi|| D H^{1/2} e_1``.

The forward pass keeps every intermediate on a :class:`LanczosRecord` so
that :func:`lanczos_backprop` can run reverse mode through the recursion,
including the reorthogonalization sweeps and the QR normalizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, InvalidStateError, NumericBreakdownError
from .linalg import SymmetricSqrt

__all__ = [
    "conjugate_gradient",
    "block_conjugate_gradient",
    "LanczosRecord",
    "TridiagSqrt",
    "lanczos_sqrt_vec",
    "block_lanczos_sqrt",
    "tridiag_sqrt",
    "sylvester_sqrt_grad",
    "lanczos_backprop",
    "as_matvec",
]

CG_TOL = 1e-10
CG_MAX_ITER = 1000
BREAKDOWN_TOL = 1e-12
REORTH_PASSES = 2
ASYMMETRY_TOL = 1e-6  # relative to the largest operator output block so far
# a new direction smaller than this times ||Sigma Q_j|| is mostly roundoff from
# the orthogonalization; normalizing it would cost ~eps / DEFLATION_RTOL orthogonality
DEFLATION_RTOL = 1e-7

Matvec = Callable[[np.ndarray], np.ndarray]
MatvecGrad = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def as_matvec(op) -> Matvec:
    if isinstance(op, np.ndarray):
        return lambda x: op @ x
    return op


# --------------------------------------------------------------------------
# conjugate gradient
# --------------------------------------------------------------------------


def conjugate_gradient(matvec, rhs, tol: float = CG_TOL, max_iter: int = CG_MAX_ITER) -> np.ndarray:
    """Solve ``A x = rhs`` for symmetric positive definite A.

    Stops once ``||A x - rhs|| <= tol ||rhs||``; the recursive residual is
    re-checked against a true residual before returning.
    """
    matvec = as_matvec(matvec)
    b = np.asarray(rhs, dtype=float)
    b_norm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return x
    target = tol * b_norm
    r = b.copy()
    it = 0
    while True:
        p = r.copy()
        rr = r @ r
        while it < max_iter:
            if np.sqrt(rr) <= target:
                break
            ap = matvec(p)
            pap = p @ ap
            if pap <= 0.0:
                raise NumericBreakdownError(
                    "operator is not positive definite", iteration=it, curvature=float(pap)
                )
            step = rr / pap
            x += step * p
            r -= step * ap
            rr_new = r @ r
            p = r + (rr_new / rr) * p
            rr = rr_new
            it += 1
        true_r = b - matvec(x)
        res = np.linalg.norm(true_r)
        if res <= target:
            return x
        if it >= max_iter:
            raise NumericBreakdownError(
                f"conjugate gradient did not converge in {max_iter} iterations",
                residual=float(res / b_norm),
                iterations=it,
            )
        # recursive residual drifted; restart from the true one
        r = true_r


def _orth_deflate(block: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the numerically independent column span.

    Columns are normalized first so the rank decision is scale free.
    """
    norms = np.linalg.norm(block, axis=0)
    block = block[:, norms > 0] / norms[norms > 0]
    if block.shape[1] == 0:
        return block
    q, r, _ = scipy.linalg.qr(block, mode="economic", pivoting=True, check_finite=False)
    rank = int(np.count_nonzero(np.abs(np.diag(r)) > BREAKDOWN_TOL))
    return q[:, :rank]


def block_conjugate_gradient(
    matvec, rhs_block, tol: float = CG_TOL, max_iter: int = CG_MAX_ITER
) -> np.ndarray:
    """Solve ``A X = B`` for all columns of B simultaneously.

    Search directions are kept orthonormal and deflated when the block
    becomes rank deficient (duplicate or converged right-hand sides), so
    dependent columns never stall the iteration.
    """
    matvec = as_matvec(matvec)
    b = np.asarray(rhs_block, dtype=float)
    if b.ndim != 2:
        raise InvalidArgumentError("rhs_block must be a d x S matrix")
    norms = np.linalg.norm(b, axis=0)
    x = np.zeros_like(b)
    targets = tol * norms
    r = b.copy()
    it = 0
    for _restart in range(max_iter):
        active = np.linalg.norm(r, axis=0) > targets
        p = _orth_deflate(r[:, active])
        while it < max_iter and p.shape[1] > 0 and active.any():
            ap = matvec(p)
            pap = p.T @ ap
            try:
                chol = scipy.linalg.cho_factor(0.5 * (pap + pap.T), check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NumericBreakdownError(
                    "block CG curvature matrix is not positive definite", iteration=it
                ) from exc
            step = scipy.linalg.cho_solve(chol, p.T @ r[:, active], check_finite=False)
            x[:, active] += p @ step
            r[:, active] -= ap @ step
            it += 1
            still = np.linalg.norm(r[:, active], axis=0) > targets[active]
            if not still.any():
                active[:] = False
                break
            idx = np.flatnonzero(active)
            active[idx[~still]] = False
            r_act = r[:, active]
            beta = -scipy.linalg.cho_solve(chol, ap.T @ r_act, check_finite=False)
            p = _orth_deflate(r_act + p @ beta)
        true_r = b - matvec(x) if b.shape[1] else b
        res = np.linalg.norm(true_r, axis=0)
        if np.all(res <= targets):
            return x
        if it >= max_iter:
            raise NumericBreakdownError(
                f"block conjugate gradient did not converge in {max_iter} iterations",
                residual=float(np.max(res / np.where(norms > 0, norms, 1.0))),
                iterations=it,
            )
        r = true_r
    raise NumericBreakdownError("block conjugate gradient kept restarting", iterations=it)


# --------------------------------------------------------------------------
# tridiagonal square roots and their Sylvester derivative
# --------------------------------------------------------------------------


@dataclass
class TridiagSqrt:
    H: np.ndarray
    root: np.ndarray
    decomposition: SymmetricSqrt = field(repr=False)


def tridiag_sqrt(H: np.ndarray, noise: float = 0.0, drop_null: bool = False) -> TridiagSqrt:
    """Symmetric square root of a small symmetric (block) tridiagonal matrix.

    Eigenvalues below ``-1e-6 ||H||`` mean the operator that produced H was
    not PSD and raise; smaller negatives are clamped to zero, as are
    eigenvalues below ``noise``. See :class:`SymmetricSqrt` for ``drop_null``.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise InvalidArgumentError("H must be square")
    if not np.allclose(H, H.T, rtol=0, atol=1e-10 * max(np.abs(H).max(), 1.0)):
        raise InvalidArgumentError("H must be symmetric")
    dec = SymmetricSqrt(H, check_tol=1e-6, noise=noise, drop_null=drop_null)
    return TridiagSqrt(H=H, root=dec.root, decomposition=dec)


def sylvester_sqrt_grad(Hroot: TridiagSqrt, dH: np.ndarray) -> np.ndarray:
    """Solve ``X H^{1/2} + H^{1/2} X = dH`` for the derivative X of the root."""
    return Hroot.decomposition.sylvester(np.asarray(dH, dtype=float))


# --------------------------------------------------------------------------
# Lanczos
# --------------------------------------------------------------------------


@dataclass
class _QRStep:
    q: np.ndarray
    r: np.ndarray
    keep: Optional[np.ndarray]  # None when no column was deflated


@dataclass
class _Step:
    y: np.ndarray  # Sigma Q_j
    reorth: list  # [(Z before pass, coefficients)]
    qr: Optional[_QRStep]
    z_final: Optional[np.ndarray] = None


@dataclass
class LanczosRecord:
    """Forward tape of a (block) Lanczos run.

    ``blocks`` are the orthonormal Krylov blocks, ``diag_blocks`` the
    diagonal blocks of H and ``offdiag_blocks[j]`` the block coupling
    ``blocks[j+1]`` to ``blocks[j]``. With one column these reduce to the
    scalar alpha_j / beta_{j+1} coefficients.
    """

    blocks: list
    diag_blocks: list
    offdiag_blocks: list
    seed_coeffs: np.ndarray
    hroot: TridiagSqrt
    steps: Optional[list] = field(default=None, repr=False)
    breakdown: bool = False

    @property
    def basis(self) -> np.ndarray:
        return np.hstack(self.blocks)

    @property
    def H(self) -> np.ndarray:
        return self.hroot.H

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def xi_norm(self) -> float:
        return float(np.linalg.norm(self.seed_coeffs))

    @property
    def alpha(self) -> np.ndarray:
        return np.array([blk[0, 0] for blk in self.diag_blocks])

    @property
    def beta(self) -> np.ndarray:
        return np.array([blk[0, 0] for blk in self.offdiag_blocks])

    def result(self) -> np.ndarray:
        r1 = self.blocks[0].shape[1]
        return self.basis @ (self.hroot.root[:, :r1] @ self.seed_coeffs)


def _assemble(diag_blocks, offdiag_blocks) -> np.ndarray:
    sizes = [blk.shape[0] for blk in diag_blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    H = np.zeros((offsets[-1], offsets[-1]))
    for j, blk in enumerate(diag_blocks):
        H[offsets[j] : offsets[j + 1], offsets[j] : offsets[j + 1]] = blk
    for j, blk in enumerate(offdiag_blocks):
        if j + 1 >= len(diag_blocks):
            break
        rows = slice(offsets[j + 1], offsets[j + 2])
        cols = slice(offsets[j], offsets[j + 1])
        H[rows, cols] = blk
        H[cols, rows] = blk.T
    return H


def _positive_qr(a: np.ndarray):
    q, r = np.linalg.qr(a)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def _deflating_qr(z: np.ndarray, abs_tol: float) -> _QRStep:
    """``z = Q B`` with Q orthonormal over the numerically independent columns."""
    if z.shape[1] == 1:
        nrm = float(np.linalg.norm(z))
        if nrm <= abs_tol:
            return _QRStep(np.zeros((z.shape[0], 0)), np.zeros((0, 0)), None)
        return _QRStep(z / nrm, np.array([[nrm]]), None)
    _, rp, piv = scipy.linalg.qr(z, mode="economic", pivoting=True, check_finite=False)
    rank = int(np.count_nonzero(np.abs(np.diag(rp)) > abs_tol))
    if rank == z.shape[1]:
        q, r = _positive_qr(z)
        return _QRStep(q, r, None)
    keep = piv[:rank]
    q, r = _positive_qr(z[:, keep])
    return _QRStep(q, r, keep)


def _qr_coeffs(step: _QRStep, z: np.ndarray) -> np.ndarray:
    if step.keep is None:
        return step.r
    return step.q.T @ z


def _copyltu(m: np.ndarray) -> np.ndarray:
    low = np.tril(m, -1)
    return low + low.T + np.diag(np.diag(m))


def _qr_backward(q, r, q_bar, r_bar) -> np.ndarray:
    """Adjoint of a thin QR ``A = QR`` with full column rank."""
    m = r @ r_bar.T - q_bar.T @ q
    rhs = q_bar + q @ _copyltu(m)
    return scipy.linalg.solve_triangular(r, rhs.T, lower=False, check_finite=False).T


def _lanczos(matvec, xi_block: np.ndarray, k: int, retain: bool = True) -> LanczosRecord:
    if k < 1:
        raise InvalidArgumentError("k must be at least 1")
    xi_block = np.asarray(xi_block, dtype=float)
    if xi_block.ndim != 2 or xi_block.shape[1] == 0:
        raise InvalidArgumentError("noise block must be d x S with S >= 1")
    if not np.all(np.isfinite(xi_block)):
        raise InvalidArgumentError("noise must be finite")
    matvec = as_matvec(matvec)
    xi_scale = float(np.linalg.norm(xi_block))
    if xi_scale == 0.0:
        raise InvalidArgumentError("xi must be non-zero")

    seed = _deflating_qr(xi_block, BREAKDOWN_TOL * xi_scale)
    if seed.keep is None:
        seed_coeffs = seed.r
    else:
        seed_coeffs = seed.q.T @ xi_block
    blocks = [seed.q]
    diag_blocks, offdiag_blocks, steps = [], [], []
    breakdown = False
    abs_tol = None
    y_scale = 0.0
    # deflated residual mass left out of H bounds how far its eigenvalues may
    # be off, so eigenvalues below it carry no information
    dropped = 0.0
    for j in range(k):
        qj = blocks[j]
        y = matvec(qj)
        if y.shape != qj.shape:
            raise InvalidArgumentError(f"matvec returned shape {y.shape}, expected {qj.shape}")
        aj = qj.T @ y
        y_scale = max(y_scale, float(np.linalg.norm(y)))
        asym = np.linalg.norm(aj - aj.T)
        if asym > ASYMMETRY_TOL * max(y_scale, np.finfo(float).tiny):
            raise NumericBreakdownError(
                "operator does not look symmetric", step=j, asymmetry=float(asym), scale=y_scale
            )
        aj = 0.5 * (aj + aj.T)
        z = y - qj @ aj
        if j > 0:
            z -= blocks[j - 1] @ offdiag_blocks[j - 1].T
        diag_blocks.append(aj)
        if abs_tol is None:
            # operator scale from the first Rayleigh block
            abs_tol = BREAKDOWN_TOL * max(np.linalg.norm(aj), np.finfo(float).tiny)
        basis = np.hstack(blocks)
        reorth = []
        for _ in range(REORTH_PASSES):
            coeffs = basis.T @ z
            reorth.append((z, coeffs))
            z = z - basis @ coeffs
        step = _Step(y=y, reorth=reorth, qr=None)
        steps.append(step)
        if j == k - 1:
            break
        qr = _deflating_qr(z, max(abs_tol, DEFLATION_RTOL * float(np.linalg.norm(y))))
        if qr.q.shape[1] == 0:
            breakdown = True
            break
        step.qr = qr
        blocks.append(qr.q)
        offdiag_blocks.append(_qr_coeffs(qr, z))
        if qr.keep is not None:
            step.z_final = z
            dropped += float(np.linalg.norm(z - qr.q @ offdiag_blocks[-1]))

    H = _assemble(diag_blocks, offdiag_blocks)
    hroot = tridiag_sqrt(H, noise=dropped, drop_null=True)
    return LanczosRecord(
        blocks=blocks,
        diag_blocks=diag_blocks,
        offdiag_blocks=offdiag_blocks,
        seed_coeffs=seed_coeffs,
        hroot=hroot,
        steps=steps if retain else None,
        breakdown=breakdown,
    )


def lanczos_sqrt_vec(matvec, xi: np.ndarray, k: int, retain: bool = True):
    """Approximate ``Sigma^{1/2} xi`` with k Lanczos steps.

    ``matvec`` maps a d x r block to ``Sigma`` times that block (a dense
    array is accepted too). Returns ``(approximation, record)``.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise InvalidArgumentError("xi must be a vector")
    record = _lanczos(matvec, xi[:, None], k, retain=retain)
    return record.result()[:, 0], record


def block_lanczos_sqrt(matvec, Xi: np.ndarray, k: int, retain: bool = True):
    """Approximate ``Sigma^{1/2} Xi`` for all columns at once (block Lanczos)."""
    Xi = np.asarray(Xi, dtype=float)
    if Xi.ndim != 2:
        raise InvalidArgumentError("Xi must be a d x S matrix")
    record = _lanczos(matvec, Xi, k, retain=retain)
    return record.result(), record


def lanczos_backprop(record: LanczosRecord, matvec_grad: MatvecGrad, upstream: np.ndarray) -> np.ndarray:
    """Reverse-mode sweep through a recorded Lanczos run.

    ``matvec_grad(vecs, vecs_bar)`` must return ``(param_grad, pullback)``:
    the contraction ``sum(vecs_bar * d(Sigma vecs)/d theta)`` for each
    parameter and ``Sigma vecs_bar``. ``upstream`` has the shape of the
    Lanczos output. The seed noise is treated as a constant.
    """
    if record.steps is None:
        raise InvalidStateError("Lanczos record was created without retained intermediates")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.ndim == 1:
        upstream = upstream[:, None]
    blocks = record.blocks
    nblk = len(blocks)
    sizes = [b.shape[1] for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    r1 = sizes[0]
    basis = record.basis
    root = record.hroot.root

    # output = D G R0 with G = root[:, :r1]
    g_r0 = root[:, :r1] @ record.seed_coeffs
    basis_bar = upstream @ g_r0.T
    root_bar = np.zeros_like(root)
    root_bar[:, :r1] = (basis.T @ upstream) @ record.seed_coeffs.T
    h_bar = record.hroot.decomposition.sylvester(root_bar)

    q_bar = [basis_bar[:, offsets[j] : offsets[j + 1]].copy() for j in range(nblk)]
    a_bar = [h_bar[offsets[j] : offsets[j + 1], offsets[j] : offsets[j + 1]].copy() for j in range(nblk)]
    b_bar = []
    for j in range(nblk - 1):
        rows = slice(offsets[j + 1], offsets[j + 2])
        cols = slice(offsets[j], offsets[j + 1])
        b_bar.append(h_bar[rows, cols] + h_bar[cols, rows].T)

    param_grad = None
    for j in range(len(record.steps) - 1, -1, -1):
        step = record.steps[j]
        qj = blocks[j]
        if step.qr is not None:
            qr = step.qr
            nq_bar = q_bar[j + 1]
            nb_bar = b_bar[j]
            if qr.keep is None:
                z_bar = _qr_backward(qr.q, qr.r, nq_bar, nb_bar)
            else:
                z_final = step.z_final
                z_bar = qr.q @ nb_bar
                q_tot = nq_bar + z_final @ nb_bar.T
                z_bar[:, qr.keep] += _qr_backward(qr.q, qr.r, q_tot, np.zeros_like(qr.r))
        else:
            z_bar = np.zeros_like(qj)

        # reorthogonalization sweeps: z_out = z_in - B C, C = B^T z_in
        width = offsets[j + 1]
        basis_j = basis[:, :width]
        basis_j_bar = np.zeros_like(basis_j)
        for z_in, coeffs in reversed(step.reorth):
            c_bar = -(basis_j.T @ z_bar)
            basis_j_bar -= z_bar @ coeffs.T
            basis_j_bar += z_in @ c_bar.T
            z_bar = z_bar + basis_j @ c_bar
        for i in range(j + 1):
            q_bar[i] += basis_j_bar[:, offsets[i] : offsets[i + 1]]

        # z = y - Q_j A_j - Q_{j-1} B_j^T
        aj = record.diag_blocks[j]
        y_bar = z_bar.copy()
        q_bar[j] -= z_bar @ aj.T
        a_bar[j] -= qj.T @ z_bar
        if j > 0:
            bj = record.offdiag_blocks[j - 1]
            q_bar[j - 1] -= z_bar @ bj
            b_bar[j - 1] -= z_bar.T @ blocks[j - 1]

        # A_j = sym(Q_j^T y)
        a_sym = 0.5 * (a_bar[j] + a_bar[j].T)
        q_bar[j] += step.y @ a_sym
        y_bar += qj @ a_sym

        # y = Sigma Q_j
        grad_j, pull = matvec_grad(qj, y_bar)
        grad_j = np.asarray(grad_j, dtype=float)
        param_grad = grad_j if param_grad is None else param_grad + grad_j
        q_bar[j] += pull
    return param_grad
