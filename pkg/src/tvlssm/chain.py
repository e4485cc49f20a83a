"""Posterior moments of a first-order Gaussian Markov chain.

A chain of length N+1 with node dimension d has a joint Gaussian whose
precision matrix is block tridiagonal.  This module solves for the
marginal means, marginal covariances and lag-1 cross-covariances by a
block-Cholesky forward sweep and a backward recursion, in O(N d^3) time
instead of inverting the dense (N+1)d x (N+1)d matrix.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class ChainFactorizationError(np.linalg.LinAlgError):
    """Raised when a conditional precision block is not positive definite."""

    def __init__(self, block_index, message=None):
        self.block_index = block_index
        super().__init__(
            message
            or "precision is not positive definite: Cholesky failed at "
            f"block {block_index}"
        )


@dataclass
class BlockTridiagonalPrecision:
    """Symmetric block-tridiagonal precision of a Gaussian chain.

    Parameters
    ----------
    diag : ndarray, shape (N+1, d, d)
        Diagonal blocks; each must be symmetric.
    offdiag : ndarray, shape (N, d, d)
        Subdiagonal blocks; ``offdiag[n]`` is block (n+1, n) of the full
        matrix.  Block (n, n+1) is its transpose.

    Positive definiteness is not checked here; it surfaces as a
    :class:`ChainFactorizationError` when the chain is solved.
    """

    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        self.offdiag = np.asarray(self.offdiag, dtype=float)
        if self.diag.ndim != 3 or self.diag.shape[1] != self.diag.shape[2]:
            raise ValueError("diag must have shape (N+1, d, d)")
        n_off = self.diag.shape[0] - 1
        if self.offdiag.shape != (n_off, self.dim, self.dim):
            raise ValueError(
                f"offdiag must have shape ({n_off}, {self.dim}, {self.dim})"
            )
        if not np.allclose(self.diag, np.swapaxes(self.diag, -1, -2)):
            raise ValueError("diagonal blocks must be symmetric")

    @property
    def dim(self):
        return self.diag.shape[1]

    @property
    def length(self):
        """Number of chain nodes, N+1."""
        return self.diag.shape[0]

    def dense(self):
        """Assemble the full (N+1)d x (N+1)d matrix (for tests and oracles)."""
        n, d = self.length, self.dim
        full = np.zeros((n * d, n * d))
        for i in range(n):
            full[i * d:(i + 1) * d, i * d:(i + 1) * d] = self.diag[i]
        for i in range(n - 1):
            full[(i + 1) * d:(i + 2) * d, i * d:(i + 1) * d] = self.offdiag[i]
            full[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = self.offdiag[i].T
        return full


@dataclass
class GaussianChainPosterior:
    """First and second moments of a Gaussian chain posterior.

    Attributes
    ----------
    means : ndarray, shape (N+1, d)
        Marginal means <x_n>.
    covs : ndarray, shape (N+1, d, d)
        Marginal covariances Cov(x_n); symmetric PSD.
    cross_covs : ndarray, shape (N, d, d)
        Lag-1 cross-covariances; ``cross_covs[n]`` is Cov(x_{n+1}, x_n),
        i.e. block (n+1, n) of the inverse of the full precision.
    logdet_cov : float
        Log-determinant of the full joint covariance (used by entropy
        computations).
    """

    means: np.ndarray
    covs: np.ndarray
    cross_covs: np.ndarray
    logdet_cov: float = 0.0

    @property
    def length(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def second_moments(self):
        """<x_n x_n^T> = Cov(x_n) + <x_n><x_n>^T, shape (N+1, d, d)."""
        return self.covs + self.means[:, :, None] * self.means[:, None, :]

    def cross_moments(self):
        """<x_n x_{n-1}^T> for n = 1..N, shape (N, d, d)."""
        return self.cross_covs + self.means[1:, :, None] * self.means[:-1, None, :]


def solve_chain(prec, rhs):
    """Solve a Gaussian chain given its block-tridiagonal precision.

    Computes the mean (solution of precision @ mu = rhs), the diagonal
    blocks of the precision inverse and the subdiagonal blocks of the
    inverse, via one forward elimination and one backward pass.

    Parameters
    ----------
    prec : BlockTridiagonalPrecision
    rhs : ndarray, shape (N+1, d)
        Linear term of the Gaussian's canonical form.

    Returns
    -------
    GaussianChainPosterior

    Raises
    ------
    ChainFactorizationError
        If a conditional precision block fails to factorize, which means
        the assembled precision is not positive definite.
    """
    rhs = np.asarray(rhs, dtype=float)
    n_nodes, d = prec.length, prec.dim
    if rhs.shape != (n_nodes, d):
        raise ValueError(f"rhs must have shape ({n_nodes}, {d})")

    # Forward sweep: conditional precisions Phi_n = J_nn - L_n Phi_{n-1}^-1 L_n^T
    # and the matching rhs h_n.  gains[n] = Phi_{n-1}^-1 L_n^T.
    chols = [None] * n_nodes
    gains = [None] * n_nodes
    hs = np.empty_like(rhs)
    logdet_prec = 0.0
    phi = prec.diag[0]
    hs[0] = rhs[0]
    for n in range(n_nodes):
        if n > 0:
            low = prec.offdiag[n - 1]
            gains[n] = cho_solve(chols[n - 1], low.T)
            phi = prec.diag[n] - low @ gains[n]
            hs[n] = rhs[n] - low @ cho_solve(chols[n - 1], hs[n - 1])
        try:
            chols[n] = cho_factor(phi, lower=True)
        except np.linalg.LinAlgError:
            raise ChainFactorizationError(n) from None
        logdet_prec += 2.0 * np.sum(np.log(np.diag(chols[n][0])))

    # Backward pass for means, marginal covariances and lag-1 blocks.
    means = np.empty_like(rhs)
    covs = np.empty((n_nodes, d, d))
    cross = np.empty((max(n_nodes - 1, 0), d, d))
    means[-1] = cho_solve(chols[-1], hs[-1])
    covs[-1] = cho_solve(chols[-1], np.eye(d))
    for n in range(n_nodes - 2, -1, -1):
        gain = gains[n + 1]
        means[n] = cho_solve(chols[n], hs[n]) - gain @ means[n + 1]
        cross[n] = -covs[n + 1] @ gain.T
        cov = cho_solve(chols[n], np.eye(d)) + gain @ covs[n + 1] @ gain.T
        covs[n] = 0.5 * (cov + cov.T)
    covs[-1] = 0.5 * (covs[-1] + covs[-1].T)

    return GaussianChainPosterior(
        means=means, covs=covs, cross_covs=cross, logdet_cov=-logdet_prec
    )
