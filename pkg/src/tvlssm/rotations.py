"""Rotation parameter expansion for faster VB convergence.

Coordinate ascent zigzags when strongly coupled factors are updated one
at a time.  A joint reparameterization fixes this: the latent states can
be mapped by any invertible R when C, and the dynamics tensor, absorb
R^-1, leaving the likelihood unchanged.  This module finds the R that
maximizes the ELBO restricted to that family (L-BFGS over the matrix
entries, started at the identity) and applies it to all affected
factors.  There are two independent expansions:

* X-rotation: x_n -> R x_n, c_m -> R^-T c_m, B_k -> R B_k R^-1;
  q(gamma) and q(beta) are collapsed to their closed-form optima inside
  the objective and re-updated after the transformation is applied.
* S-rotation: s_n -> R s_n, A -> R A R^-1, slice B_{:d:} -> R^-T B_{:d:};
  q(alpha) and q(beta) collapsed likewise.

Transformed factor covariances are conjugated within each factor block
(row mixing acts on the means), so the transformation is exactly
invertible and the objective value at R = I equals the current ELBO;
steps are only accepted when the objective does not decrease.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .model import b_means, b_slice_second_moments

logger = logging.getLogger(__name__)

_DET_FLOOR = 1e-8
_ACCEPT_SLACK = 1e-10


@dataclass
class RotationCandidate:
    """An optimized rotation: the matrix, its objective and what it touches."""

    matrix: np.ndarray
    gain: float
    affected: tuple
    objective: object = field(repr=False, default=None)


def _penalty(shape):
    return np.inf, np.zeros(shape)


def _chain_stats(chain):
    xx = chain.second_moments()
    cross = chain.cross_moments()
    return xx, cross


def x_objective(post, data, config, s_means, s_seconds):
    """Build f(R), the restricted ELBO for the X-rotation, minus terms
    that do not depend on R.  Returns a callable R -> (value, gradient)."""
    d_dim, k_dim = config.D, config.K
    n_nodes = post.qX.length
    m_rows = data.n_rows

    xx, cross = _chain_stats(post.qX)
    from .model import w_moments_over_time

    w_means, _ = w_moments_over_time(s_means, s_seconds, post.qB_mean, post.qB_cov)
    xnn = xx[1:].sum(axis=0)
    w_xp_xn = np.einsum("nij,nkj->ik", w_means, cross)
    wxw = np.einsum("nij,njk,nlk->il", w_means, xx[:-1], w_means)
    x0tot = xx[0]
    x0 = post.qX.means[0]
    lam0, mu0 = config.lambda0, config.mu0_x

    sc = (post.qC_cov + post.qC_mean[:, :, None] * post.qC_mean[:, None, :]).sum(axis=0)
    bbar = b_means(post.qB_mean)
    cov4 = post.qB_cov.reshape(d_dim, d_dim, k_dim, d_dim, k_dim)
    # sum over row slices of the (k, k) covariance block, one D x D per k
    ckk = np.einsum("rikjk->kij", cov4)

    a_gam = config.a_gamma + 0.5 * m_rows
    a_bet = config.a_beta + 0.5 * d_dim
    b_gam, b_bet = config.b_gamma, config.b_beta
    logdet_coef = n_nodes - m_rows - k_dim * d_dim

    def value_and_grad(r_mat):
        sign, logdet = np.linalg.slogdet(r_mat)
        if sign <= 0 or logdet < math.log(_DET_FLOOR):
            return _penalty(r_mat.shape)
        r_inv = np.linalg.inv(r_mat)

        value = logdet_coef * logdet
        grad = logdet_coef * r_inv.T

        value -= 0.5 * np.sum((r_mat @ xnn) * r_mat)
        value += np.sum((r_mat @ w_xp_xn) * r_mat)
        value -= 0.5 * np.sum((r_mat @ wxw) * r_mat)
        grad -= r_mat @ xnn
        grad += r_mat @ (w_xp_xn + w_xp_xn.T)
        grad -= r_mat @ wxw

        value -= 0.5 * np.sum(lam0 * (r_mat @ x0tot @ r_mat.T))
        value += mu0 @ lam0 @ (r_mat @ x0)
        grad -= lam0 @ r_mat @ x0tot
        grad += np.outer(lam0 @ mu0, x0)

        zc = r_inv.T @ sc @ r_inv
        u_gam = 0.5 * np.diag(zc)
        w_gam = 1.0 / (b_gam + u_gam)
        value -= a_gam * np.sum(np.log(b_gam + u_gam))
        grad += a_gam * (zc * w_gam[None, :]) @ r_inv.T

        rtr = r_mat.T @ r_mat
        for k in range(k_dim):
            bk = bbar[k]
            n_k = bk.T @ rtr @ bk + ckk[k]
            z_k = r_inv.T @ n_k @ r_inv
            u_k = 0.5 * np.diag(z_k)
            w_k = 1.0 / (b_bet + u_k)
            value -= a_bet * np.sum(np.log(b_bet + u_k))
            f_k = r_mat @ bk @ r_inv
            grad += a_bet * (z_k * w_k[None, :]) @ r_inv.T
            grad -= a_bet * (f_k * w_k[None, :]) @ r_inv.T @ bk.T
        return value, grad

    return value_and_grad


def s_objective(post, config):
    """f(R) for the S-rotation; same conventions as :func:`x_objective`."""
    d_dim, k_dim = config.D, config.K
    n_nodes = post.qS.length

    ss, scross = _chain_stats(post.qS)
    snn = ss[1:].sum(axis=0)
    spsp = ss[:-1].sum(axis=0)
    a_bar = post.qA_mean
    a_sp_sn = np.einsum("ij,nkj->ik", a_bar, scross)
    asa = a_bar @ spsp @ a_bar.T
    s0tot = ss[0]
    s0 = post.qS.means[0]
    v0, mu0 = config.v0, config.mu0_s

    mom4 = b_slice_second_moments(post.qB_mean, post.qB_cov)
    n_d = np.stack([mom4[d, :, d, :] for d in range(d_dim)])  # (D, K, K)
    sig_a_sum = post.qA_cov.sum(axis=0)

    a_bet = config.a_beta + 0.5 * d_dim
    a_alp = config.a_alpha + 0.5 * k_dim
    b_bet, b_alp = config.b_beta, config.b_alpha
    logdet_coef = n_nodes - k_dim - d_dim * d_dim

    def value_and_grad(r_mat):
        sign, logdet = np.linalg.slogdet(r_mat)
        if sign <= 0 or logdet < math.log(_DET_FLOOR):
            return _penalty(r_mat.shape)
        r_inv = np.linalg.inv(r_mat)

        value = logdet_coef * logdet
        grad = logdet_coef * r_inv.T

        value -= 0.5 * np.sum((r_mat @ snn) * r_mat)
        value += np.sum((r_mat @ a_sp_sn) * r_mat)
        value -= 0.5 * np.sum((r_mat @ asa) * r_mat)
        grad -= r_mat @ snn
        grad += r_mat @ (a_sp_sn + a_sp_sn.T)
        grad -= r_mat @ asa

        value -= 0.5 * np.sum(v0 * (r_mat @ s0tot @ r_mat.T))
        value += mu0 @ v0 @ (r_mat @ s0)
        grad -= v0 @ r_mat @ s0tot
        grad += np.outer(v0 @ mu0, s0)

        for d in range(d_dim):
            z_d = r_inv.T @ n_d[d] @ r_inv
            u_d = 0.5 * np.diag(z_d)
            w_d = 1.0 / (b_bet + u_d)
            value -= a_bet * np.sum(np.log(b_bet + u_d))
            grad += a_bet * (z_d * w_d[None, :]) @ r_inv.T

        # <A'^T A'> = R^-T (sum_pq [R^T R]_pq mu_p mu_q^T + sum_r Cov_r) R^-1
        g_mat = a_bar @ r_inv  # entry (p, k) is mu_p^T R^-1 e_k
        p_full = a_bar.T @ (r_mat.T @ r_mat) @ a_bar + sig_a_sum
        zp = r_inv.T @ p_full @ r_inv
        u_alp = 0.5 * np.diag(zp)
        w_alp = 1.0 / (b_alp + u_alp)
        value -= a_alp * np.sum(np.log(b_alp + u_alp))
        grad += a_alp * (zp * w_alp[None, :]) @ r_inv.T
        grad -= a_alp * r_mat @ (g_mat * w_alp[None, :]) @ g_mat.T
        return value, grad

    return value_and_grad


def _optimize(value_and_grad, dim, maxiter):
    def cost(flat):
        value, grad = value_and_grad(flat.reshape(dim, dim))
        if not np.isfinite(value):
            return 1e100, np.zeros(dim * dim)
        return -value, -grad.ravel()

    x0 = np.eye(dim).ravel()
    f0 = -cost(x0)[0]
    try:
        result = minimize(cost, x0, jac=True, method="L-BFGS-B",
                          options={"maxiter": maxiter})
    except Exception:  # numerical failure inside the optimizer
        logger.warning("rotation optimizer failed; keeping identity")
        return None, f0
    r_mat = result.x.reshape(dim, dim)
    value, _ = value_and_grad(r_mat)
    sign, logdet = np.linalg.slogdet(r_mat)
    if (not np.isfinite(value) or sign <= 0 or logdet < math.log(_DET_FLOOR)
            or value < f0 - _ACCEPT_SLACK * (1.0 + abs(f0))):
        return None, f0
    return r_mat, value - f0


def optimize_rotation_x(post, data, config, s_means, s_seconds, maxiter=60):
    """Optimize the X-subspace rotation; None when identity is kept."""
    objective = x_objective(post, data, config, s_means, s_seconds)
    r_mat, gain = _optimize(objective, config.D, maxiter)
    if r_mat is None:
        return None
    return RotationCandidate(
        matrix=r_mat, gain=gain, objective=objective,
        affected=("x", "c", "b", "gamma", "beta"),
    )


def optimize_rotation_s(post, config, maxiter=60):
    """Optimize the S-subspace rotation; None when identity is kept."""
    objective = s_objective(post, config)
    r_mat, gain = _optimize(objective, config.K, maxiter)
    if r_mat is None:
        return None
    return RotationCandidate(
        matrix=r_mat, gain=gain, objective=objective,
        affected=("s", "a", "b", "alpha", "beta"),
    )


def _rotate_chain(chain, r_mat):
    sign, logdet = np.linalg.slogdet(r_mat)
    chain.means = chain.means @ r_mat.T
    chain.covs = np.einsum("ij,njk,lk->nil", r_mat, chain.covs, r_mat)
    chain.cross_covs = np.einsum("ij,njk,lk->nil", r_mat, chain.cross_covs, r_mat)
    chain.logdet_cov = chain.logdet_cov + 2.0 * chain.length * logdet


def apply_rotation_x(post, rot):
    """x -> R x, c -> R^-T c, B_k -> R B_k R^-1 at the moment level."""
    r_mat = rot.matrix if isinstance(rot, RotationCandidate) else np.asarray(rot)
    r_inv = np.linalg.inv(r_mat)
    _rotate_chain(post.qX, r_mat)
    post.qC_mean = post.qC_mean @ r_inv
    post.qC_cov = np.einsum("ji,mjk,kl->mil", r_inv, post.qC_cov, r_inv)
    post.qB_mean = np.einsum("rp,pkj,jl->rkl", r_mat, post.qB_mean, r_inv)
    d_dim, k_dim = post.qB_mean.shape[0], post.qB_mean.shape[1]
    cov4 = post.qB_cov.reshape(d_dim, d_dim, k_dim, d_dim, k_dim)
    cov4 = np.einsum("qa,rqkpl,pb->rakbl", r_inv, cov4, r_inv)
    post.qB_cov = cov4.reshape(d_dim, k_dim * d_dim, k_dim * d_dim)


def apply_rotation_s(post, rot):
    """s -> R s, A -> R A R^-1, slice B_{:d:} -> R^-T B_{:d:}."""
    r_mat = rot.matrix if isinstance(rot, RotationCandidate) else np.asarray(rot)
    r_inv = np.linalg.inv(r_mat)
    _rotate_chain(post.qS, r_mat)
    post.qA_mean = (r_mat @ post.qA_mean) @ r_inv
    post.qA_cov = np.einsum("ji,rjk,kl->ril", r_inv, post.qA_cov, r_inv)
    post.qB_mean = np.einsum("qk,rqj->rkj", r_inv, post.qB_mean)
    d_dim, k_dim = post.qB_mean.shape[0], post.qB_mean.shape[1]
    cov4 = post.qB_cov.reshape(d_dim, d_dim, k_dim, d_dim, k_dim)
    cov4 = np.einsum("qk,raqbp,pl->rakbl", r_inv, cov4, r_inv)
    post.qB_cov = cov4.reshape(d_dim, k_dim * d_dim, k_dim * d_dim)
