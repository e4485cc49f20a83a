"""VB-EM coordinate updates, ELBO and fit loop for the time-varying model.

Each ``update_*`` function performs one exact coordinate-ascent step on
its factor given the others, so the evidence lower bound never
decreases.  The fit loop runs a few warmup sweeps over the lower layers
(X, C, B, tau) before touching the hyperparameters and the upper
layers, then full sweeps in the order X, S, C, B, A, tau, gamma, beta,
alpha with rotation speedups after each full sweep.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import rotations
from .chain import BlockTridiagonalPrecision, solve_chain
from .model import (
    FactorPosteriors,
    GammaPosterior,
    b_slice_second_moments,
    init_posteriors,
    w_moments_over_time,
)

logger = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)


class MonotonicityError(RuntimeError):
    """ELBO decreased beyond tolerance after a coordinate update."""

    def __init__(self, update_name, before, after):
        self.update_name = update_name
        self.before = before
        self.after = after
        super().__init__(
            f"ELBO decreased after update '{update_name}': "
            f"{before:.10g} -> {after:.10g} (delta {after - before:.3g})"
        )


@dataclass
class SweepReport:
    sweep_index: int
    elbo: float
    warmup: bool
    timings: dict = field(default_factory=dict)
    rotation_applied: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.elbo):
            raise ValueError(f"non-finite ELBO at sweep {self.sweep_index}")

    def to_json(self):
        return json.dumps(
            {
                "sweep": self.sweep_index,
                "elbo": self.elbo,
                "warmup": self.warmup,
                "timings": self.timings,
                "rotation_applied": self.rotation_applied,
            },
            sort_keys=True,
        )


# ---------------------------------------------------------------------------
# shared moment helpers


def c_second_moments(post):
    """<c_m c_m^T> for all rows, shape (M, D, D)."""
    return post.qC_cov + post.qC_mean[:, :, None] * post.qC_mean[:, None, :]


def tau_mean_per_row(post, n_rows):
    """<tau_m> broadcast to (M,) (isotropic posteriors store one pair)."""
    mean = post.qTau.mean()
    return np.broadcast_to(mean, (n_rows,)) if mean.shape[0] == 1 else mean


def residual_sq_expectations(post, data):
    """xi[m, n] = <(y_mn - c_m^T x_n)^2> on observed cells (0 elsewhere)."""
    xx = post.qX.second_moments()[1:]
    cc = c_second_moments(post)
    y0 = data.zero_filled()
    recon = post.qC_mean @ post.qX.means[1:].T
    xi = y0 ** 2 - 2.0 * y0 * recon + np.einsum("mde,nde->mn", cc, xx)
    return np.where(data.mask, xi, 0.0)


# ---------------------------------------------------------------------------
# coordinate updates (shared by the TVD model and the baselines)


def update_tau(post, data, config):
    counts = data.counts_per_row().astype(float)
    xi_sum = residual_sq_expectations(post, data).sum(axis=1)
    if config.isotropic_noise:
        shape = config.a_tau + 0.5 * counts.sum()
        rate = config.b_tau + 0.5 * xi_sum.sum()
        post.qTau = GammaPosterior(np.array([shape]), np.array([rate]))
    else:
        post.qTau = GammaPosterior(
            config.a_tau + 0.5 * counts, config.b_tau + 0.5 * xi_sum
        )


def update_c(post, data, config):
    m_rows, d_dim = data.n_rows, config.D
    xx = post.qX.second_moments()[1:]
    tau = tau_mean_per_row(post, m_rows)
    gamma_diag = np.diag(post.qGamma.mean())
    mask = data.mask.astype(float)
    # sum_{n in O_m} <x_n x_n^T>, and the data term sum y <tau> <x_n>
    sxx = np.einsum("mn,nde->mde", mask, xx)
    sdata = (data.zero_filled() @ post.qX.means[1:]) * tau[:, None]
    prec = gamma_diag[None, :, :] + tau[:, None, None] * sxx
    post.qC_cov = np.linalg.inv(prec)
    post.qC_cov = 0.5 * (post.qC_cov + np.swapaxes(post.qC_cov, -1, -2))
    post.qC_mean = np.einsum("mde,me->md", post.qC_cov, sdata)


def update_gamma(post, config):
    m_rows = post.qC_mean.shape[0]
    c_sq = (np.einsum("mdd->md", post.qC_cov) + post.qC_mean ** 2).sum(axis=0)
    post.qGamma = GammaPosterior(
        np.full(config.D, config.a_gamma + 0.5 * m_rows),
        config.b_gamma + 0.5 * c_sq,
    )


def update_b(post, config, s_means, s_seconds):
    """Update q(B) given mixing-weight moments at times 1..N.

    ``s_means``: (N, K); ``s_seconds``: (N, K, K).  The slice covariance
    is shared across the D row slices; only the means differ.
    """
    k_dim, d_dim = config.K, config.D
    xx = post.qX.second_moments()
    cross = post.qX.cross_moments()
    omega = np.einsum("nij,nkl->ikjl", xx[:-1], s_seconds).reshape(
        k_dim * d_dim, k_dim * d_dim
    )
    beta_diag = np.diag(post.qBeta.mean().T.ravel())  # flat index j*K + k
    cov = np.linalg.inv(beta_diag + omega)
    cov = 0.5 * (cov + cov.T)
    rhs = np.einsum("nk,nrj->rjk", s_means, cross).reshape(d_dim, k_dim * d_dim)
    post.qB_cov = np.tile(cov, (d_dim, 1, 1))
    post.qB_mean = np.einsum("ab,rb->ra", cov, rhs).reshape(
        d_dim, d_dim, k_dim).transpose(0, 2, 1)


def update_beta(post, config):
    k_dim, d_dim = config.K, config.D
    mom = b_slice_second_moments(post.qB_mean, post.qB_cov)
    # <b_krd^2> summed over rows r: diagonal (d, k, d, k) entries
    b_sq = np.einsum("dkdk->kd", mom)
    post.qBeta = GammaPosterior(
        np.full((k_dim, d_dim), config.a_beta + 0.5 * d_dim),
        config.b_beta + 0.5 * b_sq,
    )


def update_a(post, config):
    ss = post.qS.second_moments()
    scross = post.qS.cross_moments()
    alpha_diag = np.diag(post.qAlpha.mean())
    cov = np.linalg.inv(alpha_diag + ss[:-1].sum(axis=0))
    cov = 0.5 * (cov + cov.T)
    post.qA_cov = np.tile(cov, (config.K, 1, 1))
    post.qA_mean = scross.sum(axis=0) @ cov.T


def update_alpha(post, config):
    a_sq = (np.einsum("kjj->kj", post.qA_cov) + post.qA_mean ** 2).sum(axis=0)
    post.qAlpha = GammaPosterior(
        np.full(config.K, config.a_alpha + 0.5 * config.K),
        config.b_alpha + 0.5 * a_sq,
    )


def build_x_system(post, data, config, w_means, w_sqs):
    """Block-tridiagonal precision and linear term for q(X).

    ``w_means``/``w_sqs``: (N, D, D) arrays for <W_n>, <W_n^T W_n>, n=1..N.
    """
    d_dim = config.D
    n_times = data.n_times
    cc = c_second_moments(post)
    tau = tau_mean_per_row(post, data.n_rows)
    mask = data.mask.astype(float)
    psi = np.einsum("mn,m,mde->nde", mask, tau, cc)
    eye = np.eye(d_dim)
    diag = np.empty((n_times + 1, d_dim, d_dim))
    diag[0] = config.lambda0 + w_sqs[0]
    if n_times > 1:
        diag[1:-1] = eye + w_sqs[1:] + psi[:-1]
    diag[-1] = eye + psi[-1]
    rhs = np.empty((n_times + 1, d_dim))
    rhs[0] = config.lambda0 @ config.mu0_x
    rhs[1:] = ((data.zero_filled() * tau[:, None]).T @ post.qC_mean)
    return BlockTridiagonalPrecision(diag=diag, offdiag=-w_means), rhs


def update_x(post, data, config, w_means, w_sqs):
    prec, rhs = build_x_system(post, data, config, w_means, w_sqs)
    post.qX = solve_chain(prec, rhs)


def build_s_system(post, config):
    k_dim = config.K
    n_times = post.qX.length - 1
    xx = post.qX.second_moments()
    cross = post.qX.cross_moments()
    btb = b_slice_second_moments(post.qB_mean, post.qB_cov)
    theta = np.einsum("nij,ikjl->nkl", xx[:-1], btb)
    ata = post.qA_cov.sum(axis=0) + post.qA_mean.T @ post.qA_mean
    eye = np.eye(k_dim)
    diag = np.empty((n_times + 1, k_dim, k_dim))
    diag[0] = config.v0 + ata
    if n_times > 1:
        diag[1:-1] = eye + ata + theta[:-1]
    diag[-1] = eye + theta[-1]
    offdiag = np.tile(-post.qA_mean, (n_times, 1, 1))
    rhs = np.empty((n_times + 1, k_dim))
    rhs[0] = config.v0 @ config.mu0_s
    rhs[1:] = np.einsum("rkj,nrj->nk", post.qB_mean, cross)
    return BlockTridiagonalPrecision(diag=diag, offdiag=offdiag), rhs


def update_s(post, config):
    prec, rhs = build_s_system(post, config)
    post.qS = solve_chain(prec, rhs)


# ---------------------------------------------------------------------------
# ELBO terms


def gamma_factor_term(q, prior_shape, prior_rate):
    """<log p(theta)> + H(q(theta)) summed over the factor's entries."""
    from scipy.special import digamma

    shape, rate = q.shape, q.rate
    mean = shape / rate
    mean_log = digamma(shape) - np.log(rate)
    logp = (
        prior_shape * math.log(prior_rate)
        - gammaln(prior_shape)
        + (prior_shape - 1.0) * mean_log
        - prior_rate * mean
    )
    entropy = shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)
    return float(np.sum(logp + entropy))


def gaussian_entropy(covs):
    """Entropy of independent Gaussians given stacked covariances."""
    dim = covs.shape[-1]
    sign, logdet = np.linalg.slogdet(covs)
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("covariance is not positive definite")
    return float(0.5 * np.sum(logdet + dim * (1.0 + LOG2PI)))


def elbo_likelihood(post, data):
    tau = post.qTau
    tau_mean = tau_mean_per_row(post, data.n_rows)
    mean_log = tau.mean_log()
    log_tau = np.broadcast_to(mean_log, (data.n_rows,)) \
        if mean_log.shape[0] == 1 else mean_log
    xi = residual_sq_expectations(post, data)
    counts = data.counts_per_row()
    return float(
        0.5 * np.sum(counts * (log_tau - LOG2PI))
        - 0.5 * np.sum(tau_mean * xi.sum(axis=1))
    )


def chain_entropy(chain):
    n_dims = chain.length * chain.dim
    return 0.5 * (n_dims * (1.0 + LOG2PI) + chain.logdet_cov)


def elbo_x_chain(post, config, w_means, w_sqs):
    """<log p(X | S, B)> + H(q(X))."""
    qx = post.qX
    n_times = qx.length - 1
    xx = qx.second_moments()
    cross = qx.cross_moments()
    lam0 = config.lambda0
    mu0 = config.mu0_x
    sign, logdet_lam0 = np.linalg.slogdet(lam0)
    quad0 = float(
        np.sum(lam0 * xx[0]) - 2.0 * mu0 @ lam0 @ qx.means[0] + mu0 @ lam0 @ mu0
    )
    trans = float(
        np.einsum("ndd->", xx[1:])
        - 2.0 * np.sum(w_means * cross)
        + np.sum(w_sqs * xx[:-1])
    )
    logp = (
        0.5 * logdet_lam0
        - 0.5 * (n_times + 1) * config.D * LOG2PI
        - 0.5 * quad0
        - 0.5 * trans
    )
    return logp + chain_entropy(qx)


def elbo_s_chain(post, config):
    """<log p(S | A)> + H(q(S))."""
    qs = post.qS
    n_times = qs.length - 1
    ss = qs.second_moments()
    scross = qs.cross_moments()
    ata = post.qA_cov.sum(axis=0) + post.qA_mean.T @ post.qA_mean
    v0, mu0 = config.v0, config.mu0_s
    sign, logdet_v0 = np.linalg.slogdet(v0)
    quad0 = float(np.sum(v0 * ss[0]) - 2.0 * mu0 @ v0 @ qs.means[0] + mu0 @ v0 @ mu0)
    trans = float(
        np.einsum("nkk->", ss[1:])
        - 2.0 * np.sum(post.qA_mean * scross.sum(axis=0))
        + np.sum(ata * ss[:-1].sum(axis=0))
    )
    logp = (
        0.5 * logdet_v0
        - 0.5 * (n_times + 1) * config.K * LOG2PI
        - 0.5 * quad0
        - 0.5 * trans
    )
    return logp + chain_entropy(qs)


def elbo_c(post, config):
    c_sq = np.einsum("mdd->md", post.qC_cov) + post.qC_mean ** 2
    m_rows = c_sq.shape[0]
    logp = 0.5 * float(
        m_rows * np.sum(post.qGamma.mean_log())
        - m_rows * config.D * LOG2PI
        - np.sum(post.qGamma.mean() * c_sq.sum(axis=0))
    )
    return logp + gaussian_entropy(post.qC_cov)


def elbo_b(post, config):
    mom = b_slice_second_moments(post.qB_mean, post.qB_cov)
    b_sq = np.einsum("dkdk->kd", mom)  # summed over rows
    logp = 0.5 * float(
        config.D * np.sum(post.qBeta.mean_log())
        - config.K * config.D * config.D * LOG2PI
        - np.sum(post.qBeta.mean() * b_sq)
    )
    return logp + gaussian_entropy(post.qB_cov)


def elbo_a(post, config):
    a_sq = np.einsum("kjj->kj", post.qA_cov) + post.qA_mean ** 2
    logp = 0.5 * float(
        config.K * np.sum(post.qAlpha.mean_log())
        - config.K * config.K * LOG2PI
        - np.sum(post.qAlpha.mean() * a_sq.sum(axis=0))
    )
    return logp + gaussian_entropy(post.qA_cov)


def reconstruct(post, data_shape, predictive=False):
    """Posterior mean and standard deviation of the noiseless signal.

    mean[m, n] = <c_m>^T <x_n>; the variance adds the full uncertainty of
    (c_m, x_n) and, when ``predictive``, the observation noise 1/<tau_m>.
    """
    m_rows, n_times = data_shape
    mean = post.qC_mean @ post.qX.means[1:].T
    cc = c_second_moments(post)
    xx = post.qX.second_moments()[1:]
    var = np.einsum("mde,nde->mn", cc, xx) - mean ** 2
    if predictive:
        var = var + 1.0 / tau_mean_per_row(post, m_rows)[:, None]
    return mean, np.sqrt(np.clip(var, 0.0, None))


# ---------------------------------------------------------------------------
# fit driver


class TvdVb:
    """VB inference for the LSSM with time-varying dynamics.

    With K=1 the mixing weights are clamped at the constant 1 and the
    S/A/alpha layer drops out, recovering a constant-dynamics model.
    """

    variant = "tvd"

    def __init__(self, data, config, post=None):
        self.data = data
        self.config = config
        self.post = post if post is not None else init_posteriors(config, data)
        self.clamp_s = config.K == 1
        if self.clamp_s:
            self._freeze_s()

    def _freeze_s(self):
        qs = self.post.qS
        qs.means = np.ones_like(qs.means)
        qs.covs = np.zeros_like(qs.covs)
        qs.cross_covs = np.zeros_like(qs.cross_covs)
        qs.logdet_cov = 0.0

    # -- per-time mixing moments used by X and B updates

    def s_step_moments(self):
        """(<s_n>, <s_n s_n^T>) for n = 1..N."""
        if self.clamp_s:
            n_times = self.data.n_times
            return np.ones((n_times, 1)), np.ones((n_times, 1, 1))
        return self.post.qS.means[1:], self.post.qS.second_moments()[1:]

    def w_step_moments(self):
        s_means, s_seconds = self.s_step_moments()
        return w_moments_over_time(
            s_means, s_seconds, self.post.qB_mean, self.post.qB_cov
        )

    # -- updates

    def update_x(self):
        w_means, w_sqs = self.w_step_moments()
        update_x(self.post, self.data, self.config, w_means, w_sqs)

    def update_s(self):
        if not self.clamp_s:
            update_s(self.post, self.config)

    def update_c(self):
        update_c(self.post, self.data, self.config)

    def update_b(self):
        s_means, s_seconds = self.s_step_moments()
        update_b(self.post, self.config, s_means, s_seconds)

    def update_a(self):
        if not self.clamp_s:
            update_a(self.post, self.config)

    def update_tau(self):
        update_tau(self.post, self.data, self.config)

    def update_gamma(self):
        update_gamma(self.post, self.config)

    def update_beta(self):
        update_beta(self.post, self.config)

    def update_alpha(self):
        if not self.clamp_s:
            update_alpha(self.post, self.config)

    # -- rotations

    def rotate_x(self):
        s_means, s_seconds = self.s_step_moments()
        rot = rotations.optimize_rotation_x(
            self.post, self.data, self.config, s_means, s_seconds
        )
        if rot is None:
            return False
        rotations.apply_rotation_x(self.post, rot)
        self.update_gamma()
        self.update_beta()
        return True

    def rotate_s(self):
        if self.clamp_s:
            return False
        rot = rotations.optimize_rotation_s(self.post, self.config)
        if rot is None:
            return False
        rotations.apply_rotation_s(self.post, rot)
        self.update_alpha()
        self.update_beta()
        return True

    # -- objective

    def elbo_terms(self):
        cfg, post = self.config, self.post
        w_means, w_sqs = self.w_step_moments()
        terms = {
            "likelihood": elbo_likelihood(post, self.data),
            "x_chain": elbo_x_chain(post, cfg, w_means, w_sqs),
            "c": elbo_c(post, cfg),
            "gamma": gamma_factor_term(post.qGamma, cfg.a_gamma, cfg.b_gamma),
            "b": elbo_b(post, cfg),
            "beta": gamma_factor_term(post.qBeta, cfg.a_beta, cfg.b_beta),
            "tau": gamma_factor_term(post.qTau, cfg.a_tau, cfg.b_tau),
        }
        if not self.clamp_s:
            terms["s_chain"] = elbo_s_chain(post, cfg)
            terms["a"] = elbo_a(post, cfg)
            terms["alpha"] = gamma_factor_term(post.qAlpha, cfg.a_alpha, cfg.b_alpha)
        return terms

    def elbo(self):
        return float(sum(self.elbo_terms().values()))

    # -- sweeps

    def _update_sequence(self, warmup):
        if warmup:
            return [
                ("x", self.update_x), ("c", self.update_c),
                ("b", self.update_b), ("tau", self.update_tau),
            ]
        return [
            ("x", self.update_x), ("s", self.update_s),
            ("c", self.update_c), ("b", self.update_b),
            ("a", self.update_a), ("tau", self.update_tau),
            ("gamma", self.update_gamma), ("beta", self.update_beta),
            ("alpha", self.update_alpha),
        ]

    def _checked(self, name, step, elbo_before):
        step()
        elbo_after = self.elbo()
        if elbo_after < elbo_before - 1e-8 * max(1.0, abs(elbo_before)):
            raise MonotonicityError(name, elbo_before, elbo_after)
        return elbo_after

    def sweep(self, warmup=False):
        """One coordinate-ascent sweep; returns timings and rotation flags."""
        timings = {}
        rotation_applied = {"x": False, "s": False}
        check = self.config.check_every_update
        elbo_running = self.elbo() if check else None
        for name, step in self._update_sequence(warmup):
            tic = time.perf_counter()
            if check:
                elbo_running = self._checked(name, step, elbo_running)
            else:
                step()
            timings[name] = time.perf_counter() - tic
        if not warmup and self.config.rotations:
            tic = time.perf_counter()
            if check:
                before = elbo_running
                rotation_applied["x"] = self.rotate_x()
                elbo_running = self.elbo()
                if elbo_running < before - 1e-8 * max(1.0, abs(before)):
                    raise MonotonicityError("rotate_x", before, elbo_running)
                before = elbo_running
                rotation_applied["s"] = self.rotate_s()
                elbo_running = self.elbo()
                if elbo_running < before - 1e-8 * max(1.0, abs(before)):
                    raise MonotonicityError("rotate_s", before, elbo_running)
            else:
                rotation_applied["x"] = self.rotate_x()
                rotation_applied["s"] = self.rotate_s()
            timings["rotations"] = time.perf_counter() - tic
        self.post.sweeps_done += 1
        return timings, rotation_applied

    def fit(self, log_path=None):
        """Run warmup plus full sweeps until the ELBO improvement falls
        below the configured relative tolerance; returns (posteriors,
        list of SweepReport)."""
        cfg = self.config
        reports = []
        log_fh = open(log_path, "w") if log_path else None
        prev_full = None
        try:
            for sweep_idx in range(cfg.max_sweeps):
                warmup = sweep_idx < cfg.warmup_sweeps
                timings, rotation_applied = self.sweep(warmup=warmup)
                elbo = self.elbo()
                report = SweepReport(
                    sweep_index=sweep_idx, elbo=elbo, warmup=warmup,
                    timings=timings, rotation_applied=rotation_applied,
                )
                reports.append(report)
                if log_fh:
                    log_fh.write(report.to_json() + "\n")
                if not warmup:
                    if prev_full is not None:
                        if elbo < prev_full - 1e-8 * max(1.0, abs(prev_full)):
                            raise MonotonicityError("sweep", prev_full, elbo)
                        if elbo - prev_full < cfg.elbo_rel_tol * abs(elbo):
                            break
                    prev_full = elbo
        finally:
            if log_fh:
                log_fh.close()
        return self.post, reports

    def reconstruct(self, predictive=False):
        return reconstruct(
            self.post, (self.data.n_rows, self.data.n_times), predictive=predictive
        )


def fit(data, config, post=None, log_path=None):
    """Convenience wrapper: fit the time-varying-dynamics model."""
    engine = TvdVb(data, config, post=post)
    return engine.fit(log_path=log_path)
