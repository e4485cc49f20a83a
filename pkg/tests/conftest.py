import numpy as np
import pytest

from tvlssm.chain import GaussianChainPosterior
from tvlssm.engine import TvdVb
from tvlssm.model import (
    FactorPosteriors,
    GammaPosterior,
    ModelConfig,
    ObservationSet,
    init_posteriors,
)


def make_data(seed, m_rows, n_times, missing=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    values = scale * rng.standard_normal((m_rows, n_times))
    mask = rng.uniform(size=(m_rows, n_times)) >= missing
    return ObservationSet(values=values, mask=mask)


def make_post(config, n_times,
              x_means=None, x_covs=None, x_cross=None,
              s_means=None, s_covs=None, s_cross=None,
              c_mean=None, c_cov=None,
              b_mean=None, b_cov=None,
              a_mean=None, a_cov=None,
              m_rows=1,
              tau=None, gamma=None, beta=None, alpha=None):
    """Hand-built posterior state for oracle tests; defaults are benign."""
    d_dim, k_dim = config.D, config.K

    def chain(dim, means, covs, cross):
        means = np.zeros((n_times + 1, dim)) if means is None else np.asarray(means, float)
        covs = np.zeros((n_times + 1, dim, dim)) if covs is None else np.asarray(covs, float)
        cross = np.zeros((n_times, dim, dim)) if cross is None else np.asarray(cross, float)
        return GaussianChainPosterior(means=means, covs=covs, cross_covs=cross)

    def gamma_pair(pair, shape):
        if pair is None:
            return GammaPosterior(np.ones(shape), np.ones(shape))
        sh, rt = pair
        return GammaPosterior(np.broadcast_to(sh, shape).copy(),
                              np.broadcast_to(rt, shape).copy())

    return FactorPosteriors(
        qX=chain(d_dim, x_means, x_covs, x_cross),
        qS=chain(k_dim, s_means, s_covs, s_cross),
        qC_mean=np.zeros((m_rows, d_dim)) if c_mean is None else np.asarray(c_mean, float),
        qC_cov=np.zeros((m_rows, d_dim, d_dim)) if c_cov is None else np.asarray(c_cov, float),
        qB_mean=np.zeros((d_dim, k_dim, d_dim)) if b_mean is None else np.asarray(b_mean, float),
        qB_cov=np.zeros((d_dim, k_dim * d_dim, k_dim * d_dim)) if b_cov is None
        else np.asarray(b_cov, float),
        qA_mean=np.eye(k_dim) if a_mean is None else np.asarray(a_mean, float),
        qA_cov=np.zeros((k_dim, k_dim, k_dim)) if a_cov is None else np.asarray(a_cov, float),
        qTau=gamma_pair(tau, 1 if config.isotropic_noise else m_rows),
        qGamma=gamma_pair(gamma, d_dim),
        qBeta=gamma_pair(beta, (k_dim, d_dim)),
        qAlpha=gamma_pair(alpha, k_dim),
    )


def warmed_engine(seed=0, m_rows=5, n_times=12, d_dim=3, k_dim=2, sweeps=3,
                  missing=0.2, **config_kwargs):
    """A generic mid-fit state: init plus a few rotation-free sweeps."""
    data = make_data(seed, m_rows, n_times, missing=missing)
    config = ModelConfig(D=d_dim, K=k_dim, seed=seed, rotations=False,
                         warmup_sweeps=2, **config_kwargs)
    engine = TvdVb(data, config)
    for i in range(sweeps):
        engine.sweep(warmup=i < config.warmup_sweeps)
    return engine
