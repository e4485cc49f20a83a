"""Model state shared by the VB engine, rotations and baselines.

The generative model: observations y_n = C x_n + noise with per-row
precisions tau, latent states following x_n = W_n x_{n-1} + noise where
W_n = sum_k s_kn B_k, and mixing weights following s_n = A s_{n-1} + noise.
ARD gamma priors sit on C (per column, gamma), on each B_k (per column,
beta) and on A (per column, alpha).

Posterior factor layout:

* q(X), q(S): joint Gaussian chains (means, marginal covs, lag-1 covs).
* q(C): independent rows, D-dim Gaussians.
* q(B): independent row slices; slice r collects the r-th rows of all
  B_k as a K x D matrix, stored vectorized with the basis index fastest
  (flat index j*K + k for entry B_k[r, j]).
* q(A): independent rows, K-dim Gaussians.
* q(tau), q(gamma), q(beta), q(alpha): Gamma shape/rate arrays.
"""

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .chain import GaussianChainPosterior

CHECKPOINT_SCHEMA = "tvlssm-checkpoint/1"


@dataclass
class ObservationSet:
    """M x N data matrix with an observed-entry mask.

    ``values[m, n]`` must be finite wherever ``mask[m, n]`` is True.
    Unobserved entries are ignored by every update; rows may be fully
    missing.  Column n corresponds to chain time n+1 (node 0 is the
    auxiliary initial state).
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("values and mask must be equal-shape 2-D arrays")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("observed entries must be finite")

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_times(self):
        return self.values.shape[1]

    def counts_per_row(self):
        """N_m: number of observed entries in each row."""
        return self.mask.sum(axis=1)

    def zero_filled(self):
        """Values with unobserved entries set to zero."""
        return np.where(self.mask, self.values, 0.0)


@dataclass
class ModelConfig:
    """Dimensions, priors, initial-state parameters and fit schedule."""

    D: int
    K: int
    a_alpha: float = 1e-6
    b_alpha: float = 1e-6
    a_beta: float = 1e-6
    b_beta: float = 1e-6
    a_gamma: float = 1e-6
    b_gamma: float = 1e-6
    a_tau: float = 1e-6
    b_tau: float = 1e-6
    mu0_x: np.ndarray | None = None
    lambda0: np.ndarray | None = None
    mu0_s: np.ndarray | None = None
    v0: np.ndarray | None = None
    isotropic_noise: bool = True
    warmup_sweeps: int = 5
    max_sweeps: int = 200
    elbo_rel_tol: float = 1e-6
    rotations: bool = True
    check_every_update: bool = False
    init_x_scale: float = 1.0
    init_c_scale: float = 1.0
    init_spread_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.D < 1 or self.K < 1:
            raise ValueError("D and K must be positive")
        for name in ("a_alpha", "b_alpha", "a_beta", "b_beta",
                     "a_gamma", "b_gamma", "a_tau", "b_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mu0_x is None:
            self.mu0_x = np.zeros(self.D)
        if self.lambda0 is None:
            self.lambda0 = 1e-6 * np.eye(self.D)
        if self.mu0_s is None:
            self.mu0_s = np.zeros(self.K)
        if self.v0 is None:
            self.v0 = 1e-6 * np.eye(self.K)
        self.mu0_x = np.asarray(self.mu0_x, dtype=float)
        self.lambda0 = np.asarray(self.lambda0, dtype=float)
        self.mu0_s = np.asarray(self.mu0_s, dtype=float)
        self.v0 = np.asarray(self.v0, dtype=float)
        for mat, name in ((self.lambda0, "lambda0"), (self.v0, "v0")):
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
            if np.any(np.linalg.eigvalsh(mat) <= 0):
                raise ValueError(f"{name} must be positive definite")

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)


@dataclass
class GammaPosterior:
    """Gamma shape/rate arrays for one ARD or noise factor."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        self.shape = np.atleast_1d(np.asarray(self.shape, dtype=float))
        self.rate = np.atleast_1d(np.asarray(self.rate, dtype=float))
        if self.shape.shape != self.rate.shape:
            raise ValueError("shape and rate must match")
        if np.any(self.shape <= 0) or np.any(self.rate <= 0):
            raise ValueError("Gamma parameters must be positive")

    def mean(self):
        return self.shape / self.rate

    def mean_log(self):
        from scipy.special import digamma

        return digamma(self.shape) - np.log(self.rate)


@dataclass
class FactorPosteriors:
    """All variational factors of the time-varying-dynamics model."""

    qX: GaussianChainPosterior
    qS: GaussianChainPosterior
    qC_mean: np.ndarray          # (M, D)
    qC_cov: np.ndarray           # (M, D, D)
    qB_mean: np.ndarray          # (D, K, D); [r, k, j] = <B_k[r, j]>
    qB_cov: np.ndarray           # (D, K*D, K*D); flat index j*K + k
    qA_mean: np.ndarray          # (K, K) rows of <A>
    qA_cov: np.ndarray           # (K, K, K) per-row covariance
    qTau: GammaPosterior         # (M,) or (1,) when isotropic
    qGamma: GammaPosterior       # (D,)
    qBeta: GammaPosterior        # (K, D)
    qAlpha: GammaPosterior       # (K,)
    sweeps_done: int = 0


def vec_slice(mat):
    """Vectorize a K x D slice matrix with the basis index fastest."""
    return np.asarray(mat).ravel(order="F")


def unvec_slice(vec, k, d):
    """Inverse of :func:`vec_slice`."""
    return np.asarray(vec).reshape((k, d), order="F")


def init_posteriors(config, data, rng_seed=None):
    """Initialize all variational factors.

    X and C means are standard-normal draws; the first mixing-weight
    component is held at 1 with small variance and B_1 starts at the
    identity, so the initial dynamics are close to a constant-dynamics
    model; remaining S components and B slices start small; A starts at
    the identity; all Gamma factors start at their priors.
    """
    D, K = config.D, config.K
    M, N = data.n_rows, data.n_times
    rng = np.random.default_rng(config.seed if rng_seed is None else rng_seed)

    x_means = config.init_x_scale * rng.standard_normal((N + 1, D))
    qX = GaussianChainPosterior(
        means=x_means,
        covs=np.tile(np.eye(D), (N + 1, 1, 1)),
        cross_covs=np.zeros((N, D, D)),
        logdet_cov=0.0,
    )
    qC_mean = config.init_c_scale * rng.standard_normal((M, D))
    qC_cov = np.tile(np.eye(D), (M, 1, 1))

    spread = config.init_spread_scale
    s_means = np.zeros((N + 1, K))
    s_means[:, 0] = 1.0
    s_var = np.full(K, spread ** 2)
    s_var[0] = 1e-6
    if K > 1:
        s_means[:, 1:] = spread * rng.standard_normal((N + 1, K - 1))
    qS = GaussianChainPosterior(
        means=s_means,
        covs=np.tile(np.diag(s_var), (N + 1, 1, 1)),
        cross_covs=np.zeros((N, K, K)),
        logdet_cov=float((N + 1) * np.sum(np.log(s_var))),
    )

    qB_mean = np.zeros((D, K, D))
    qB_mean[np.arange(D), 0, np.arange(D)] = 1.0
    if K > 1:
        qB_mean[:, 1:, :] = spread * rng.standard_normal((D, K - 1, D))
    qB_cov = np.tile(spread ** 2 * np.eye(K * D), (D, 1, 1))

    qA_mean = np.eye(K)
    qA_cov = np.tile(spread ** 2 * np.eye(K), (K, 1, 1))

    n_tau = 1 if config.isotropic_noise else M
    qTau = GammaPosterior(np.full(n_tau, config.a_tau), np.full(n_tau, config.b_tau))
    qGamma = GammaPosterior(np.full(D, config.a_gamma), np.full(D, config.b_gamma))
    qBeta = GammaPosterior(
        np.full((K, D), config.a_beta), np.full((K, D), config.b_beta)
    )
    qAlpha = GammaPosterior(np.full(K, config.a_alpha), np.full(K, config.b_alpha))

    return FactorPosteriors(
        qX=qX, qS=qS,
        qC_mean=qC_mean, qC_cov=qC_cov,
        qB_mean=qB_mean, qB_cov=qB_cov,
        qA_mean=qA_mean, qA_cov=qA_cov,
        qTau=qTau, qGamma=qGamma, qBeta=qBeta, qAlpha=qAlpha,
    )


def b_slice_second_moments(qB_mean, qB_cov):
    """Summed slice second moments as a (D, K, D, K) tensor.

    Returns T with T[i, k, j, l] = sum_r <B_k[r, i] B_l[r, j]>, which
    yields both <B_k^T B_l> (fix k, l) and <B_::i B_::j^T> (fix i, j).
    """
    d_rows, k_dim, _ = qB_mean.shape
    # vectorized slice means, basis index fastest (flat index j*K + k)
    mu = qB_mean.transpose(0, 2, 1).reshape(d_rows, k_dim * d_rows)
    mom = qB_cov + mu[:, :, None] * mu[:, None, :]
    return mom.sum(axis=0).reshape(d_rows, k_dim, d_rows, k_dim)


def b_means(qB_mean):
    """<B_k> matrices, shape (K, D, D)."""
    return np.swapaxes(qB_mean, 0, 1)


def compute_w_moments(s_mean, s_second, qB_mean, qB_cov=None, btb=None):
    """Moments of W = sum_k s_k B_k for one time step.

    Parameters
    ----------
    s_mean : ndarray, shape (K,)
        <s_n>.
    s_second : ndarray, shape (K, K)
        <s_n s_n^T>.
    qB_mean, qB_cov : slice posterior of B (see FactorPosteriors).
    btb : optional precomputed (D, K, D, K) tensor from
        :func:`b_slice_second_moments`.

    Returns
    -------
    (w_mean, w_sq) : both (D, D); <W> and <W^T W>.
    """
    s_mean = np.asarray(s_mean, dtype=float)
    s_second = np.asarray(s_second, dtype=float)
    if s_mean.shape[0] != qB_mean.shape[1]:
        raise ValueError("mixing-weight dimension does not match B")
    if btb is None:
        btb = b_slice_second_moments(qB_mean, qB_cov)
    w_mean = np.einsum("k,rkj->rj", s_mean, qB_mean)
    w_sq = np.einsum("kl,ikjl->ij", s_second, btb)
    return w_mean, w_sq


def w_moments_over_time(s_means, s_seconds, qB_mean, qB_cov):
    """<W_n> and <W_n^T W_n> for a whole trajectory of s moments.

    ``s_means``: (T, K); ``s_seconds``: (T, K, K).  Returns (T, D, D) pairs.
    """
    btb = b_slice_second_moments(qB_mean, qB_cov)
    w_mean = np.einsum("nk,rkj->nrj", s_means, qB_mean)
    w_sq = np.einsum("nkl,ikjl->nij", s_seconds, btb)
    return w_mean, w_sq


def _config_to_jsonable(config):
    out = {}
    for name, value in vars(config).items():
        out[name] = value.tolist() if isinstance(value, np.ndarray) else value
    return out


def config_from_dict(payload):
    return ModelConfig(**payload)


def save_checkpoint(path, post, config, variant="tvd", extra_arrays=None):
    """Write all variational parameters plus config to a single .npz file.

    The file carries a versioned JSON header (schema, variant, config,
    sweep count); arrays are stored raw so a load is bit-exact.
    """
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "variant": variant,
        "config": _config_to_jsonable(config),
        "sweeps_done": int(post.sweeps_done),
    }
    arrays = {
        "qX_means": post.qX.means, "qX_covs": post.qX.covs,
        "qX_cross": post.qX.cross_covs,
        "qX_logdet": np.array([post.qX.logdet_cov]),
        "qS_means": post.qS.means, "qS_covs": post.qS.covs,
        "qS_cross": post.qS.cross_covs,
        "qS_logdet": np.array([post.qS.logdet_cov]),
        "qC_mean": post.qC_mean, "qC_cov": post.qC_cov,
        "qB_mean": post.qB_mean, "qB_cov": post.qB_cov,
        "qA_mean": post.qA_mean, "qA_cov": post.qA_cov,
        "qTau_shape": post.qTau.shape, "qTau_rate": post.qTau.rate,
        "qGamma_shape": post.qGamma.shape, "qGamma_rate": post.qGamma.rate,
        "qBeta_shape": post.qBeta.shape, "qBeta_rate": post.qBeta.rate,
        "qAlpha_shape": post.qAlpha.shape, "qAlpha_rate": post.qAlpha.rate,
    }
    for key, arr in (extra_arrays or {}).items():
        arrays["extra_" + key] = arr
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(
            json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            **arrays)


def load_checkpoint(path):
    """Load a checkpoint; returns (posteriors, config, variant, extras)."""
    with np.load(path) as npz:
        header = json.loads(bytes(npz["header"].tobytes()).decode())
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema: {header.get('schema')}")
        config = config_from_dict(header["config"])
        post = FactorPosteriors(
            qX=GaussianChainPosterior(
                means=npz["qX_means"], covs=npz["qX_covs"],
                cross_covs=npz["qX_cross"], logdet_cov=float(npz["qX_logdet"][0]),
            ),
            qS=GaussianChainPosterior(
                means=npz["qS_means"], covs=npz["qS_covs"],
                cross_covs=npz["qS_cross"], logdet_cov=float(npz["qS_logdet"][0]),
            ),
            qC_mean=npz["qC_mean"], qC_cov=npz["qC_cov"],
            qB_mean=npz["qB_mean"], qB_cov=npz["qB_cov"],
            qA_mean=npz["qA_mean"], qA_cov=npz["qA_cov"],
            qTau=GammaPosterior(npz["qTau_shape"], npz["qTau_rate"]),
            qGamma=GammaPosterior(npz["qGamma_shape"], npz["qGamma_rate"]),
            qBeta=GammaPosterior(npz["qBeta_shape"], npz["qBeta_rate"]),
            qAlpha=GammaPosterior(npz["qAlpha_shape"], npz["qAlpha_rate"]),
            sweeps_done=header["sweeps_done"],
        )
        extras = {
            key[len("extra_"):]: npz[key] for key in npz.files
            if key.startswith("extra_")
        }
    return post, config, header["variant"], extras
