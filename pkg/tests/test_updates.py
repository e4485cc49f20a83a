import numpy as np
import pytest

from conftest import make_data, make_post
from tvlssm import engine
from tvlssm.chain import BlockTridiagonalPrecision, solve_chain
from tvlssm.model import ModelConfig, ObservationSet


# ---------------------------------------------------------------------------
# tau


def test_tau_fully_missing_row_keeps_prior():
    cfg = ModelConfig(D=2, K=1, isotropic_noise=False, a_tau=0.3, b_tau=0.7)
    values = np.ones((2, 4))
    mask = np.array([[True] * 4, [False] * 4])
    data = ObservationSet(values=values, mask=mask)
    post = make_post(cfg, 4, m_rows=2)
    engine.update_tau(post, data, cfg)
    assert post.qTau.shape[1] == pytest.approx(0.3)
    assert post.qTau.rate[1] == pytest.approx(0.7)


def test_tau_shape_formula():
    cfg = ModelConfig(D=1, K=1, isotropic_noise=False, a_tau=1e-6, b_tau=1e-6)
    data = ObservationSet(values=np.zeros((1, 10)), mask=np.ones((1, 10), bool))
    post = make_post(cfg, 10)
    engine.update_tau(post, data, cfg)
    assert post.qTau.shape[0] == pytest.approx(5.000001)


def test_tau_rate_deterministic_residuals():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(D=2, K=1, isotropic_noise=False, a_tau=0.5, b_tau=2.0)
    n = 6
    x = rng.standard_normal((n + 1, 2))
    c = rng.standard_normal((1, 2))
    y = rng.standard_normal((1, n))
    data = ObservationSet(values=y, mask=np.ones((1, n), bool))
    post = make_post(cfg, n, x_means=x, c_mean=c)
    engine.update_tau(post, data, cfg)
    residuals = y[0] - c[0] @ x[1:].T
    assert post.qTau.rate[0] == pytest.approx(2.0 + 0.5 * np.sum(residuals ** 2))


def test_tau_isotropic_ties_rows():
    cfg = ModelConfig(D=1, K=1, isotropic_noise=True, a_tau=1e-6, b_tau=1e-6)
    data = make_data(1, 3, 5)
    post = make_post(cfg, 5, m_rows=3)
    engine.update_tau(post, data, cfg)
    assert post.qTau.shape.shape == (1,)
    assert post.qTau.shape[0] == pytest.approx(1e-6 + 0.5 * 15)


# ---------------------------------------------------------------------------
# C and gamma


def test_c_fully_missing_row_reverts_to_prior():
    cfg = ModelConfig(D=3, K=1)
    values = np.zeros((1, 4))
    data = ObservationSet(values=values, mask=np.zeros((1, 4), bool))
    post = make_post(cfg, 4, gamma=(2.0, 4.0))
    engine.update_c(post, data, cfg)
    np.testing.assert_allclose(post.qC_cov[0], np.diag([2.0, 2.0, 2.0]))
    np.testing.assert_allclose(post.qC_mean[0], 0.0)


def test_gamma_shape_formula():
    cfg = ModelConfig(D=2, K=1, a_gamma=1e-6)
    post = make_post(cfg, 3, m_rows=3)
    engine.update_gamma(post, cfg)
    np.testing.assert_allclose(post.qGamma.shape, 1e-6 + 1.5)


def test_c_scalar_conjugate_regression():
    """D=1: posterior matches 1-D Bayesian linear regression."""
    rng = np.random.default_rng(2)
    cfg = ModelConfig(D=1, K=1, isotropic_noise=False)
    n = 8
    x = rng.standard_normal((n + 1, 1))
    y = rng.standard_normal((1, n))
    data = ObservationSet(values=y, mask=np.ones((1, n), bool))
    gam, tau = 1.7, 2.3
    post = make_post(cfg, n, x_means=x, gamma=(gam, 1.0), tau=(tau, 1.0))
    engine.update_c(post, data, cfg)
    xs = x[1:, 0]
    var = 1.0 / (gam + tau * np.sum(xs ** 2))
    mean = var * tau * np.sum(y[0] * xs)
    assert post.qC_cov[0, 0, 0] == pytest.approx(var)
    assert post.qC_mean[0, 0] == pytest.approx(mean)


# ---------------------------------------------------------------------------
# B and beta


def test_b_constant_weights_reduce_to_ridge_regression():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(D=3, K=1)
    n = 20
    x = rng.standard_normal((n + 1, 3))
    post = make_post(cfg, n, x_means=x, beta=(1.5, 3.0))
    s_means = np.ones((n, 1))
    s_seconds = np.ones((n, 1, 1))
    engine.update_b(post, cfg, s_means, s_seconds)
    beta_mean = 0.5
    cov_oracle = np.linalg.inv(beta_mean * np.eye(3) + x[:-1].T @ x[:-1])
    np.testing.assert_allclose(post.qB_cov[0], cov_oracle, atol=1e-12)
    for r in range(3):
        mean_oracle = cov_oracle @ (x[:-1].T @ x[1:, r])
        np.testing.assert_allclose(post.qB_mean[r, 0], mean_oracle, atol=1e-12)


def test_b_no_transitions_keeps_prior():
    cfg = ModelConfig(D=2, K=2)
    post = make_post(cfg, 0, beta=(2.0, 1.0))
    engine.update_b(post, cfg, np.zeros((0, 2)), np.zeros((0, 2, 2)))
    np.testing.assert_allclose(post.qB_cov[0], np.eye(4) / 2.0)
    np.testing.assert_allclose(post.qB_mean, 0.0)


def test_b_normal_equations_oracle_d1_k2():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(D=1, K=2)
    n = 50
    x = rng.standard_normal((n + 1, 1))
    s = rng.standard_normal((n + 1, 2))
    post = make_post(cfg, n, x_means=x, beta=(1.0, 1.0))
    s_means = s[1:]
    s_seconds = s[1:, :, None] * s[1:, None, :]
    engine.update_b(post, cfg, s_means, s_seconds)
    # regressors z_n = s_n * x_{n-1}; target x_n
    z = s[1:] * x[:-1]
    cov_oracle = np.linalg.inv(np.eye(2) + z.T @ z)
    mean_oracle = cov_oracle @ (z.T @ x[1:, 0])
    np.testing.assert_allclose(post.qB_cov[0], cov_oracle, atol=1e-10)
    np.testing.assert_allclose(post.qB_mean[0, :, 0], mean_oracle, atol=1e-10)


def test_beta_shape_and_rate():
    rng = np.random.default_rng(5)
    cfg = ModelConfig(D=2, K=2, a_beta=0.1, b_beta=0.2)
    post = make_post(cfg, 3, b_mean=rng.standard_normal((2, 2, 2)))
    engine.update_beta(post, cfg)
    np.testing.assert_allclose(post.qBeta.shape, 0.1 + 1.0)
    b_sq = np.einsum("rkd,rkd->kd", post.qB_mean, post.qB_mean)
    np.testing.assert_allclose(post.qBeta.rate, 0.2 + 0.5 * b_sq)


# ---------------------------------------------------------------------------
# A and alpha


def test_a_no_transitions_keeps_prior():
    cfg = ModelConfig(D=1, K=2)
    post = make_post(cfg, 0, alpha=(3.0, 6.0))
    engine.update_a(post, cfg)
    np.testing.assert_allclose(post.qA_cov[0], np.eye(2) * 2.0)
    np.testing.assert_allclose(post.qA_mean, 0.0)


def test_alpha_shape_formula():
    cfg = ModelConfig(D=1, K=2, a_alpha=1e-6)
    post = make_post(cfg, 2)
    engine.update_alpha(post, cfg)
    np.testing.assert_allclose(post.qAlpha.shape, 1e-6 + 1.0)


def test_a_recovers_decay_rate():
    """Deterministic s_n = 0.9 s_{n-1}: posterior mean -> 0.9."""
    cfg = ModelConfig(D=1, K=1)
    n = 400
    s = 0.9 ** np.arange(n + 1)[:, None] * 5.0
    post = make_post(cfg, n, s_means=s, alpha=(1.0, 1.0))
    engine.update_a(post, cfg)
    assert abs(post.qA_mean[0, 0] - 0.9) < 1e-2


# ---------------------------------------------------------------------------
# X update


def test_x_all_missing_zero_dynamics():
    cfg = ModelConfig(D=2, K=1, lambda0=np.eye(2))
    n = 4
    data = ObservationSet(values=np.zeros((2, n)), mask=np.zeros((2, n), bool))
    post = make_post(cfg, n, m_rows=2)
    w_means = np.zeros((n, 2, 2))
    w_sqs = np.zeros((n, 2, 2))
    engine.update_x(post, data, cfg, w_means, w_sqs)
    np.testing.assert_allclose(post.qX.means, 0.0)
    np.testing.assert_allclose(post.qX.covs[0], np.eye(2))


def test_x_dense_oracle():
    rng = np.random.default_rng(6)
    cfg = ModelConfig(D=2, K=1, lambda0=2.0 * np.eye(2), mu0_x=np.array([0.3, -0.1]))
    n = 5
    data = make_data(7, 3, n, missing=0.3)
    post = make_post(cfg, n, m_rows=3,
                     c_mean=rng.standard_normal((3, 2)),
                     c_cov=np.tile(0.1 * np.eye(2), (3, 1, 1)),
                     tau=(2.0, 1.0))
    w_means = 0.3 * rng.standard_normal((n, 2, 2))
    w_sqs = np.einsum("nij,nik->njk", w_means, w_means) + 0.05 * np.eye(2)
    prec, rhs = engine.build_x_system(post, data, cfg, w_means, w_sqs)
    full = prec.dense()
    cov = np.linalg.inv(full)
    mean = cov @ rhs.ravel()
    engine.update_x(post, data, cfg, w_means, w_sqs)
    np.testing.assert_allclose(post.qX.means.ravel(), mean, atol=1e-10)
    for i in range(n + 1):
        np.testing.assert_allclose(
            post.qX.covs[i], cov[2 * i:2 * i + 2, 2 * i:2 * i + 2], atol=1e-10)


def scalar_rts_smoother(y, c, tau, w, m0, lam0):
    """Textbook Kalman filter + RTS smoother for the scalar chain,
    including the auxiliary initial state; returns means, variances and
    lag-one smoothed covariances."""
    n = len(y)
    mf = np.empty(n + 1)
    pf = np.empty(n + 1)
    mp = np.empty(n + 1)
    pp = np.empty(n + 1)
    mf[0], pf[0] = m0, 1.0 / lam0
    for t in range(1, n + 1):
        mp[t] = w * mf[t - 1]
        pp[t] = w * pf[t - 1] * w + 1.0
        k_gain = pp[t] * c / (c * pp[t] * c + 1.0 / tau)
        mf[t] = mp[t] + k_gain * (y[t - 1] - c * mp[t])
        pf[t] = (1.0 - k_gain * c) * pp[t]
    ms = np.empty(n + 1)
    ps = np.empty(n + 1)
    lag = np.empty(n)
    ms[-1], ps[-1] = mf[-1], pf[-1]
    for t in range(n - 1, -1, -1):
        j_gain = pf[t] * w / pp[t + 1]
        ms[t] = mf[t] + j_gain * (ms[t + 1] - mp[t + 1])
        ps[t] = pf[t] + j_gain * (ps[t + 1] - pp[t + 1]) * j_gain
        lag[t] = j_gain * ps[t + 1]
    return ms, ps, lag


def test_x_matches_scalar_rts_smoother():
    rng = np.random.default_rng(8)
    n = 12
    c, tau, w, m0, lam0 = 1.3, 2.5, 0.8, 0.4, 1.5
    y = rng.standard_normal(n)
    cfg = ModelConfig(D=1, K=1, lambda0=np.array([[lam0]]), mu0_x=np.array([m0]),
                      isotropic_noise=False)
    data = ObservationSet(values=y[None, :], mask=np.ones((1, n), bool))
    post = make_post(cfg, n, c_mean=np.array([[c]]), tau=(tau, 1.0))
    w_means = np.full((n, 1, 1), w)
    w_sqs = np.full((n, 1, 1), w * w)
    engine.update_x(post, data, cfg, w_means, w_sqs)
    ms, ps, lag = scalar_rts_smoother(y, c, tau, w, m0, lam0)
    np.testing.assert_allclose(post.qX.means[:, 0], ms, atol=1e-10)
    np.testing.assert_allclose(post.qX.covs[:, 0, 0], ps, atol=1e-10)
    np.testing.assert_allclose(post.qX.cross_covs[:, 0, 0], lag, atol=1e-10)


def test_x_second_moment_gap_psd():
    eng = __import__("conftest").warmed_engine(seed=10)
    eng.update_x()
    for cov in eng.post.qX.covs:
        assert np.linalg.eigvalsh(cov).min() > -1e-10


# ---------------------------------------------------------------------------
# S update


def test_s_zero_b_reverts_to_prior_chain():
    cfg = ModelConfig(D=2, K=2, v0=np.eye(2), mu0_s=np.array([0.5, -0.5]))
    n = 6
    post = make_post(cfg, n, a_mean=0.7 * np.eye(2),
                     x_means=np.random.default_rng(9).standard_normal((n + 1, 2)))
    engine.update_s(post, cfg)
    # oracle: prior chain with <A> = 0.7 I and no data term
    ata = (0.7 ** 2) * np.eye(2)
    diag = np.empty((n + 1, 2, 2))
    diag[0] = cfg.v0 + ata
    diag[1:-1] = np.eye(2) + ata
    diag[-1] = np.eye(2)
    rhs = np.zeros((n + 1, 2))
    rhs[0] = cfg.v0 @ cfg.mu0_s
    oracle = solve_chain(
        BlockTridiagonalPrecision(diag=diag, offdiag=np.tile(-0.7 * np.eye(2), (n, 1, 1))),
        rhs)
    np.testing.assert_allclose(post.qS.means, oracle.means, atol=1e-12)
    np.testing.assert_allclose(post.qS.covs, oracle.covs, atol=1e-12)


def test_s_dense_oracle():
    eng = __import__("conftest").warmed_engine(seed=11, d_dim=2, k_dim=2, n_times=5)
    prec, rhs = engine.build_s_system(eng.post, eng.config)
    cov = np.linalg.inv(prec.dense())
    mean = cov @ rhs.ravel()
    engine.update_s(eng.post, eng.config)
    np.testing.assert_allclose(eng.post.qS.means.ravel(), mean, atol=1e-10)
    k = 2
    for i in range(6):
        np.testing.assert_allclose(
            eng.post.qS.covs[i], cov[k * i:k * i + k, k * i:k * i + k], atol=1e-10)
    for i in range(5):
        np.testing.assert_allclose(
            eng.post.qS.cross_covs[i],
            cov[k * (i + 1):k * (i + 2), k * i:k * (i + 1)], atol=1e-10)


def test_s_concentrates_on_true_multiplier():
    """K=1, B=I, x_n = 2 x_{n-1} exactly: s_n posterior mean near 2."""
    cfg = ModelConfig(D=1, K=1)
    n = 8
    x = (2.0 ** np.arange(n + 1))[:, None]
    b_mean = np.ones((1, 1, 1))
    post = make_post(cfg, n, x_means=x, b_mean=b_mean, a_mean=np.array([[1.0]]))
    engine.update_s(post, cfg)
    assert np.all(np.abs(post.qS.means[3:, 0] - 2.0) < 0.1)


# ---------------------------------------------------------------------------
# missing-data consistency against explicit loops


def test_missing_data_loop_consistency():
    rng = np.random.default_rng(12)
    cfg = ModelConfig(D=2, K=2, isotropic_noise=False)
    m_rows, n = 3, 4
    values = rng.standard_normal((m_rows, n))
    mask = np.array([
        [True, False, True, True],
        [False, False, True, False],
        [True, True, False, True],
    ])
    data = ObservationSet(values=values, mask=mask)
    post = make_post(cfg, n, m_rows=m_rows,
                     x_means=rng.standard_normal((n + 1, 2)),
                     x_covs=np.tile(0.2 * np.eye(2), (n + 1, 1, 1)),
                     c_mean=rng.standard_normal((m_rows, 2)),
                     c_cov=np.tile(0.1 * np.eye(2), (m_rows, 1, 1)),
                     tau=(1.5, 1.0), gamma=(2.0, 1.0))
    xx = post.qX.second_moments()[1:]
    cc = engine.c_second_moments(post)

    # tau rate by explicit loop
    eng_post = make_post(cfg, n, m_rows=m_rows, x_means=post.qX.means,
                         x_covs=post.qX.covs, c_mean=post.qC_mean,
                         c_cov=post.qC_cov, tau=(1.5, 1.0), gamma=(2.0, 1.0))
    engine.update_tau(eng_post, data, cfg)
    for m in range(m_rows):
        rate = cfg.b_tau
        for t in range(n):
            if mask[m, t]:
                xi = (values[m, t] ** 2
                      - 2 * values[m, t] * post.qC_mean[m] @ post.qX.means[t + 1]
                      + np.sum(cc[m] * xx[t]))
                rate += 0.5 * xi
        assert eng_post.qTau.rate[m] == pytest.approx(rate)

    # C update by explicit loop
    eng_post2 = make_post(cfg, n, m_rows=m_rows, x_means=post.qX.means,
                          x_covs=post.qX.covs, c_mean=post.qC_mean,
                          c_cov=post.qC_cov, tau=(1.5, 1.0), gamma=(2.0, 1.0))
    engine.update_c(eng_post2, data, cfg)
    for m in range(m_rows):
        prec = 2.0 * np.eye(2)
        lin = np.zeros(2)
        for t in range(n):
            if mask[m, t]:
                prec = prec + 1.5 * xx[t]
                lin = lin + values[m, t] * 1.5 * post.qX.means[t + 1]
        cov = np.linalg.inv(prec)
        np.testing.assert_allclose(eng_post2.qC_cov[m], cov, atol=1e-12)
        np.testing.assert_allclose(eng_post2.qC_mean[m], cov @ lin, atol=1e-12)

    # X update data terms by explicit loop (psi and rhs)
    w_means = np.zeros((n, 2, 2))
    w_sqs = np.zeros((n, 2, 2))
    prec_obj, rhs = engine.build_x_system(post, data, cfg, w_means, w_sqs)
    for t in range(n):
        psi = np.zeros((2, 2))
        lin = np.zeros(2)
        for m in range(m_rows):
            if mask[m, t]:
                psi += 1.5 * cc[m]
                lin += values[m, t] * 1.5 * post.qC_mean[m]
        expected = np.eye(2) + psi if t == n - 1 else np.eye(2) + w_sqs[t + 1] + psi
        np.testing.assert_allclose(prec_obj.diag[t + 1], expected, atol=1e-12)
        np.testing.assert_allclose(rhs[t + 1], lin, atol=1e-12)
