import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddesign.estimators import (
    CHUNK,
    InsufficientDataError,
    RankDeficiencyError,
    estimate_effect,
    estimate_nuisance,
    fit_all,
    fit_beta_M,
    fit_beta_r,
    fit_beta_tC,
    moment_residuals,
    stage_weights,
)
from fddesign.sem import (
    REFERENCE_BLOCKS,
    ConstantPolicy,
    ErrorModel,
    FullDataset,
    NoiseBlock,
    coarsen,
    reference_errors,
    reference_model,
    sample_full,
)

MODEL = reference_model()


def weighted_lstsq(X, y, w):
    """Reference weighted least squares through numpy's lstsq."""
    sw = np.sqrt(w)[:, None]
    return np.linalg.lstsq(X * sw, np.asarray(y).reshape(len(w), -1) * sw, rcond=None)[0]


def noiseless(n=200, seed=0, gamma_free=True):
    rng = np.random.default_rng(seed)
    b = REFERENCE_BLOCKS
    x_C = rng.normal(size=(n, 2))
    e_t = rng.normal(size=n)
    x_t = x_C @ b.beta_tC + e_t
    x_M = np.outer(x_t, b.beta_Mt) + x_C @ b.beta_MC.T + rng.normal(size=(n, 3))
    x_r = x_C @ b.beta_rC + x_M @ b.beta_rM
    return FullDataset(x_C, x_t, x_M, x_r)


# ---------------------------------------------------------------------------
# treatment stage


def test_beta_tC_exact_without_noise():
    rng = np.random.default_rng(1)
    x_C = rng.normal(size=(50, 2))
    x_t = x_C @ np.array([0.5, -0.2])
    d = FullDataset(x_C, x_t, np.zeros((50, 3)), np.zeros(50)).as_coarsened()
    fit = fit_beta_tC(d)
    np.testing.assert_allclose(fit.beta_tC, [0.5, -0.2], atol=1e-12)
    np.testing.assert_allclose(fit.eps_t, 0, atol=1e-12)


def test_beta_tC_consistent():
    d = MODEL.sample(5000, seed=2).as_coarsened()
    fit = fit_beta_tC(d)
    X = d.x_C
    resid = fit.eps_t
    G = np.linalg.inv(X.T @ X)
    meat = (X * resid[:, None] ** 2).T @ X
    se = np.sqrt(np.diag(G @ meat @ G))
    assert np.all(np.abs(fit.beta_tC - [0.5, -0.2]) <= 4 * se)


def test_beta_tC_too_few_records():
    d = MODEL.sample(1, seed=2).as_coarsened()
    with pytest.raises(RankDeficiencyError):
        fit_beta_tC(d)


def test_singular_confounders():
    d = MODEL.sample(100, seed=2)
    x_C = np.column_stack([d.x_C[:, 0], 2 * d.x_C[:, 0]])
    bad = FullDataset(x_C, d.x_t, d.x_M, d.x_r).as_coarsened()
    with pytest.raises(RankDeficiencyError, match="dimension"):
        fit_beta_tC(bad)


# ---------------------------------------------------------------------------
# mediator stage


def test_beta_M_exact_without_noise():
    rng = np.random.default_rng(3)
    x_C = rng.normal(size=(100, 2))
    x_t = x_C @ [0.5, -0.2] + rng.normal(size=100)
    x_M = np.outer(x_t, REFERENCE_BLOCKS.beta_Mt) + x_C @ REFERENCE_BLOCKS.beta_MC.T
    d = FullDataset(x_C, x_t, x_M, np.zeros(100)).as_coarsened()
    t = fit_beta_tC(d)
    m = fit_beta_M(d, ConstantPolicy(1, 1), t.eps_t)
    np.testing.assert_allclose(m.beta_Mt, REFERENCE_BLOCKS.beta_Mt, atol=1e-10)
    np.testing.assert_allclose(m.beta_MC, REFERENCE_BLOCKS.beta_MC, atol=1e-10)


def test_beta_M_matches_weighted_ols():
    policy = ConstantPolicy(0.6, 0.8)
    d = coarsen(MODEL.sample(3000, seed=4), policy, seed=5)
    t = fit_beta_tC(d)
    m = fit_beta_M(d, policy, t.eps_t)
    has = d.has_M
    ref = weighted_lstsq(np.column_stack([d.x_t[has], d.x_C[has]]), d.x_M, m.weights)
    np.testing.assert_allclose(m.beta_Mt, ref[0], rtol=1e-9)
    np.testing.assert_allclose(m.beta_MC, ref[1:].T, rtol=1e-9)


def test_beta_M_ignores_stage_one_records():
    policy = ConstantPolicy(0.5, 1)
    d = coarsen(MODEL.sample(2000, seed=6), policy, seed=7)
    t = fit_beta_tC(d)
    m = fit_beta_M(d, policy, t.eps_t)
    keep = d.subset(d.has_M)
    m2 = fit_beta_M(keep, policy, t.eps_t[d.has_M])
    np.testing.assert_allclose(m2.beta_Mt, m.beta_Mt, rtol=1e-12)


def test_beta_M_consistent_under_coarsening():
    policy = ConstantPolicy(0.5, 1)
    d = coarsen(MODEL.sample(10_000, seed=8), policy, seed=9)
    fit = fit_all(d, policy)
    from fddesign.estimators import influence_components
    phi_Mt, _ = influence_components(d, fit)
    se = phi_Mt.std(0) / np.sqrt(d.n)
    assert np.all(np.abs(fit.mediator.beta_Mt - REFERENCE_BLOCKS.beta_Mt) <= 4 * se)


def test_no_mediator_records():
    d = coarsen(MODEL.sample(50, seed=1), ConstantPolicy(1e-9, 1), seed=1)
    assert not d.has_M.any()
    t = fit_beta_tC(d)
    with pytest.raises(InsufficientDataError):
        fit_beta_M(d, ConstantPolicy(1e-9, 1), t.eps_t)


# ---------------------------------------------------------------------------
# response stage


def test_beta_r_exact_without_noise():
    d = noiseless().as_coarsened()
    fit = fit_all(d, ConstantPolicy(1, 1))
    np.testing.assert_allclose(fit.response.beta_rM, REFERENCE_BLOCKS.beta_rM, atol=1e-10)
    np.testing.assert_allclose(fit.response.beta_rC, REFERENCE_BLOCKS.beta_rC, atol=1e-10)
    assert abs(fit.response.gamma) < 1e-10


def test_beta_r_handles_confounding_where_ols_fails():
    d = MODEL.sample(100_000, seed=12).as_coarsened()
    fit = fit_all(d, ConstantPolicy(1, 1))
    from fddesign.estimators import influence_components
    _, phi_rM = influence_components(d, fit)
    se = phi_rM.std(0) / np.sqrt(d.n)
    assert np.all(np.abs(fit.response.beta_rM - REFERENCE_BLOCKS.beta_rM) <= 4 * se)
    ols = weighted_lstsq(np.column_stack([d.x_C, d.x_M]), d.x_r, np.ones(d.n))[:, 0]
    assert np.max(np.abs(ols[2:] - REFERENCE_BLOCKS.beta_rM) / se) > 4


def test_beta_r_reduces_to_weighted_ols():
    # beta_Mt = beta_MC = 0 makes eps_M = x_M, so instruments equal regressors
    blocks = REFERENCE_BLOCKS.replace(beta_Mt=np.zeros(3), beta_MC=np.zeros((3, 2)))
    policy = ConstantPolicy(0.7, 0.6)
    d = coarsen(sample_full(blocks, reference_errors(), 4000, seed=3), policy, seed=4)
    fit = fit_all(d, policy)
    full = d.is_full
    X = np.column_stack([d.x_C[full], fit.treatment.eps_t[full], d.x_M[d.full_within_M()]])
    ref = weighted_lstsq(X, d.x_r, fit.response.weights)[:, 0]
    np.testing.assert_allclose(fit.response.beta_rM, ref[3:], rtol=1e-8, atol=1e-12)


# ---------------------------------------------------------------------------
# nuisance and effect


def test_nuisance_noiseless_residual_variances():
    rng = np.random.default_rng(0)
    n = 300
    x_C = rng.normal(size=(n, 2))
    x_t = x_C @ [0.5, -0.2] + rng.normal(size=n)
    x_M = np.outer(x_t, [0.7, 0.2, 0.1]) + rng.normal(size=(n, 3))
    x_r = x_M @ [0.5, 0.4, -0.3]
    d = FullDataset(x_C, x_t, x_M, x_r).as_coarsened()
    nu = fit_all(d, ConstantPolicy(1, 1)).nuisance
    assert nu.var_r_given_t_hat < 1e-20


def test_nuisance_reference_moments():
    d = MODEL.sample(100_000, seed=21).as_coarsened()
    nu = fit_all(d, ConstantPolicy(1, 1)).nuisance
    assert nu.var_t_hat == pytest.approx(5 / 3, rel=0.02)
    assert nu.gamma_hat < 0


def test_effect_consistent_large_n():
    d = MODEL.sample(100_000, seed=22).as_coarsened()
    est = estimate_effect(d)
    assert abs(est.xi_hat - 0.4) <= 4 * est.se
    assert est.ci[0] <= est.xi_hat <= est.ci[1]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 1.0), st.floats(0.2, 1.0))
def test_effect_is_exact_product(seed, p1, p2):
    policy = ConstantPolicy(p1, p2)
    d = coarsen(MODEL.sample(600, seed=seed), policy, seed=seed)
    est = estimate_effect(d, policy)
    assert est.xi_hat == float(np.dot(est.beta_rM_hat, est.beta_Mt_hat))
    assert est.ci[0] <= est.xi_hat <= est.ci[1]


def test_moment_equations_hold():
    policy = ConstantPolicy(0.6, 0.7)
    d = coarsen(MODEL.sample(5000, seed=31), policy, seed=32)
    fit = fit_all(d, policy)
    res = moment_residuals(d, fit.treatment, fit.mediator, fit.response)
    assert max(res.values()) < 1e-8


def test_weight_scale_invariance():
    policy = ConstantPolicy(0.6, 0.7)
    d = coarsen(MODEL.sample(3000, seed=33), policy, seed=34)
    t = fit_beta_tC(d)
    w2, w3 = stage_weights(d, policy)
    m = fit_beta_M(d, policy, t.eps_t, weights=w2)
    m7 = fit_beta_M(d, policy, t.eps_t, weights=7.0 * w2)
    np.testing.assert_allclose(m7.beta_Mt, m.beta_Mt, rtol=1e-12)
    r = fit_beta_r(d, policy, t.eps_t, m.eps_M, weights=w3)
    r7 = fit_beta_r(d, policy, t.eps_t, m.eps_M, weights=7.0 * w3)
    np.testing.assert_allclose(r7.beta_rM, r.beta_rM, rtol=1e-12)
    nu, nu7 = estimate_nuisance(d, t, m, r), estimate_nuisance(d, t, m7, r7)
    np.testing.assert_allclose(nu7.Sigma_M_hat, nu.Sigma_M_hat, rtol=1e-12)


def test_full_data_reduction():
    d = MODEL.sample(2000, seed=35).as_coarsened()
    fit = fit_all(d, ConstantPolicy(1, 1))
    assert np.all(fit.mediator.weights == 1.0) and np.all(fit.response.weights == 1.0)
    ref = weighted_lstsq(np.column_stack([d.x_t, d.x_C]), d.x_M, np.ones(d.n))
    np.testing.assert_allclose(fit.mediator.beta_Mt, ref[0], rtol=1e-9)


def test_chunk_permutation_is_bit_identical():
    policy = ConstantPolicy(0.6, 0.7)
    n = 4 * CHUNK
    d = coarsen(MODEL.sample(n, seed=36), policy, seed=37)
    chunks = np.arange(n).reshape(4, CHUNK)
    order = chunks[[2, 0, 3, 1]].ravel()
    a = estimate_effect(d, policy)
    b = estimate_effect(d.permute(order), policy)
    assert a.xi_hat == b.xi_hat
    np.testing.assert_array_equal(a.beta_Mt_hat, b.beta_Mt_hat)


def test_arbitrary_permutation_agrees_to_rounding():
    policy = ConstantPolicy(0.6, 0.7)
    d = coarsen(MODEL.sample(3000, seed=38), policy, seed=39)
    order = np.random.default_rng(0).permutation(d.n)
    assert estimate_effect(d.permute(order), policy).xi_hat == pytest.approx(
        estimate_effect(d, policy).xi_hat, rel=1e-12)


def test_if_components_orthogonal():
    d = MODEL.sample(10_000, seed=40).as_coarsened()
    assert abs(estimate_effect(d).if_correlation) < 0.05


def test_gaussian_model_delta_method_se():
    errors = ErrorModel(C=NoiseBlock("gaussian", np.eye(2)), tr=NoiseBlock("gaussian", [[1, 0.3], [0.3, 1]]),
                        M=NoiseBlock("gaussian", np.eye(3)))
    est = [estimate_effect(sample_full(REFERENCE_BLOCKS, errors, 2000, seed=s).as_coarsened())
           for s in range(200)]
    xs = np.array([e.xi_hat for e in est])
    se = np.mean([e.se for e in est])
    assert xs.std() == pytest.approx(se, rel=0.15)
