import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddesign.sem import (
    REFERENCE_BLOCKS,
    REFERENCE_QUADRATIC,
    BlockMatrix,
    CoarsenedRecord,
    ConstantPolicy,
    CostFunction,
    CostSpec,
    Dims,
    ErrorModel,
    FunctionPolicy,
    NoiseBlock,
    PolicyRangeError,
    QuadraticMediatorSpec,
    ShapeError,
    Stage,
    analytic_covariance,
    assemble_beta,
    causal_effect,
    coarsen,
    expected_cost,
    realized_cost,
    realized_costs,
    reference_errors,
    reference_model,
    sample_full,
    sample_full_quadratic,
)


def zero_blocks(d_C=2, d_M=3):
    return BlockMatrix(np.zeros(d_C), np.zeros((d_M, d_C)), np.zeros(d_M), np.zeros(d_C), np.zeros(d_M))


def gaussian_errors(d_C=2, d_M=3):
    return ErrorModel(
        C=NoiseBlock("gaussian", np.eye(d_C)),
        tr=NoiseBlock("gaussian", np.eye(2)),
        M=NoiseBlock("gaussian", np.eye(d_M)),
    )


# ---------------------------------------------------------------------------
# structure


def test_assemble_zero_blocks():
    assert not assemble_beta(zero_blocks()).any()


def test_assemble_reference_matrix():
    expected = np.array([
        [0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
        [0.5, -0.2, 0, 0, 0, 0, 0],
        [0.3, 0.1, 0.7, 0, 0, 0, 0],
        [0.5, 0.2, 0.2, 0, 0, 0, 0],
        [-0.1, 0.3, 0.1, 0, 0, 0, 0],
        [0.2, -0.1, 0, 0.5, 0.4, -0.3, 0],
    ])
    np.testing.assert_array_equal(assemble_beta(REFERENCE_BLOCKS), expected)


def test_assemble_shape_mismatch():
    blocks = REFERENCE_BLOCKS.replace(beta_Mt=[0.7, 0.2])
    with pytest.raises(ShapeError):
        assemble_beta(blocks, Dims(2, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_assemble_zero_pattern(d_C, d_M, seed):
    rng = np.random.default_rng(seed)
    b = BlockMatrix(rng.normal(size=d_C), rng.normal(size=(d_M, d_C)), rng.normal(size=d_M),
                    rng.normal(size=d_C), rng.normal(size=d_M))
    beta = assemble_beta(b)
    mask = np.zeros_like(beta, dtype=bool)
    it, iM, ir = d_C, d_C + 1, d_C + 1 + d_M
    mask[it, :d_C] = mask[iM:ir, :d_C] = mask[iM:ir, it] = True
    mask[ir, :d_C] = mask[ir, iM:ir] = True
    assert not beta[~mask].any()
    np.testing.assert_array_equal(assemble_beta(b), beta)  # idempotent


def test_causal_effect_examples():
    assert causal_effect(REFERENCE_BLOCKS) == 0.4
    assert causal_effect(REFERENCE_BLOCKS.replace(beta_Mt=np.zeros(3))) == 0.0
    unit = zero_blocks().replace(beta_rM=[1.0, 0, 0], beta_Mt=[1.0, 0, 0])
    assert causal_effect(unit) == 1.0


# ---------------------------------------------------------------------------
# noise


def test_t_scale_convention():
    nb = NoiseBlock("t", [[1.0, 0.2], [0.2, 2.0]], df=5)
    np.testing.assert_allclose(nb.covariance, np.array([[1.0, 0.2], [0.2, 2.0]]) * 5 / 3)
    nb_cov = NoiseBlock("t", [[1.0, 0.2], [0.2, 2.0]], df=5, matrix_is_covariance=True)
    np.testing.assert_allclose(nb_cov.covariance, [[1.0, 0.2], [0.2, 2.0]])


def test_non_pd_matrix_is_named():
    with pytest.raises(ValueError, match="Sigma_M"):
        NoiseBlock("gaussian", [[1.0, 2.0], [2.0, 1.0]], name="Sigma_M")


def test_reference_conditional_variance():
    e = reference_errors()
    assert e.var_t == pytest.approx(5 / 3)
    assert e.gamma0 == pytest.approx(-0.5)
    assert e.var_r_given_t == pytest.approx((1.5 - 0.25) * 5 / 3)


# ---------------------------------------------------------------------------
# sampling


def test_sample_empty():
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), 0, seed=1)
    assert d.n == 0 and d.x_M.shape == (0, 3)
    q = sample_full_quadratic(REFERENCE_BLOCKS, REFERENCE_QUADRATIC, reference_errors(), 0, 1)
    assert q.n == 0


def test_sample_deterministic():
    a = sample_full(REFERENCE_BLOCKS, reference_errors(), 50, seed=7)
    b = sample_full(REFERENCE_BLOCKS, reference_errors(), 50, seed=7)
    np.testing.assert_array_equal(a.matrix(), b.matrix())


def test_identity_model_covariance():
    d = sample_full(zero_blocks(), gaussian_errors(), 100_000, seed=3)
    np.testing.assert_allclose(np.cov(d.matrix(), rowvar=False), np.eye(7), atol=0.02)


def _cov_within_se(X, target, k=5.0):
    n = X.shape[0]
    Xc = X - X.mean(0)
    prod = Xc[:, :, None] * Xc[:, None, :]
    se = prod.std(0) / np.sqrt(n)
    return np.abs(prod.mean(0) - target) <= k * se


def test_reference_model_covariance():
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), 100_000, seed=11)
    target = analytic_covariance(REFERENCE_BLOCKS, reference_errors())
    assert _cov_within_se(d.matrix(), target).all()


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sampling_law_random_blocks(seed):
    rng = np.random.default_rng(seed)
    b = BlockMatrix(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, 3),
                    rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 3))
    e = gaussian_errors()
    d = sample_full(b, e, 100_000, seed=seed)
    assert _cov_within_se(d.matrix(), analytic_covariance(b, e)).all()


def test_quadratic_zero_is_linear_stream():
    zero = QuadraticMediatorSpec(REFERENCE_BLOCKS.beta_Mt, np.zeros(3))
    a = sample_full_quadratic(REFERENCE_BLOCKS, zero, reference_errors(), 500, seed=5)
    b = sample_full(REFERENCE_BLOCKS, reference_errors(), 500, seed=5)
    np.testing.assert_array_equal(a.matrix(), b.matrix())


def test_quadratic_mediator_mean_is_quadratic():
    blocks = REFERENCE_BLOCKS.replace(beta_MC=np.zeros((3, 2)))
    d = sample_full_quadratic(blocks, REFERENCE_QUADRATIC, reference_errors(), 100_000, seed=2)
    edges = np.quantile(d.x_t, np.linspace(0.02, 0.98, 21))
    idx = np.digitize(d.x_t, edges)
    centers, means = [], []
    for k in range(1, len(edges)):
        sel = idx == k
        centers.append(d.x_t[sel].mean())
        means.append(d.x_M[sel].mean(0))
    centers, means = np.array(centers), np.array(means)
    X = np.column_stack([np.ones_like(centers), centers, centers**2])
    coef = np.linalg.lstsq(X, means, rcond=None)[0]
    np.testing.assert_allclose(coef[1], REFERENCE_QUADRATIC.linear_coeffs, atol=0.05)
    np.testing.assert_allclose(coef[2], REFERENCE_QUADRATIC.quadratic_coeffs, atol=0.03)


# ---------------------------------------------------------------------------
# coarsening


def test_coarsen_full_policy():
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), 200, seed=1)
    c = coarsen(d, ConstantPolicy(1, 1), seed=2)
    assert (c.stage == Stage.FULL).all()
    np.testing.assert_array_equal(c.x_r, d.x_r)


def test_coarsen_half_first_stage():
    n = 10_000
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), n, seed=1)
    c = coarsen(d, ConstantPolicy(0.5, 1), seed=2)
    frac = np.mean(c.stage == Stage.ONE)
    assert abs(frac - 0.5) <= 3 * np.sqrt(0.25 / n)
    assert not np.any(c.stage == Stage.TWO)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_coarsen_marginals(p1, p2, seed):
    n = 20_000
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), n, seed=seed)
    c = coarsen(d, ConstantPolicy(p1, p2), seed=seed + 1)
    for stage, p in ((Stage.ONE, 1 - p1), (Stage.TWO, p1 * (1 - p2)), (Stage.FULL, p1 * p2)):
        f = np.mean(c.stage == stage)
        assert abs(f - p) <= 4 * np.sqrt(max(p * (1 - p), 1e-12) / n) + 1e-12


def test_coarsen_covariate_dependent():
    n = 50_000
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), n, seed=4)
    logistic = FunctionPolicy(lambda xC, xt: 1 / (1 + np.exp(-xt)), lambda xC, xt, xM: np.ones(len(xt)))
    c = coarsen(d, logistic, seed=5)
    edges = np.quantile(d.x_t, np.linspace(0, 1, 11)[1:-1])
    idx = np.digitize(d.x_t, edges)
    p1 = 1 / (1 + np.exp(-d.x_t))
    for k in range(10):
        sel = idx == k
        expected = np.mean(1 - p1[sel])
        got = np.mean(c.stage[sel] == Stage.ONE)
        assert abs(got - expected) <= 4 * np.sqrt(expected * (1 - expected) / sel.sum())


def test_coarsen_policy_range():
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), 10, seed=1)
    bad = FunctionPolicy(lambda xC, xt: np.full(len(xt), 1.5), lambda xC, xt, xM: np.ones(len(xt)))
    with pytest.raises(PolicyRangeError):
        coarsen(d, bad, seed=1)


def test_coarsen_deterministic_and_monotone_coupling():
    d = sample_full(REFERENCE_BLOCKS, reference_errors(), 1000, seed=1)
    a = coarsen(d, ConstantPolicy(0.4, 0.5), seed=9)
    b = coarsen(d, ConstantPolicy(0.4, 0.5), seed=9)
    np.testing.assert_array_equal(a.stage, b.stage)
    more = coarsen(d, ConstantPolicy(0.8, 0.5), seed=9)
    assert np.all(more.stage[a.stage >= 2] >= 2)


def test_record_presence_validated():
    with pytest.raises(ValueError):
        CoarsenedRecord(Stage.FULL, np.zeros(2), 0.0, np.zeros(3), None)


# ---------------------------------------------------------------------------
# costs


def unit_costs(c0=1.0):
    return CostSpec(c0, CostFunction("constant", 1.0), CostFunction("constant", 1.0))


def test_realized_cost_examples():
    assert realized_cost(CoarsenedRecord(Stage.ONE, np.zeros(2), 0.0), unit_costs()) == 1.0
    rec = CoarsenedRecord(Stage.FULL, np.zeros(2), 0.0, np.zeros(3), 0.0)
    assert realized_cost(rec, unit_costs()) == 3.0
    costs = reference_model(c0=1.0).costs
    two = CoarsenedRecord(Stage.TWO, np.array([3.0, 4.0]), 0.0, np.zeros(3))
    assert realized_cost(two, costs) == pytest.approx(1.5)
    full = CoarsenedRecord(Stage.FULL, np.array([3.0, 4.0]), 0.0, np.zeros(3), 1.0)
    assert realized_cost(full, costs) == pytest.approx(2.0)


def test_expected_cost_constant_cases():
    m = reference_model()
    assert expected_cost(m.blocks, m.errors, ConstantPolicy(1, 1), unit_costs()) == (3.0, 0.0)
    mean, se = expected_cost(m.blocks, m.errors, ConstantPolicy(2 / 3, 1 / 2), unit_costs())
    assert mean == pytest.approx(2.0, abs=1e-15) and se == 0.0


def test_expected_cost_converges():
    m = reference_model()
    mean, se = expected_cost(m.blocks, m.errors, ConstantPolicy(1, 1), m.costs, mc_n=100_000, seed=1)
    assert se / mean < 0.01


def test_realized_costs_match_expected():
    m = reference_model()
    policy = ConstantPolicy(0.6, 0.7)
    d = m.sample(100_000, seed=3)
    realized = realized_costs(coarsen(d, policy, seed=4), m.costs)
    mean, se = expected_cost(m.blocks, m.errors, policy, m.costs, mc_n=100_000, seed=5)
    tol = 4 * np.hypot(se, realized.std() / np.sqrt(realized.size))
    assert abs(realized.mean() - mean) <= tol
    one_by_one = [realized_cost(r, m.costs) for r in list(coarsen(d, policy, seed=4).records())[:200]]
    np.testing.assert_allclose(realized[:200], one_by_one)
