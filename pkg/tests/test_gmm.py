"""Moment systems: evaluation, Jacobians, second moments, and the solver."""

import numpy as np
import pytest
from scipy.special import expit, logit

from helpers import fd_jacobian, random_logistic_sample
from ocbps.design import BalanceSpec, CovariateFunction, ObservedSample
from ocbps.errors import DimensionError, NonconvergenceError
from ocbps.gmm import (
    GmmOptions,
    MomentSystem,
    att_system,
    cbps_system,
    estimate_omega,
    eval_jacobian,
    eval_moments,
    ocbps_system,
    ridged_inverse,
    score_system,
    solve,
)
from ocbps.propensity import LogisticModel, SieveModel
from ocbps.simulation import DgpSpec, draw_replication, replication_seed

ONE = CovariateFunction.constant_one()
X1 = CovariateFunction.coordinate(1)


def _sample(T, x1, y=None):
    T = np.asarray(T)
    x1 = np.asarray(x1, dtype=float)
    y = np.zeros(T.size) if y is None else np.asarray(y, dtype=float)
    return ObservedSample(x1[:, None], T, y)


def _intercept_model():
    return LogisticModel(np.zeros(1), (ONE,))


def test_moments_vanish_at_sample_share():
    # pi identically T-bar makes the two weighted arm sizes agree
    T = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    system = cbps_system(_sample(T, np.arange(10.0)), (ONE,),
                         _intercept_model())
    g = eval_moments(system, np.array([logit(0.4)]))
    assert abs(g[0]) <= 1e-12


def test_moments_contrast_cancels_at_half():
    system = ocbps_system(_sample([1, 0], [3.0, -3.0]),
                          BalanceSpec(h1=(ONE,)), _intercept_model())
    g = eval_moments(system, np.zeros(1))
    assert g.shape == (1,) and g[0] == 0.0


def test_moments_level_block_hand_value():
    # pi = (0.25, 0.75) through a slope-only index on x1 = (-1, 1)
    sample = _sample([1, 0], [-1.0, 1.0])
    model = LogisticModel(np.zeros(1), (X1,))
    system = MomentSystem("ocbps", model, sample, block1=(), block2=(ONE,))
    g = eval_moments(system, np.array([np.log(3.0)]))
    assert g.shape == (1,)
    assert abs(g[0] - 1.0) < 1e-14


def test_jacobian_hand_value_contrast_block():
    system = ocbps_system(_sample([1, 0], [1.0, 2.0]),
                          BalanceSpec(h1=(ONE,)), _intercept_model())
    J = eval_jacobian(system, np.zeros(1))
    assert J.shape == (1, 1)
    assert abs(J[0, 0] - (-1.0)) < 1e-14


def test_jacobian_level_block_is_treated_mean():
    # at pi = 1/2 the level-block row collapses to -(1/n) sum_{treated} h2
    T = np.array([1, 0, 1, 1, 0])
    x1 = np.array([2.0, 9.0, -1.0, 4.0, 9.0])
    sample = _sample(T, x1)
    model = _intercept_model()
    system = MomentSystem("ocbps", model, sample, block1=(), block2=(X1,))
    J = eval_jacobian(system, np.zeros(1))
    assert abs(J[0, 0] - (-np.mean(T * x1))) < 1e-14


@pytest.mark.parametrize("kind", ["cbps", "ocbps", "att", "score"])
def test_jacobian_matches_finite_differences(kind):
    rng = np.random.default_rng(608 + len(kind))
    sample = random_logistic_sample(rng, n=120, d=3)
    fns = (ONE, X1, CovariateFunction.coordinate(2),
           CovariateFunction.square(3))
    model = LogisticModel(np.zeros(4), fns)
    if kind == "ocbps":
        system = ocbps_system(
            sample, BalanceSpec(h1=fns[:3], h2=(fns[3],)), model
        )
    elif kind == "cbps":
        system = cbps_system(sample, fns, model)
    elif kind == "att":
        system = att_system(sample, fns, model)
    else:
        system = score_system(sample, model)
    for _ in range(25):
        beta = rng.normal(scale=0.4, size=4)
        J = eval_jacobian(system, beta)
        fd = fd_jacobian(system, beta)
        scale = max(1.0, float(np.max(np.abs(J))))
        assert np.max(np.abs(J - fd)) <= 1e-6 * scale


def test_jacobian_matches_finite_differences_sieve():
    rng = np.random.default_rng(1234)
    sample = random_logistic_sample(rng, n=100, d=2)
    basis = (ONE, X1, CovariateFunction.square(1))
    model = SieveModel(np.zeros(3), basis)
    system = ocbps_system(sample, BalanceSpec(h1=basis[:2], h2=basis[2:]),
                          model)
    for _ in range(25):
        beta = rng.normal(scale=0.4, size=3)
        J = eval_jacobian(system, beta)
        fd = fd_jacobian(system, beta)
        scale = max(1.0, float(np.max(np.abs(J))))
        assert np.max(np.abs(J - fd)) <= 1e-6 * scale


def test_omega_intercept_value_four():
    # every contrast summand at pi = 1/2 is (+-2)^2
    system = cbps_system(_sample([1, 0, 1], [0.0, 1.0, 2.0]), (ONE,),
                         _intercept_model())
    omega = estimate_omega(system, np.zeros(1))
    assert omega.shape == (1, 1)
    assert omega[0, 0] == 4.0


def test_omega_symmetric_bit_exact_and_psd():
    rng = np.random.default_rng(77)
    for _ in range(20):
        sample = random_logistic_sample(rng, n=80, d=3)
        fns = (ONE, X1, CovariateFunction.coordinate(2),
               CovariateFunction.square(1), CovariateFunction.interaction(2, 3))
        model = LogisticModel(np.zeros(5), fns)
        omega = estimate_omega(cbps_system(sample, fns, model),
                               rng.normal(scale=0.3, size=5))
        assert np.array_equal(omega, omega.T)
        assert float(np.linalg.eigvalsh(omega).min()) >= -1e-12


def test_ridged_inverse_positive_definite():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(4, 4))
    omega = A @ A.T
    inv = ridged_inverse(omega)
    assert np.array_equal(inv, inv.T)
    assert float(np.linalg.eigvalsh(inv).min()) > 0.0


def test_ridged_inverse_rejects_bad_trace():
    from ocbps.errors import SingularDesignError

    with pytest.raises(SingularDesignError):
        ridged_inverse(np.zeros((2, 2)))
    with pytest.raises(SingularDesignError):
        ridged_inverse(np.array([[np.nan]]))


def test_solve_intercept_contrast_gives_sample_share():
    T = np.array([1, 1, 0, 0, 0, 0, 0, 1, 0, 0])
    system = ocbps_system(_sample(T, np.arange(10.0)),
                          BalanceSpec(h1=(ONE,)), _intercept_model())
    fit = solve(system)
    assert fit.converged
    assert abs(fit.beta_hat[0] - logit(0.3)) <= 1e-10
    assert np.max(np.abs(fit.residual)) <= 1e-10


def test_solve_intercept_level_gives_sample_share():
    # sum(T/p - 1) = 0 forces p = T-bar through the level block alone
    T = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    sample = _sample(T, np.arange(10.0))
    system = MomentSystem("ocbps", _intercept_model(), sample,
                          block1=(), block2=(ONE,))
    fit = solve(system)
    assert abs(fit.beta_hat[0] - logit(0.3)) <= 1e-10


def test_solve_working_configuration_residuals():
    # forty replications of the n=1000 correct-model design; the full-run
    # version of this check lives in the acceptance suite
    dgp = DgpSpec(scenario="both-correct", n=1000, beta1=0.0)
    spec = BalanceSpec.from_strings("1,x2,x3,x4", "x1")
    cmap = (ONE,) + tuple(CovariateFunction.coordinate(j) for j in range(1, 5))
    for r in range(40):
        sample = draw_replication(dgp, replication_seed(1, r))
        system = ocbps_system(sample, spec, LogisticModel(np.zeros(5), cmap))
        fit = solve(system)
        assert fit.converged
        assert np.max(np.abs(fit.residual)) <= 1e-8


def test_weighted_matching_identity_at_solution():
    dgp = DgpSpec(scenario="both-correct", n=1000, beta1=0.33)
    sample = draw_replication(dgp, replication_seed(4, 0))
    spec = BalanceSpec.from_strings("1,x2,x3,x4", "x1")
    system = ocbps_system(
        sample, spec,
        LogisticModel(np.zeros(5), (ONE,) + tuple(
            CovariateFunction.coordinate(j) for j in range(1, 5))),
    )
    fit = solve(system)
    p = system.model.with_beta(fit.beta_hat).pi_values(sample.covariates)
    T = sample.treatment.astype(bool)
    x1 = sample.covariates[:, 0]
    lhs = float(np.sum(((1.0 - p[T]) / p[T]) * x1[T]))
    rhs = float(np.sum(x1[~T]))
    assert abs(lhs - rhs) <= 1e-8 * sample.n


def test_solution_invariant_to_weight_scaling():
    rng = np.random.default_rng(19)
    sample = random_logistic_sample(rng, n=300, d=3)
    f_fns = (ONE, X1, CovariateFunction.coordinate(2),
             CovariateFunction.coordinate(3), CovariateFunction.square(1),
             CovariateFunction.square(2))
    cmap = f_fns[:5]
    model = LogisticModel(np.zeros(5), cmap)
    system = cbps_system(sample, f_fns, model)
    base = solve(system, GmmOptions(weighting=np.eye(6)))
    scaled = solve(system, GmmOptions(weighting=37.0 * np.eye(6)))
    assert np.max(np.abs(base.beta_hat - scaled.beta_hat)) <= 1e-8


def test_solve_deterministic_bit_identical():
    rng = np.random.default_rng(31)
    sample = random_logistic_sample(rng, n=200, d=2)
    spec = BalanceSpec(h1=(ONE, X1), h2=(CovariateFunction.coordinate(2),))
    model = LogisticModel(np.zeros(3), spec.functions)
    first = solve(ocbps_system(sample, spec, model))
    second = solve(ocbps_system(sample, spec, model))
    assert np.array_equal(first.beta_hat, second.beta_hat)
    assert np.array_equal(first.residual, second.residual)
    assert first.objective == second.objective


def test_two_step_stage_weight_and_convergence():
    rng = np.random.default_rng(43)
    sample = random_logistic_sample(rng, n=400, d=3)
    f_fns = (ONE, X1, CovariateFunction.coordinate(2),
             CovariateFunction.coordinate(3), CovariateFunction.square(1),
             CovariateFunction.square(3))
    model = LogisticModel(np.zeros(4), f_fns[:4])
    system = cbps_system(sample, f_fns, model)
    fit = solve(system, GmmOptions(weighting="two-step"))
    assert fit.converged
    assert fit.weight_used.shape == (6, 6)
    assert not np.allclose(fit.weight_used, np.eye(6))
    assert np.array_equal(fit.weight_used, fit.weight_used.T)
    assert fit.objective >= 0.0


def test_solve_separated_score_system_raises():
    x1 = np.concatenate([-np.arange(1.0, 6.0), np.arange(1.0, 6.0)])
    T = np.array([0] * 5 + [1] * 5)
    system = score_system(_sample(T, x1), LogisticModel(np.zeros(2), (ONE, X1)))
    with pytest.raises(NonconvergenceError) as excinfo:
        solve(system)
    assert excinfo.value.grad_norm is not None


def test_under_identified_system_rejected():
    sample = _sample([1, 0, 1], [0.0, 1.0, 2.0])
    model = LogisticModel(np.zeros(2), (ONE, X1))
    with pytest.raises(DimensionError, match="under-identified"):
        cbps_system(sample, (ONE,), model)


def test_unknown_kind_and_block2_misuse_rejected():
    sample = _sample([1, 0], [0.0, 1.0])
    model = _intercept_model()
    with pytest.raises(DimensionError):
        MomentSystem("ratio", model, sample, block1=(ONE,))
    with pytest.raises(DimensionError):
        MomentSystem("cbps", model, sample, block1=(ONE,), block2=(X1,))


def test_options_validation():
    with pytest.raises(DimensionError):
        GmmOptions(tol=0.0)
    with pytest.raises(DimensionError):
        GmmOptions(max_iter=0)
    with pytest.raises(DimensionError):
        GmmOptions(criterion="cue")
    with pytest.raises(DimensionError):
        solve(
            cbps_system(_sample([1, 0], [0.0, 1.0]), (ONE,),
                        _intercept_model()),
            GmmOptions(weighting="cue"),
        )


def test_root_criterion_demands_square_system():
    rng = np.random.default_rng(52)
    sample = random_logistic_sample(rng, n=120, d=2)
    model = LogisticModel(np.zeros(2), (ONE, X1))
    over = cbps_system(
        sample, (ONE, X1, CovariateFunction.coordinate(2)), model
    )
    with pytest.raises(DimensionError, match="just-identified"):
        solve(over, GmmOptions(criterion="root"))


def test_minimum_criterion_finds_existing_root():
    # when the square system does have a root, least-squares minimization
    # lands on the same solution the root iteration finds
    rng = np.random.default_rng(53)
    sample = random_logistic_sample(rng, n=300, d=2)
    spec = BalanceSpec(h1=(ONE, X1), h2=(CovariateFunction.coordinate(2),))
    model = LogisticModel(np.zeros(3), spec.functions)
    rooted = solve(ocbps_system(sample, spec, model))
    minimized = solve(
        ocbps_system(sample, spec, model), GmmOptions(criterion="minimum")
    )
    assert np.max(np.abs(minimized.residual)) <= 1e-8
    assert np.max(np.abs(minimized.beta_hat - rooted.beta_hat)) <= 1e-6
