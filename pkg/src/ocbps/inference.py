"""Plug-in asymptotic variances and confidence intervals.

Every variance here is for the scaled estimator sqrt(n)(estimate - truth), so
standard errors are sqrt(variance / n).  All population quantities are
replaced by empirical means at the fitted coefficients; expectations over the
treatment indicator use the inverse-weighting identities, which is why squared
propensities appear in the level term.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import ndtri

from .design import BalanceSpec, ObservedSample
from .errors import DataError, DimensionError, SingularDesignError
from .estimators import OutcomeFits, att_from_propensity
from .gmm import FitResult, ridged_inverse
from .propensity import clip_propensity


class VarianceFloorWarning(RuntimeWarning):
    """A variance plug-in came out negative and was floored at zero."""


def _floor_nonnegative(value: float, what: str) -> float:
    if value < 0.0:
        warnings.warn(
            f"{what} plug-in was negative ({value:.3e}); floored at 0",
            VarianceFloorWarning,
            stacklevel=3,
        )
        return 0.0
    return float(value)


def _clipped(sample, pi_values):
    pi_values = np.asarray(pi_values, dtype=float)
    if pi_values.shape != (sample.n,):
        raise DimensionError(
            f"pi_values shape {pi_values.shape} does not match n={sample.n}"
        )
    if not np.all(np.isfinite(pi_values)):
        raise DataError("pi_values contain non-finite entries")
    p, _ = clip_propensity(pi_values)
    return p


def _mu_summands(sample, p):
    T = sample.treatment.astype(float)
    Y = sample.outcome
    return T * Y / p - (1.0 - T) * Y / (1.0 - p)


def _sigma_mu(sample, p, mu_hat):
    """Level variance: plug-in of E[Y(1)^2/pi + Y(0)^2/(1-pi)] - mu^2."""
    T = sample.treatment.astype(float)
    Y = sample.outcome
    second = np.mean(T * Y**2 / p**2 + (1.0 - T) * Y**2 / (1.0 - p) ** 2)
    return float(second - mu_hat**2)


def _sigma_mu_model(p, mu_hat, outcome_fits, spec, X):
    """Level variance with the arm second moments taken from the fitted
    outcome model: E[Y(t)^2 | X] = (mean)^2 + residual variance.

    Unlike the inverse-weighted plug-in this is smooth in X, which keeps
    a small difference of large terms stable.
    """
    K = outcome_fits.k_values(spec, X)
    L = outcome_fits.l_values(spec, X)
    second = np.mean(
        ((K + L) ** 2 + outcome_fits.sigma2_treated) / p
        + (K**2 + outcome_fits.sigma2_control) / (1.0 - p)
    )
    return float(second - mu_hat**2)


def var_true(sample: ObservedSample, pi_values) -> float:
    """Variance of the weighted estimator when the propensity is known."""
    p = _clipped(sample, pi_values)
    mu = float(np.mean(_mu_summands(sample, p)))
    return _floor_nonnegative(_sigma_mu(sample, p, mu), "known-propensity variance")


def _h_y(sample, model, outcome_fits, spec, p):
    """Plug-in of the level-vs-coefficients cross derivative H_y (length q)."""
    X = sample.covariates
    K = outcome_fits.k_values(spec, X)
    L = outcome_fits.l_values(spec, X)
    P = model.pi_grad_matrix(X)
    coef = (K + (1.0 - p) * L) / (p * (1.0 - p))
    return -np.mean(coef[:, None] * P, axis=0)


def var_glm(sample: ObservedSample, mle_model, outcome_fits: OutcomeFits,
            spec: BalanceSpec) -> float:
    """Variance of the weighted estimator at a maximum-likelihood propensity.

    The level variance minus a quadratic form in the Fisher information.
    The level term uses the outcome-model second moments; the inverse-
    weighted level plug-in is too noisy to survive the near-total
    cancellation between the two terms.

    Estimating the propensity can only reduce the asymptotic variance, so
    the result is additionally capped at the known-propensity plug-in
    evaluated at the same fitted values; the two level conventions would
    otherwise let sampling noise break that ordering.
    """
    p = _clipped(sample, mle_model.pi_values(sample.covariates))
    mu = float(np.mean(_mu_summands(sample, p)))
    sigma = _sigma_mu_model(p, mu, outcome_fits, spec, sample.covariates)
    hy = _h_y(sample, mle_model, outcome_fits, spec, p)
    M = mle_model.index_matrix(sample.covariates)
    info = M.T @ ((p * (1.0 - p))[:, None] * M) / sample.n
    try:
        x = np.linalg.solve(info, hy)
    except np.linalg.LinAlgError:
        raise SingularDesignError("singular Fisher information") from None
    val = min(sigma - float(hy @ x), _sigma_mu(sample, p, mu))
    return _floor_nonnegative(val, "mle-propensity variance")


def _fit_system(fit: FitResult, expect_kind=None):
    system = getattr(fit, "system", None)
    if system is None:
        raise DataError("fit does not carry its moment system")
    if expect_kind is not None and system.kind not in expect_kind:
        raise DataError(
            f"fit solved a {system.kind!r} system; expected one of {expect_kind}"
        )
    return system


def _model_omega(system, p):
    """Second-moment matrix of the balance conditions with the treatment
    indicator integrated out at the fitted propensity.

    Conditional on X the contrast weight has second moment 1/(pi(1-pi)),
    the level weight (1-pi)/pi, and their product 1/pi; the blocks below
    average those against the condition functions.  Smooth in X, unlike
    the outer-product estimate, so differences against the level variance
    do not inherit the inverse-propensity tails.
    """
    H1 = system._cache["F1"]
    H2 = system._cache["F2"]
    n = system.n
    d11 = 1.0 / (p * (1.0 - p))
    omega11 = H1.T @ (d11[:, None] * H1) / n
    if H2.shape[1] == 0:
        return (omega11 + omega11.T) / 2.0
    omega12 = H1.T @ (H2 / p[:, None]) / n
    omega22 = H2.T @ (((1.0 - p) / p)[:, None] * H2) / n
    omega = np.block([[omega11, omega12], [omega12.T, omega22]])
    return (omega + omega.T) / 2.0


def _model_jacobian(system, model, p):
    """Jacobian of the balance conditions in the coefficients with the
    treatment indicator integrated out at the fitted propensity.

    The conditional mean of the contrast-weight derivative is
    -1/(pi(1-pi)) times the propensity gradient (for a logistic map the
    propensity factors cancel entirely), and the level block keeps a 1/pi
    factor.  The raw per-unit derivative carries T/pi^2 terms whose tails
    are far heavier than the conditions themselves, so the sample Jacobian
    is the noisiest piece of the sandwich; this replaces it.
    """
    P = model.pi_grad_matrix(system.sample.covariates)
    F1 = system._cache["F1"]
    F2 = system._cache["F2"]
    n = system.n
    if system.kind in ("cbps", "ocbps"):
        e1 = 1.0 / (p * (1.0 - p))
    elif system.kind == "att":
        e1 = 1.0 / (1.0 - p)
    else:  # score
        e1 = np.ones_like(p)
    rows = [-(F1.T @ (e1[:, None] * P)) / n]
    if F2.shape[1]:
        rows.append(-(F2.T @ (P / p[:, None])) / n)
    return np.vstack(rows)


def _model_cov(system, p, outcome_fits, spec):
    """Covariance of the weighted-level summand with each balance condition,
    with the treatment indicator integrated out at the fitted propensity.

    Conditional on X the products have means (K+(1-pi)L)/(pi(1-pi)) for the
    contrast block and (K+(1-pi)L)/pi for the level block; the conditional
    means of the conditions themselves vanish, so no centering term remains.
    """
    X = system.sample.covariates
    K = outcome_fits.k_values(spec, X)
    L = outcome_fits.l_values(spec, X)
    core = K + (1.0 - p) * L
    H1 = system._cache["F1"]
    H2 = system._cache["F2"]
    n = system.n
    parts = [H1.T @ (core / (p * (1.0 - p))) / n]
    if H2.shape[1]:
        parts.append(H2.T @ (core / p) / n)
    return np.concatenate(parts)


def var_cbps(sample: ObservedSample, fit: FitResult,
             outcome_fits: OutcomeFits, f_spec=None) -> float:
    """Variance of the weighted estimator at a one-block balancing fit.

    Sandwich form with the balance conditions as the estimating equations:
    level variance, plus a quadratic term in H_y through the coefficient
    covariance, minus twice the level/coefficient covariance correction.
    Every piece integrates the treatment indicator out at the fitted
    propensity; the raw inverse-weighted plug-ins are too noisy for the
    cancellation between the three terms.
    """
    system = _fit_system(fit, expect_kind=("cbps",))
    beta = fit.beta_hat
    model = system.model.with_beta(beta)
    p = _clipped(sample, model.pi_values(sample.covariates))
    mu = float(np.mean(_mu_summands(sample, p)))
    spec_for_y = _spec_from_outcome_fits(outcome_fits, f_spec)
    sigma = _sigma_mu_model(p, mu, outcome_fits, spec_for_y, sample.covariates)
    hy = _h_y(sample, model, outcome_fits, spec_for_y, p)
    G = _model_jacobian(system, model, p)
    omega_inv = ridged_inverse(_model_omega(system, p))
    A = G.T @ omega_inv @ G
    cov = _model_cov(system, p, outcome_fits, spec_for_y)
    try:
        b = np.linalg.solve(A, hy)
    except np.linalg.LinAlgError:
        raise SingularDesignError(
            "singular curvature matrix in balancing variance"
        ) from None
    val = sigma + float(hy @ b) - 2.0 * float(b @ (G.T @ (omega_inv @ cov)))
    return _floor_nonnegative(val, "balancing-fit variance")


def _spec_from_outcome_fits(outcome_fits, spec):
    if isinstance(spec, BalanceSpec):
        return spec
    raise DataError(
        "a BalanceSpec describing the fitted outcome bases is required"
    )


def var_ocbps(sample: ObservedSample, fit: FitResult,
              outcome_fits: OutcomeFits, spec: BalanceSpec) -> float:
    """Variance of the weighted estimator at the two-block balancing fit.

    Level variance minus the projection of the outcome-coefficient vector
    v = (alpha1; alpha2) through the moment geometry, with the second-moment
    inverse as the weighting.  In the just-identified case this collapses to
    sigma_mu - v' Omega v.
    """
    general, _ = ocbps_variance_forms(sample, fit, outcome_fits, spec)
    return _floor_nonnegative(general, "two-block balancing variance")


def ocbps_variance_forms(sample: ObservedSample, fit: FitResult,
                         outcome_fits: OutcomeFits, spec: BalanceSpec):
    """Both algebraic forms of the two-block variance (unfloored).

    Returns:
        (general, direct) where general = sigma_mu - v'G(G'W G)^-1 G'v with
        W the ridged inverse of Omega, and direct = sigma_mu - v'Omega_r v
        (None unless m = q).  For square invertible G the two agree exactly.

    Both forms share the model-integrated Omega and level term; with those
    the whole expression reduces, up to an O(1/n) balance remainder, to the
    efficiency-bound plug-in, which is what keeps it stable when the
    propensity has heavy inverse tails.
    """
    system = _fit_system(fit, expect_kind=("ocbps",))
    v = np.concatenate([outcome_fits.alpha1_hat, outcome_fits.alpha2_hat])
    if v.shape != (system.m,):
        raise DimensionError(
            f"outcome coefficient length {v.size} does not match m={system.m}"
        )
    beta = fit.beta_hat
    model = system.model.with_beta(beta)
    p = _clipped(sample, model.pi_values(sample.covariates))
    mu = float(np.mean(_mu_summands(sample, p)))
    sigma = _sigma_mu_model(p, mu, outcome_fits, spec, sample.covariates)
    G = _model_jacobian(system, model, p)
    omega = _model_omega(system, p)
    ridge = 1e-8 * float(np.trace(omega)) / system.m
    omega_r = omega + ridge * np.eye(system.m)
    omega_inv = ridged_inverse(omega)
    A = G.T @ omega_inv @ G
    b = G.T @ v
    try:
        general = sigma - float(b @ np.linalg.solve(A, b))
    except np.linalg.LinAlgError:
        raise SingularDesignError(
            "singular curvature matrix in two-block variance"
        ) from None
    direct = None
    if system.m == system.q:
        direct = sigma - float(v @ omega_r @ v)
    return general, direct


def var_vopt_plugin(sample: ObservedSample, pi_values,
                    outcome_fits: OutcomeFits, spec: BalanceSpec) -> float:
    """Plug-in of the semiparametric variance bound.

    mean of sigma1^2/pi + sigma0^2/(1-pi) + (L(X) - mu)^2 using the
    homoskedastic arm residual variances and the fitted effect function.
    """
    p = _clipped(sample, pi_values)
    mu = float(np.mean(_mu_summands(sample, p)))
    L = outcome_fits.l_values(spec, sample.covariates)
    val = float(
        np.mean(
            outcome_fits.sigma2_treated / p
            + outcome_fits.sigma2_control / (1.0 - p)
            + (L - mu) ** 2
        )
    )
    return _floor_nonnegative(val, "efficiency-bound plug-in")


def var_att(sample: ObservedSample, fit: FitResult,
            outcome_fits: OutcomeFits, spec: BalanceSpec) -> float:
    """Variance of the odds-weighted ATT estimator (both models correct)."""
    system = _fit_system(fit, expect_kind=("att",))
    model = system.model.with_beta(fit.beta_hat)
    return att_variance_from_pi(
        sample, model.pi_values(sample.covariates), outcome_fits, spec
    )


def att_variance_from_pi(sample, pi_values, outcome_fits: OutcomeFits,
                         spec: BalanceSpec) -> float:
    """ATT variance plug-in from explicit propensity values."""
    p = _clipped(sample, pi_values)
    p_hat = sample.n_treated / sample.n
    if not p_hat > 0.0:
        raise DataError("no treated units")
    tau, _, _ = att_from_propensity(sample, p)
    L = outcome_fits.l_values(spec, sample.covariates)
    val = float(
        np.mean(
            p * outcome_fits.sigma2_treated
            + p**2 / (1.0 - p) * outcome_fits.sigma2_control
            + p * (L - tau) ** 2
        )
    ) / p_hat**2
    return _floor_nonnegative(val, "att variance")


def confidence_interval(point: float, variance: float, n: int,
                        level: float = 0.95):
    """Normal-approximation interval point +/- z sqrt(variance/n)."""
    if variance < 0.0:
        raise DataError(f"variance must be nonnegative, got {variance!r}")
    if n < 1:
        raise DataError("n must be >= 1")
    if not 0.0 < level < 1.0:
        raise DataError("level must lie in (0, 1)")
    z = float(ndtri((1.0 + level) / 2.0))
    half = z * float(np.sqrt(variance / n))
    return point - half, point + half


@dataclass(frozen=True)
class VarianceComponents:
    """Intermediate quantities of the sandwich variance, for diagnostics.

    Computed at the fitted coefficients with the ridged second-moment
    inverse as the weighting.  M1/M2 partition G'W by the two condition
    blocks.
    """

    sigma_mu: float
    H_y: np.ndarray
    H_f: np.ndarray
    omega: np.ndarray
    sigma_beta: np.ndarray
    sigma_mu_beta: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    alpha1_hat: np.ndarray
    alpha2_hat: np.ndarray


def variance_components(sample: ObservedSample, fit: FitResult,
                        outcome_fits: OutcomeFits,
                        spec: BalanceSpec) -> VarianceComponents:
    """Assemble the sandwich pieces at a balancing fit."""
    system = _fit_system(fit, expect_kind=("cbps", "ocbps"))
    beta = fit.beta_hat
    model = system.model.with_beta(beta)
    p = _clipped(sample, model.pi_values(sample.covariates))
    mu = float(np.mean(_mu_summands(sample, p)))
    sigma = _floor_nonnegative(
        _sigma_mu_model(p, mu, outcome_fits, spec, sample.covariates),
        "level variance",
    )
    hy = _h_y(sample, model, outcome_fits, spec, p)
    G = _model_jacobian(system, model, p)
    omega = _model_omega(system, p)
    W = ridged_inverse(omega)
    A = G.T @ W @ G
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SingularDesignError("singular curvature matrix") from None
    A_inv = (A_inv + A_inv.T) / 2.0
    cov = _model_cov(system, p, outcome_fits, spec)
    M = G.T @ W
    return VarianceComponents(
        sigma_mu=sigma,
        H_y=hy,
        H_f=G,
        omega=omega,
        sigma_beta=A_inv,
        sigma_mu_beta=-(A_inv @ (M @ cov)),
        M1=M[:, : system.m1],
        M2=M[:, system.m1:],
        alpha1_hat=outcome_fits.alpha1_hat,
        alpha2_hat=outcome_fits.alpha2_hat,
    )


@dataclass(frozen=True)
class EstimateReport:
    """One rendered estimate: point, uncertainty, and fit diagnostics."""

    estimand: str
    method: str
    point: float
    variance: float
    std_error: float
    ci_low: float
    ci_high: float
    level: float
    residual_max: float | None = None
    iterations: int | None = None
    clip_events: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        return cls.from_dict(json.loads(text))


def build_report(estimand: str, method: str, point: float, variance: float,
                 n: int, level: float, residual_max=None, iterations=None,
                 clip_events=None) -> EstimateReport:
    """Package a point estimate and its variance into a report."""
    low, high = confidence_interval(point, variance, n, level)
    return EstimateReport(
        estimand=estimand,
        method=method,
        point=float(point),
        variance=float(variance),
        std_error=float(np.sqrt(variance / n)),
        ci_low=low,
        ci_high=high,
        level=level,
        residual_max=residual_max,
        iterations=iterations,
        clip_events=clip_events,
    )
