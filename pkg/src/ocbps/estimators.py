"""Treatment-effect estimators built on fitted propensity models.

All average-effect estimators share the inverse-probability-weighting form;
they differ in how the propensity is fitted (maximum likelihood, covariate
balancing with one block, or the two-block balancing system that adds the
treated-vs-sample level conditions).  The outcome regressions fitted here
serve as plug-ins for the augmentation term and the variance formulas.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .design import BalanceSpec, ObservedSample, design_matrix
from .errors import (
    DataError,
    DimensionError,
    EvaluationError,
    SingularDesignError,
    SpecParseError,
)
from .gmm import (
    FitResult,
    GmmOptions,
    att_system,
    cbps_system,
    ocbps_system,
    solve,
)
from .propensity import LogisticModel, SieveModel, clip_propensity, union_basis


@dataclass(frozen=True)
class OutcomeFits:
    """Least-squares outcome plug-ins for a balance spec.

    alpha1_hat: coefficients of Y on h1 fitted among controls (control-arm
        conditional mean).
    alpha2_hat: coefficients of the control-residual Y - alpha1'h1 on h2
        fitted among treated (treatment-effect function).
    sigma2_control / sigma2_treated: homoskedastic residual variances by arm.
    """

    alpha1_hat: np.ndarray
    alpha2_hat: np.ndarray
    sigma2_control: float
    sigma2_treated: float

    def k_values(self, spec: BalanceSpec, X) -> np.ndarray:
        """Fitted control-arm mean K(X) = alpha1' h1(X) per row."""
        return design_matrix(spec.h1, X) @ self.alpha1_hat

    def l_values(self, spec: BalanceSpec, X) -> np.ndarray:
        """Fitted effect function L(X) = alpha2' h2(X) per row (0 if no h2)."""
        X = np.asarray(X, dtype=float)
        if len(self.alpha2_hat) == 0:
            return np.zeros(X.shape[0])
        return design_matrix(spec.h2, X) @ self.alpha2_hat


def _lstsq_full_rank(A, y, what):
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        raise SingularDesignError(
            f"{what} design is rank deficient ({rank} < {A.shape[1]})"
        )
    return coef


def fit_outcomes(sample: ObservedSample, spec: BalanceSpec) -> OutcomeFits:
    """Fit the outcome plug-ins by arm-wise least squares.

    alpha1 comes from controls (they identify the control mean), alpha2 from
    the treated residuals against the control fit (they identify the effect).

    Raises:
        SingularDesignError: either arm's design matrix is rank deficient,
            including the underdetermined case of fewer rows than columns.
    """
    T = sample.treatment.astype(bool)
    Y = sample.outcome
    H1 = design_matrix(spec.h1, sample)
    alpha1 = _lstsq_full_rank(H1[~T], Y[~T], "control h1")
    resid_ctrl = Y[~T] - H1[~T] @ alpha1
    sigma2_control = float(np.mean(resid_ctrl**2))
    effect_resid = Y[T] - H1[T] @ alpha1
    if spec.m2 > 0:
        H2 = design_matrix(spec.h2, sample)
        alpha2 = _lstsq_full_rank(H2[T], effect_resid, "treated h2")
        resid_trt = effect_resid - H2[T] @ alpha2
    else:
        alpha2 = np.zeros(0)
        resid_trt = effect_resid
    sigma2_treated = float(np.mean(resid_trt**2))
    return OutcomeFits(
        alpha1_hat=alpha1,
        alpha2_hat=alpha2,
        sigma2_control=sigma2_control,
        sigma2_treated=sigma2_treated,
    )


def iptw(sample: ObservedSample, pi_values) -> float:
    """Inverse-probability-weighted mean difference (Horvitz-Thompson form).

    (1/n) Sum [T_i Y_i / pi_i - (1 - T_i) Y_i / (1 - pi_i)], with pi clipped
    into the standard weight range first.
    """
    pi_values = np.asarray(pi_values, dtype=float)
    if pi_values.shape != (sample.n,):
        raise DimensionError(
            f"pi_values shape {pi_values.shape} does not match n={sample.n}"
        )
    if not np.all(np.isfinite(pi_values)):
        raise EvaluationError("pi_values contain non-finite entries")
    if np.any(pi_values <= 0.0) or np.any(pi_values >= 1.0):
        raise DataError("pi_values must lie strictly inside (0, 1)")
    p, _ = clip_propensity(pi_values)
    T = sample.treatment.astype(float)
    Y = sample.outcome
    value = float(np.mean(T * Y / p - (1.0 - T) * Y / (1.0 - p)))
    if not np.isfinite(value):
        raise EvaluationError("non-finite weighted mean")
    return value


def fitted_propensity(fit: FitResult, sample: ObservedSample | None = None):
    """Propensity values at the fitted coefficients of a solver result."""
    system = getattr(fit, "system", None)
    if system is None:
        raise DataError("fit does not carry its moment system")
    model = system.model.with_beta(fit.beta_hat)
    X = (sample or system.sample).covariates
    return model.pi_values(X)


def _check_no_duplicates(fns, what):
    seen = set()
    for fn in fns:
        if fn in seen:
            raise SpecParseError(
                f"duplicate function {fn.render()!r} in {what}"
            )
        seen.add(fn)


def fit_ocbps_ate(sample: ObservedSample, spec: BalanceSpec,
                  options: GmmOptions | None = None,
                  covariate_map=None):
    """Two-block balancing fit of the propensity, then the weighted ATE.

    The default working model uses the union of h1 and h2 as its covariate
    map, which makes the system just-identified (m = q) as in the efficient
    case.  Pass covariate_map to override.

    Returns:
        (FitResult, mu_hat)
    """
    cmap = tuple(covariate_map) if covariate_map is not None \
        else union_basis(spec)
    model = LogisticModel(np.zeros(len(cmap)), cmap)
    system = ocbps_system(sample, spec, model)
    fit = solve(system, options)
    pi_hat = model.with_beta(fit.beta_hat).pi_values(sample.covariates)
    return fit, iptw(sample, pi_hat)


def fit_cbps_ate(sample: ObservedSample, f_fns,
                 options: GmmOptions | None = None,
                 covariate_map=None):
    """One-block balancing fit (balance f between arms), then weighted ATE.

    The default working model reuses f as the covariate map (just-identified).

    Returns:
        (FitResult, mu_hat)
    """
    f_fns = tuple(f_fns)
    _check_no_duplicates(f_fns, "f spec")
    cmap = tuple(covariate_map) if covariate_map is not None else f_fns
    model = LogisticModel(np.zeros(len(cmap)), cmap)
    system = cbps_system(sample, f_fns, model)
    fit = solve(system, options)
    pi_hat = model.with_beta(fit.beta_hat).pi_values(sample.covariates)
    return fit, iptw(sample, pi_hat)


def aipw(sample: ObservedSample, pi_values, outcome_fits: OutcomeFits,
         spec: BalanceSpec) -> float:
    """Augmented weighted estimator: IPTW plus outcome-model correction.

    (1/n) Sum { T Y/pi - (1-T) Y/(1-pi)
                - (T - pi) [ (K+L)/pi + K/(1-pi) ] }
    with K = alpha1'h1(X) and L = alpha2'h2(X).  At a propensity fitted by
    the two-block balancing system this coincides with plain IPTW for any
    coefficient values, because the correction is a linear combination of
    the zeroed balance conditions.
    """
    pi_values = np.asarray(pi_values, dtype=float)
    if pi_values.shape != (sample.n,):
        raise DimensionError(
            f"pi_values shape {pi_values.shape} does not match n={sample.n}"
        )
    p, _ = clip_propensity(pi_values)
    T = sample.treatment.astype(float)
    Y = sample.outcome
    X = sample.covariates
    K = outcome_fits.k_values(spec, X)
    L = outcome_fits.l_values(spec, X)
    base = T * Y / p - (1.0 - T) * Y / (1.0 - p)
    correction = (T - p) * ((K + L) / p + K / (1.0 - p))
    value = float(np.mean(base - correction))
    if not np.isfinite(value):
        raise EvaluationError("non-finite augmented estimate")
    return value


def fit_att(sample: ObservedSample, f_fns,
            options: GmmOptions | None = None,
            covariate_map=None):
    """Balance f between treated and odds-weighted controls, then the ATT.

    tau1 is the raw treated mean; tau0 reweights controls by the fitted
    odds pi/(1-pi).

    Returns:
        (FitResult, tau_hat, tau1_hat, tau0_hat)
    """
    f_fns = tuple(f_fns)
    _check_no_duplicates(f_fns, "f spec")
    cmap = tuple(covariate_map) if covariate_map is not None else f_fns
    model = LogisticModel(np.zeros(len(cmap)), cmap)
    system = att_system(sample, f_fns, model)
    fit = solve(system, options)
    pi_hat = model.with_beta(fit.beta_hat).pi_values(sample.covariates)
    tau, tau1, tau0 = att_from_propensity(sample, pi_hat)
    return fit, tau, tau1, tau0


def att_from_propensity(sample: ObservedSample, pi_values):
    """ATT point estimates given propensity values.

    Returns:
        (tau_hat, tau1_hat, tau0_hat)

    Raises:
        DataError: the odds-weighted control mass is zero (degenerate).
    """
    p, _ = clip_propensity(np.asarray(pi_values, dtype=float))
    T = sample.treatment.astype(float)
    Y = sample.outcome
    tau1 = float(np.sum(T * Y) / np.sum(T))
    r = p / (1.0 - p)
    wsum = float(np.sum((1.0 - T) * r))
    if not wsum > 0.0 or not np.isfinite(wsum):
        raise DataError("control odds weights sum to zero or overflow")
    tau0 = float(np.sum((1.0 - T) * r * Y) / wsum)
    return tau1 - tau0, tau1, tau0


def fit_ocbps_sieve(sample: ObservedSample, spec: BalanceSpec,
                    basis=None, kappa: int | None = None,
                    options: GmmOptions | None = None,
                    link: str = "logit"):
    """Two-block balancing fit over an enlarged (sieve) propensity basis.

    The basis defaults to the union of h1 and h2, so the number of moment
    conditions equals the number of coefficients.  Unlike the parametric
    fits, the system is solved by minimizing the squared moment norm rather
    than demanding an exact root: with an enlarged basis the balance
    equations need not have a solution in every sample, and the minimizer
    is the defined estimate.  A basis larger than n/3 draws a warning (the
    series approximation argument wants the basis to grow much slower
    than n).

    Returns:
        (FitResult, mu_hat)
    """
    basis = tuple(basis) if basis is not None else union_basis(spec)
    if kappa is None:
        kappa = len(basis)
    if kappa != len(basis):
        raise DimensionError(
            f"kappa={kappa} does not match basis length {len(basis)}"
        )
    if kappa != spec.m:
        raise DimensionError(
            f"sieve needs as many basis functions as moment conditions "
            f"(kappa={kappa}, m={spec.m})"
        )
    if kappa > sample.n / 3:
        warnings.warn(
            f"sieve basis size {kappa} exceeds n/3 = {sample.n / 3:.0f}; "
            "the large-sample approximation is unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    model = SieveModel(np.zeros(kappa), basis, link=link)
    system = ocbps_system(sample, spec, model)
    # Near a minimum with nonzero residual the Gauss-Newton rate is linear,
    # not quadratic, so the sieve budget is larger than the root default.
    opts = options if options is not None else GmmOptions(max_iter=1000)
    if opts.criterion == "auto":
        opts = replace(opts, criterion="minimum")
    fit = solve(system, opts)
    pi_hat = model.with_beta(fit.beta_hat).pi_values(sample.covariates)
    return fit, iptw(sample, pi_hat)
