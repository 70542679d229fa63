"""Propensity models: parametric logistic and sieve (flexible basis) forms.

Both model kinds map a covariate vector through a linear index and a strictly
increasing link with range (0, 1).  The logistic model is the parametric
working model; the sieve model is the same machinery over a user-enlarged
basis, used when the propensity function itself is treated nonparametrically.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, ndtr

from .design import BalanceSpec, CovariateFunction, design_matrix
from .errors import DimensionError, NonconvergenceError

# Probabilities are clipped to this range whenever they enter an inverse
# weight; raw model evaluations are never clipped.
CLIP_LO = 1e-6
CLIP_HI = 1.0 - 1e-6

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


def _link_eval(link: str, eta: np.ndarray):
    """Return (J(eta), J'(eta)) for the named link."""
    if link == "logit":
        p = expit(eta)
        return p, p * (1.0 - p)
    if link == "probit":
        p = ndtr(eta)
        return p, np.exp(-0.5 * eta * eta) / _SQRT_2PI
    raise DimensionError(f"unknown link {link!r}")


def clip_propensity(pi_values: np.ndarray):
    """Clip probabilities into [CLIP_LO, CLIP_HI] for weight formation.

    Returns:
        (clipped array, number of entries that were clipped)
    """
    pi_values = np.asarray(pi_values, dtype=float)
    events = int(np.count_nonzero((pi_values < CLIP_LO) | (pi_values > CLIP_HI)))
    return np.clip(pi_values, CLIP_LO, CLIP_HI), events


@dataclass(frozen=True)
class LogisticModel:
    """expit(beta' map(x)) with a fixed covariate map of length q."""

    beta: np.ndarray
    covariate_map: tuple[CovariateFunction, ...]

    def __post_init__(self):
        b = np.array(self.beta, dtype=float).reshape(-1)
        cmap = tuple(self.covariate_map)
        if b.size != len(cmap):
            raise DimensionError(
                f"beta length {b.size} does not match covariate map "
                f"length {len(cmap)}"
            )
        if b.size < 1:
            raise DimensionError("model needs at least one parameter")
        if not np.all(np.isfinite(b)):
            raise DimensionError("beta must be finite")
        b.flags.writeable = False
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "covariate_map", cmap)

    @property
    def q(self) -> int:
        return len(self.covariate_map)

    @property
    def link(self) -> str:
        return "logit"

    @property
    def functions(self) -> tuple[CovariateFunction, ...]:
        return self.covariate_map

    def with_beta(self, beta) -> "LogisticModel":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def index_matrix(self, X) -> np.ndarray:
        """(n, q) matrix of regressor rows map(X_i)."""
        return design_matrix(self.covariate_map, X)

    def pi_values(self, X) -> np.ndarray:
        p, _ = _link_eval(self.link, self.index_matrix(X) @ self.beta)
        return p

    def pi_grad_matrix(self, X) -> np.ndarray:
        """(n, q) matrix whose row i is d pi(X_i) / d beta."""
        M = self.index_matrix(X)
        _, dp = _link_eval(self.link, M @ self.beta)
        return dp[:, None] * M


@dataclass(frozen=True)
class SieveModel:
    """J(beta' B(x)) for a monotone link J and basis B of length kappa."""

    beta: np.ndarray
    basis: tuple[CovariateFunction, ...]
    link: str = "logit"

    def __post_init__(self):
        b = np.array(self.beta, dtype=float).reshape(-1)
        basis = tuple(self.basis)
        if b.size != len(basis):
            raise DimensionError(
                f"beta length {b.size} does not match basis length {len(basis)}"
            )
        if b.size < 1:
            raise DimensionError("sieve basis must be nonempty")
        if not np.all(np.isfinite(b)):
            raise DimensionError("beta must be finite")
        _link_eval(self.link, np.zeros(1))  # validates the link name
        b.flags.writeable = False
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "basis", basis)

    @property
    def kappa(self) -> int:
        return len(self.basis)

    @property
    def q(self) -> int:
        return len(self.basis)

    @property
    def functions(self) -> tuple[CovariateFunction, ...]:
        return self.basis

    def with_beta(self, beta) -> "SieveModel":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def index_matrix(self, X) -> np.ndarray:
        return design_matrix(self.basis, X)

    def pi_values(self, X) -> np.ndarray:
        p, _ = _link_eval(self.link, self.index_matrix(X) @ self.beta)
        return p

    def pi_grad_matrix(self, X) -> np.ndarray:
        M = self.index_matrix(X)
        _, dp = _link_eval(self.link, M @ self.beta)
        return dp[:, None] * M


def union_basis(spec: BalanceSpec, extra=()) -> tuple[CovariateFunction, ...]:
    """h1 then h2 then extras, first occurrence kept (sieve default basis)."""
    out = []
    for fn in tuple(spec.h1) + tuple(spec.h2) + tuple(extra):
        if fn not in out:
            out.append(fn)
    return tuple(out)


def pi(model, x) -> float:
    """Propensity at a single covariate vector."""
    x = np.asarray(x, dtype=float)
    return float(model.pi_values(x[None, :])[0])


def pi_grad(model, x) -> np.ndarray:
    """Gradient of the propensity in the model coefficients, at one x."""
    x = np.asarray(x, dtype=float)
    return model.pi_grad_matrix(x[None, :])[0]


def fit_mle(sample, covariate_map, tol: float = 1e-8,
            max_iter: int = 100) -> LogisticModel:
    """Maximum-likelihood logistic fit by Newton iterations with step halving.

    Converges when the score equations Sum_i (T_i - pi_i) map(X_i) = 0 hold
    with max-norm <= tol.  Separation or rank deficiency surfaces as a
    nonconvergence error carrying the final score norm.

    Args:
        sample: ObservedSample.
        covariate_map: sequence of CovariateFunction defining the index.

    Returns:
        LogisticModel at the fitted coefficients.
    """
    cmap = tuple(covariate_map)
    M = design_matrix(cmap, sample)
    T = sample.treatment.astype(float)
    n, q = M.shape

    def loglik(eta):
        # sum T*eta - log(1 + exp(eta)), stable in both tails
        return float(np.sum(T * eta - np.logaddexp(0.0, eta)))

    beta = np.zeros(q)
    eta = M @ beta
    ll = loglik(eta)
    score_norm = np.inf
    for _ in range(max_iter):
        p = expit(eta)
        score = M.T @ (T - p)
        score_norm = float(np.max(np.abs(score)))
        if score_norm <= tol:
            # The score also vanishes in the limit of a separating
            # hyperplane, where no finite maximizer exists; a converged
            # state with every fitted probability saturated is that
            # limit, not an interior optimum.
            saturated = np.where(T > 0.5, p > 1.0 - 1e-6, p < 1e-6)
            if bool(np.all(saturated)):
                raise NonconvergenceError(
                    "complete separation: all fitted probabilities are "
                    "saturated, the likelihood has no finite maximizer",
                    grad_norm=score_norm,
                )
            model = LogisticModel(beta, cmap)
            return model
        w = p * (1.0 - p)
        hess = M.T @ (w[:, None] * M)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise NonconvergenceError(
                "singular information matrix in logistic fit (collinear map "
                "or separated data)",
                grad_norm=score_norm,
            ) from None
        if not np.all(np.isfinite(step)):
            raise NonconvergenceError(
                "non-finite Newton step in logistic fit",
                grad_norm=score_norm,
            )
        # Step halving: retreat until the log-likelihood improves.  Near
        # the optimum the true improvement drops below the rounding noise
        # of evaluating the log-likelihood, so allow that much slack; the
        # full Newton step then finishes the job quadratically.
        slack = 1e-9 * (1.0 + abs(ll))
        scale = 1.0
        for _ in range(40):
            trial = beta + scale * step
            eta_t = M @ trial
            ll_t = loglik(eta_t)
            if ll_t >= ll - slack:
                break
            scale *= 0.5
        else:
            raise NonconvergenceError(
                "logistic fit stalled (no ascent direction found)",
                grad_norm=score_norm,
            )
        beta, eta, ll = trial, eta_t, ll_t
        if np.max(np.abs(beta)) > 1e3:
            raise NonconvergenceError(
                "diverging coefficients in logistic fit (separation suspected)",
                grad_norm=score_norm,
            )
    raise NonconvergenceError(
        f"logistic fit did not converge in {max_iter} iterations "
        f"(score max-norm {score_norm:.3e})",
        grad_norm=score_norm,
        iterations=max_iter,
    )
