"""Moment systems and the GMM solver.

A moment system bundles an observed sample, a propensity model family, and a
set of balance conditions.  Four kinds are supported:

  cbps   (1/n) Sum (T/pi - (1-T)/(1-pi)) f(X)            = 0
  ocbps  block 1 as cbps with h1; block 2 (1/n) Sum (T/pi - 1) h2(X) = 0
  att    (1/n) Sum (T - (1-T) pi/(1-pi)) f(X)            = 0
  score  (1/n) Sum (T - pi) map(X)                       = 0   (MLE equations)

Just-identified systems (m = q) are solved as nonlinear root problems; over-
identified systems minimize gbar' W gbar for a weighting matrix W chosen per
options (identity, two-step, or fixed).  The solver is a damped Gauss-Newton
iteration with a Levenberg-style damping schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design import BalanceSpec, ObservedSample, design_matrix
from .errors import (
    DimensionError,
    EvaluationError,
    NonconvergenceError,
    SingularDesignError,
)
from .propensity import LogisticModel, SieveModel, _link_eval, clip_propensity

# Seed material for the deterministic restart draws; never taken from the OS.
_RESTART_SEED = 0x0CB5


@dataclass(frozen=True)
class MomentSystem:
    """One of the four moment-condition kinds over a sample and model family.

    block1 holds the functions entering the contrast-style condition of the
    given kind; block2 is the treated-vs-sample level block and is only
    nonempty for the ocbps kind.  The model's coefficients are ignored (the
    solver supplies beta); its covariate map or basis defines q.
    """

    kind: str
    model: LogisticModel | SieveModel
    sample: ObservedSample
    block1: tuple = ()
    block2: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("cbps", "ocbps", "att", "score"):
            raise DimensionError(f"unknown moment kind {self.kind!r}")
        object.__setattr__(self, "block1", tuple(self.block1))
        object.__setattr__(self, "block2", tuple(self.block2))
        if self.kind != "ocbps" and self.block2:
            raise DimensionError("block2 is only meaningful for kind 'ocbps'")
        if self.m < 1:
            raise DimensionError("moment system needs at least one condition")
        if self.m < self.q:
            raise DimensionError(
                f"under-identified system: m={self.m} < q={self.q}"
            )
        X = self.sample.covariates
        cache = {
            "B": self.model.index_matrix(X),
            "F1": design_matrix(self.block1, X) if self.block1
            else np.zeros((self.sample.n, 0)),
            "F2": design_matrix(self.block2, X) if self.block2
            else np.zeros((self.sample.n, 0)),
            "T": self.sample.treatment.astype(float),
        }
        self._cache.update(cache)

    @property
    def m1(self) -> int:
        return len(self.block1)

    @property
    def m2(self) -> int:
        return len(self.block2)

    @property
    def m(self) -> int:
        return self.m1 + self.m2

    @property
    def q(self) -> int:
        return self.model.q

    @property
    def n(self) -> int:
        return self.sample.n

    # ---- evaluation ---------------------------------------------------

    def _propensity_parts(self, beta):
        """(clipped pi, link derivative, clip count) at beta."""
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.q,):
            raise DimensionError(
                f"beta shape {beta.shape} does not match q={self.q}"
            )
        eta = self._cache["B"] @ beta
        p_raw, dp = _link_eval(self.model.link, eta)
        p, clips = clip_propensity(p_raw)
        return p, dp, clips

    def _weights(self, beta):
        """Per-unit weights (w1 for block1, w2 for block2) and clip count."""
        p, _, clips = self._propensity_parts(beta)
        T = self._cache["T"]
        if self.kind in ("cbps", "ocbps"):
            w1 = T / p - (1.0 - T) / (1.0 - p)
        elif self.kind == "att":
            w1 = T - (1.0 - T) * p / (1.0 - p)
        else:  # score
            w1 = T - p
        w2 = T / p - 1.0 if self.m2 else None
        return w1, w2, clips

    def moments_and_clips(self, beta):
        w1, w2, clips = self._weights(beta)
        n = self.n
        parts = []
        if self.m1:
            parts.append(self._cache["F1"].T @ w1 / n)
        if self.m2:
            parts.append(self._cache["F2"].T @ w2 / n)
        g = np.concatenate(parts)
        if not np.all(np.isfinite(g)):
            raise EvaluationError("non-finite moment evaluation")
        return g, clips

    def moment_matrix(self, beta):
        """(n, m) matrix of per-unit moment summands g(T_i, X_i; beta)."""
        w1, w2, _ = self._weights(beta)
        parts = []
        if self.m1:
            parts.append(w1[:, None] * self._cache["F1"])
        if self.m2:
            parts.append(w2[:, None] * self._cache["F2"])
        return np.hstack(parts)

    def jacobian(self, beta):
        p, dp, _ = self._propensity_parts(beta)
        T = self._cache["T"]
        P = dp[:, None] * self._cache["B"]  # rows d pi_i / d beta
        n = self.n
        rows = []
        if self.kind in ("cbps", "ocbps"):
            c1 = T / p**2 + (1.0 - T) / (1.0 - p) ** 2
        elif self.kind == "att":
            c1 = (1.0 - T) / (1.0 - p) ** 2
        else:  # score
            c1 = np.ones_like(p)
        if self.m1:
            rows.append(-(self._cache["F1"].T @ (c1[:, None] * P)) / n)
        if self.m2:
            c2 = T / p**2
            rows.append(-(self._cache["F2"].T @ (c2[:, None] * P)) / n)
        J = np.vstack(rows)
        if not np.all(np.isfinite(J)):
            raise EvaluationError("non-finite Jacobian evaluation")
        return J


def cbps_system(sample, f_fns, model) -> MomentSystem:
    """Balance the functions f between weighted treated and control groups."""
    return MomentSystem("cbps", model, sample, tuple(f_fns))


def ocbps_system(sample, spec: BalanceSpec, model) -> MomentSystem:
    """Two-block system: h1 contrast conditions plus h2 level conditions."""
    return MomentSystem("ocbps", model, sample, tuple(spec.h1), tuple(spec.h2))


def att_system(sample, f_fns, model) -> MomentSystem:
    """Balance f between treated and odds-weighted control groups."""
    return MomentSystem("att", model, sample, tuple(f_fns))


def score_system(sample, model) -> MomentSystem:
    """The likelihood score equations as a moment system (MLE equivalent)."""
    return MomentSystem("score", model, sample, tuple(model.functions))


def eval_moments(system: MomentSystem, beta) -> np.ndarray:
    """Length-m stacked moment vector gbar at beta."""
    g, _ = system.moments_and_clips(beta)
    return g


def eval_jacobian(system: MomentSystem, beta) -> np.ndarray:
    """Analytic (m, q) derivative of eval_moments at beta."""
    return system.jacobian(beta)


def estimate_omega(system: MomentSystem, beta) -> np.ndarray:
    """Empirical second-moment matrix (1/n) Sum g_i g_i', symmetrized."""
    G = system.moment_matrix(beta)
    omega = G.T @ G / system.n
    return (omega + omega.T) / 2.0


def ridged_inverse(omega: np.ndarray, scale: float = 1e-8) -> np.ndarray:
    """Inverse of omega + (scale * tr(omega)/m) I, symmetrized.

    Raises:
        SingularDesignError: omega is non-finite or has nonpositive trace
            (every diagonal entry of a valid second-moment matrix is >= 0
            and at least one must be positive).
    """
    omega = np.asarray(omega, dtype=float)
    m = omega.shape[0]
    tr = float(np.trace(omega))
    if not np.isfinite(tr) or tr <= 0.0:
        raise SingularDesignError(
            f"second-moment matrix has invalid trace {tr!r}"
        )
    ridged = omega + (scale * tr / m) * np.eye(m)
    try:
        inv = np.linalg.inv(ridged)
    except np.linalg.LinAlgError:
        raise SingularDesignError(
            "second-moment matrix not invertible even after ridging"
        ) from None
    return (inv + inv.T) / 2.0


@dataclass(frozen=True)
class GmmOptions:
    """Solver configuration.

    weighting: "identity", "two-step", or an explicit fixed (m, m) matrix.
        Ignored for just-identified systems, where the root of gbar = 0 is
        weighting-invariant.
    tol: convergence threshold; defaults to 1e-10 on the residual max-norm
        (root criterion) and 1e-8 on the objective-gradient max-norm
        (minimum criterion).
    init: "mle", "zeros", or an explicit starting vector.  The attempt
        ladder always continues with zeros and `restarts` seeded uniform
        draws on [-0.5, 0.5]^q.
    criterion: "auto" solves just-identified systems as roots and
        over-identified ones as weighted least squares.  "minimum" forces
        the least-squares treatment even when m = q, for systems whose
        moment equations need not have an exact solution (the enlarged-basis
        propensity fit is the main case).  "root" demands m = q.
    """

    weighting: object = "identity"
    tol: float | None = None
    max_iter: int = 200
    init: object = "mle"
    restarts: int = 3
    lambda0: float = 1e-3
    ridge: float = 1e-8
    divergence: float = 1e3
    criterion: str = "auto"

    def __post_init__(self):
        if self.tol is not None and not self.tol > 0:
            raise DimensionError("tol must be positive")
        if self.max_iter < 1:
            raise DimensionError("max_iter must be >= 1")
        if self.criterion not in ("auto", "root", "minimum"):
            raise DimensionError(f"unknown criterion {self.criterion!r}")


@dataclass(frozen=True)
class FitResult:
    """Solver output at the fitted coefficients.

    `system` is the solved MomentSystem; the variance plug-ins use it to
    re-evaluate Jacobians and weights at beta_hat.
    """

    beta_hat: np.ndarray
    residual: np.ndarray
    weight_used: np.ndarray
    objective: float
    iterations: int
    converged: bool
    clip_events: int
    system: object = field(default=None, repr=False, compare=False)


def _init_candidates(system: MomentSystem, options: GmmOptions):
    """Yield starting points: optional fixed, MLE, zeros, seeded draws."""
    from .propensity import fit_mle

    q = system.q
    if not isinstance(options.init, str):
        yield np.asarray(options.init, dtype=float).reshape(q)
    use_mle = options.init == "mle" or not isinstance(options.init, str)
    if use_mle and system.model.link == "logit":
        try:
            mle = fit_mle(system.sample, system.model.functions)
            yield mle.beta
        except NonconvergenceError:
            pass
    yield np.zeros(q)
    for k in range(options.restarts):
        rng = np.random.default_rng(
            np.random.SeedSequence([_RESTART_SEED, q, k])
        )
        yield rng.uniform(-0.5, 0.5, q)


def _objective(g, W):
    return float(g @ W @ g)


def _damped_iterations(system, beta0, W, root_mode, tol, options):
    """One solve attempt from beta0.

    Returns (beta, g, iterations, clips, success).  Damping follows the
    Levenberg schedule: shrink on accepted steps, grow tenfold on rejects.
    """
    beta = np.asarray(beta0, dtype=float).copy()
    try:
        g, clips = system.moments_and_clips(beta)
    except EvaluationError:
        return beta, None, 0, 0, False
    obj = _objective(g, W)
    if not np.isfinite(obj):
        return beta, g, 0, clips, False
    lam = options.lambda0
    J = None
    iterations = 0
    for _ in range(options.max_iter):
        if root_mode and np.max(np.abs(g)) <= tol:
            return beta, g, iterations, clips, True
        if J is None:
            try:
                J = system.jacobian(beta)
            except EvaluationError:
                return beta, g, iterations, clips, False
        if not root_mode:
            grad = 2.0 * (J.T @ (W @ g))
            if np.max(np.abs(grad)) <= tol:
                return beta, g, iterations, clips, True
        iterations += 1
        A = J.T @ (W @ J)
        rhs = -(J.T @ (W @ g))
        diag = np.diag(A).copy()
        floor = max(np.max(np.abs(diag)), 1.0) * 1e-14
        diag = np.maximum(diag, floor)
        try:
            step = np.linalg.solve(A + lam * np.diag(diag), rhs)
        except np.linalg.LinAlgError:
            lam = min(lam * 10.0, 1e12)
            continue
        if not np.all(np.isfinite(step)):
            lam = min(lam * 10.0, 1e12)
            continue
        trial = beta + step
        if np.max(np.abs(trial)) > options.divergence:
            return beta, g, iterations, clips, False
        try:
            g_t, clips_t = system.moments_and_clips(trial)
        except EvaluationError:
            lam = min(lam * 10.0, 1e12)
            continue
        obj_t = _objective(g_t, W)
        if np.isfinite(obj_t) and obj_t < obj:
            beta, g, obj, clips = trial, g_t, obj_t, clips_t
            J = None
            lam = max(lam * 0.1, 1e-14)
        else:
            lam = min(lam * 10.0, 1e12)
    # Final check at the last iterate before declaring failure.
    if root_mode and np.max(np.abs(g)) <= tol:
        return beta, g, iterations, clips, True
    if not root_mode and J is not None:
        grad = 2.0 * (J.T @ (W @ g))
        if np.max(np.abs(grad)) <= tol:
            return beta, g, iterations, clips, True
    return beta, g, iterations, clips, False


def _polish(system, beta, g, clips, W, root_mode, max_steps=3):
    """Undamped Gauss-Newton refinement while the convergence metric improves.

    Near the solution the iteration is quadratically convergent, so a couple
    of plain steps push the residual (or gradient) to machine precision.
    This is what makes closed-form checks like beta = logit(Tbar) hold to
    1e-10 rather than merely to the stopping tolerance.
    """

    def metric(gv, Jv):
        if root_mode:
            return np.max(np.abs(gv))
        return np.max(np.abs(2.0 * (Jv.T @ (W @ gv))))

    extra = 0
    for _ in range(max_steps):
        try:
            J = system.jacobian(beta)
        except EvaluationError:
            break
        cur = metric(g, J)
        if cur == 0.0:
            break
        try:
            if root_mode and system.m == system.q:
                step = np.linalg.solve(J, -g)
            else:
                step = np.linalg.solve(J.T @ (W @ J), -(J.T @ (W @ g)))
        except np.linalg.LinAlgError:
            break
        trial = beta + step
        if not np.all(np.isfinite(trial)):
            break
        try:
            g_t, clips_t = system.moments_and_clips(trial)
            J_t = system.jacobian(trial)
        except EvaluationError:
            break
        if metric(g_t, J_t) < cur:
            beta, g, clips = trial, g_t, clips_t
            extra += 1
        else:
            break
    return beta, g, clips, extra


def _solve_stage(system, W, root_mode, tol, options, first_inits=()):
    """Run the attempt ladder for one weighting stage."""
    total_iter = 0
    best = None  # (metric, beta, g)
    candidates = list(first_inits) + list(_init_candidates(system, options))
    for beta0 in candidates:
        beta, g, iters, clips, ok = _damped_iterations(
            system, beta0, W, root_mode, tol, options
        )
        total_iter += iters
        if g is not None:
            met = float(np.max(np.abs(g)))
            if best is None or met < best[0]:
                best = (met, beta, g)
        if ok:
            beta, g, clips, extra = _polish(system, beta, g, clips, W, root_mode)
            return beta, g, total_iter + extra, clips
    met, beta, _ = best if best is not None else (np.inf, None, None)
    raise NonconvergenceError(
        f"gmm solve failed after {len(candidates)} starts "
        f"(best residual max-norm {met:.3e})",
        grad_norm=met,
        iterations=total_iter,
        best_beta=beta,
    )


def solve(system: MomentSystem, options: GmmOptions | None = None) -> FitResult:
    """Fit the moment system.

    Just-identified systems are driven to max|gbar| <= tol (default 1e-10).
    Over-identified systems minimize gbar' W gbar to an objective-gradient
    max-norm <= tol (default 1e-8); two-step weighting re-solves with
    W = (Omega(beta_1) + ridge I)^{-1} from the identity-weighted stage.
    options.criterion = "minimum" applies the least-squares treatment to a
    just-identified system whose equations may have no exact root.

    Raises:
        NonconvergenceError: no attempt converged (carries the best iterate).
        SingularDesignError: Jacobian rank-deficient at the solution, or a
            degenerate second-moment matrix in the two-step stage.
    """
    options = options or GmmOptions()
    m, q = system.m, system.q
    if options.criterion == "root" and m != q:
        raise DimensionError(
            f"root criterion needs a just-identified system (m={m}, q={q})"
        )
    root_mode = m == q if options.criterion == "auto" else (
        options.criterion == "root"
    )
    if isinstance(options.weighting, str):
        if options.weighting not in ("identity", "two-step"):
            raise DimensionError(f"unknown weighting {options.weighting!r}")
        W1 = np.eye(m)
        fixed_W = None
    else:
        fixed_W = np.asarray(options.weighting, dtype=float)
        if fixed_W.shape != (m, m):
            raise DimensionError(
                f"fixed weighting shape {fixed_W.shape} does not match m={m}"
            )
        W1 = fixed_W

    if root_mode:
        tol = options.tol if options.tol is not None else 1e-10
    else:
        tol = options.tol if options.tol is not None else 1e-8

    beta, g, iters, clips = _solve_stage(system, W1, root_mode, tol, options)
    W_used = W1

    two_step = (
        isinstance(options.weighting, str)
        and options.weighting == "two-step"
        and not root_mode
    )
    if two_step:
        omega = estimate_omega(system, beta)
        W2 = ridged_inverse(omega, options.ridge)
        beta, g, iters2, clips = _solve_stage(
            system, W2, root_mode, tol, options, first_inits=[beta]
        )
        iters += iters2
        W_used = W2

    J = system.jacobian(beta)
    if np.linalg.matrix_rank(J) < q:
        raise SingularDesignError(
            "moment Jacobian is rank deficient at the solution"
        )
    return FitResult(
        beta_hat=beta,
        residual=g,
        weight_used=W_used,
        objective=_objective(g, W_used),
        iterations=iters,
        converged=True,
        clip_events=clips,
        system=system,
    )
