"""Simulation designs, a seeded Monte Carlo driver, and bias oracles.

The covariate design is fixed: X1 ~ Normal(mean 3, variance 2) and
X2..X4 standard normal, all independent.  Outcomes are linear or
quadratic in the covariates with unit-variance Gaussian noise, and the
treatment probability is logistic in the covariates, optionally
exponentially tilted or driven by nonlinear transforms to create the
misspecification scenarios.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .design import (
    BalanceSpec,
    CovariateFunction,
    ObservedSample,
    _evaluate_matrix,
    parse_function_spec,
    render_function_spec,
)
from .errors import (
    DataError,
    DimensionError,
    EvaluationError,
    NonconvergenceError,
    SingularDesignError,
    SpecParseError,
)
from .estimators import (
    aipw,
    fit_cbps_ate,
    fit_ocbps_ate,
    fit_ocbps_sieve,
    fit_outcomes,
    iptw,
)
from .gmm import GmmOptions
from .inference import (
    VarianceFloorWarning,
    confidence_interval,
    var_cbps,
    var_glm,
    var_ocbps,
    var_true,
    var_vopt_plugin,
)
from .propensity import clip_propensity, fit_mle

SCENARIOS = (
    "both-correct",
    "ps-misspecified",
    "ps-local-misspec",
    "outcome-misspecified",
    "both-misspecified",
    "custom",
)

# coefficients of the logistic treatment model; the first entry is the
# negated varying coefficient slot for x1
_PS_COEF_TAIL = (0.5, -0.25, -0.1)

_QUADRATIC_SCENARIOS = ("outcome-misspecified", "both-misspecified")
_TRANSFORMED_PS_SCENARIOS = ("ps-misspecified", "both-misspecified")
_TILTED_SCENARIOS = ("ps-local-misspec", "custom")

ESTIMATOR_NAMES = ("true", "glm", "cbps", "ocbps", "aipw", "ocbps-sieve")
DEFAULT_ESTIMATORS = ("true", "glm", "cbps", "ocbps")


def _as_function_tuple(value, what):
    out = tuple(value)
    for fn in out:
        if not isinstance(fn, CovariateFunction):
            raise SpecParseError(f"{what} entries must be covariate functions")
    return out


@dataclass(frozen=True)
class DgpSpec:
    """One simulation design: scenario label plus its knobs.

    xi defaults to n^(-1/2) in the tilted scenarios and is ignored
    elsewhere.  delta and the r1/r2 function lists perturb the outcome
    means in the custom scenario only.
    """

    scenario: str = "both-correct"
    n: int = 1000
    beta1: float = 0.0
    xi: float | None = None
    u_direction: CovariateFunction = CovariateFunction.square(1)
    delta: float = 0.0
    r1: tuple = ()
    r2: tuple = ()
    truncation: float = 0.95

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise SpecParseError(
                f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}"
            )
        if self.n < 10:
            raise DataError(f"n must be >= 10, got {self.n}")
        if self.xi is not None and not self.xi >= 0.0:
            raise DataError(f"xi must be >= 0, got {self.xi!r}")
        if not 0.0 < self.truncation < 1.0:
            raise DataError(
                f"truncation must lie in (0, 1), got {self.truncation!r}"
            )
        if not isinstance(self.u_direction, CovariateFunction):
            raise SpecParseError("u_direction must be a covariate function")
        object.__setattr__(self, "r1", _as_function_tuple(self.r1, "r1"))
        object.__setattr__(self, "r2", _as_function_tuple(self.r2, "r2"))

    @property
    def xi_value(self) -> float:
        if self.scenario not in _TILTED_SCENARIOS:
            return 0.0
        if self.xi is None:
            return float(self.n) ** -0.5
        return float(self.xi)

    @property
    def ps_beta_star(self) -> np.ndarray:
        """True logistic coefficients on (x1, x2, x3, x4), no intercept."""
        return np.array([-self.beta1, *_PS_COEF_TAIL])

    def to_config(self) -> dict:
        return {
            "scenario": self.scenario,
            "n": self.n,
            "beta1": self.beta1,
            "xi": self.xi,
            "u_direction": self.u_direction.render(),
            "delta": self.delta,
            "r1": [fn.render() for fn in self.r1],
            "r2": [fn.render() for fn in self.r2],
            "truncation": self.truncation,
        }


def dgp_from_config(config: dict) -> DgpSpec:
    """Build a design from a JSON-compatible key/value tree."""
    if not isinstance(config, dict):
        raise SpecParseError("scenario config must be a key/value mapping")
    known = {
        "scenario", "n", "beta1", "xi", "u_direction", "delta", "r1", "r2",
        "truncation",
    }
    extra = set(config) - known
    if extra:
        raise SpecParseError(f"unknown scenario config keys {sorted(extra)}")
    kwargs = {}
    for key in ("scenario", "beta1", "xi", "delta", "truncation"):
        if key in config and config[key] is not None:
            kwargs[key] = (
                str(config[key]) if key == "scenario" else float(config[key])
            )
    if "n" in config:
        kwargs["n"] = int(config["n"])
    if config.get("u_direction") is not None:
        fns = parse_function_spec(str(config["u_direction"]))
        if len(fns) != 1:
            raise SpecParseError("u_direction must be a single function")
        kwargs["u_direction"] = fns[0]
    for key in ("r1", "r2"):
        raw = config.get(key)
        if raw:
            text = raw if isinstance(raw, str) else ",".join(raw)
            kwargs[key] = parse_function_spec(text)
    return DgpSpec(**kwargs)


def _normal_moment(mean: float, var: float, power: int) -> float:
    """E[Z^power] for Z ~ Normal(mean, var), by the standard recurrence."""
    m_prev, m_cur = 0.0, 1.0
    for k in range(1, power + 1):
        m_prev, m_cur = m_cur, mean * m_cur + (k - 1) * var * m_prev
    return m_cur


def design_expectation(fn: CovariateFunction) -> float:
    """Expectation of a covariate function under the simulation design."""
    value = 1.0
    for index, power in fn.terms:
        if index == 1:
            value *= _normal_moment(3.0, 2.0, power)
        else:
            value *= _normal_moment(0.0, 1.0, power)
    return value


def _transform_covariates(X: np.ndarray) -> np.ndarray:
    """Nonlinear transforms that drive the misspecified treatment model."""
    x1, x2, x3, x4 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    return np.column_stack(
        [
            np.exp(x1 / 3.0),
            x2 / (1.0 + np.exp(x1)) + 10.0,
            x1 * x3 / 25.0 + 0.6,
            x1 + x4 + 20.0,
        ]
    )


def true_propensity(spec: DgpSpec, X: np.ndarray):
    """Treatment probabilities used to generate data.

    Returns (pi, cap_events) where cap_events counts tilted values that
    exceeded the truncation level and were replaced by it.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 4:
        raise DimensionError("design covariates need at least 4 columns")
    base = X[:, :4]
    if spec.scenario in _TRANSFORMED_PS_SCENARIOS:
        base = _transform_covariates(base)
    pi = expit(base @ spec.ps_beta_star)
    if spec.scenario in _TILTED_SCENARIOS:
        u = _evaluate_matrix((spec.u_direction,), X)[:, 0]
        tilted = pi * np.exp(spec.xi_value * u)
        caps = int(np.count_nonzero(tilted > spec.truncation))
        pi = np.minimum(tilted, spec.truncation)
        return pi, caps
    return pi, 0


def outcome_means(spec: DgpSpec, X: np.ndarray):
    """Conditional means (K, L): E[Y(0)|X] = K and E[Y(1)|X] = K + L."""
    X = np.asarray(X, dtype=float)
    x1 = X[:, 0]
    rest = X[:, 1:4]
    if spec.scenario in _QUADRATIC_SCENARIOS:
        K = 200.0 + 13.7 * np.sum(rest**2, axis=1)
        L = 27.4 * x1**2
    else:
        K = 200.0 + 13.7 * np.sum(rest, axis=1)
        L = 27.4 * x1
    if spec.scenario == "custom" and spec.delta != 0.0:
        if spec.r1:
            K = K + spec.delta * _evaluate_matrix(spec.r1, X).sum(axis=1)
        if spec.r2:
            L = L + spec.delta * _evaluate_matrix(spec.r2, X).sum(axis=1)
    return K, L


def true_ate(spec: DgpSpec) -> float:
    """Population average treatment effect of the design."""
    if spec.scenario in _QUADRATIC_SCENARIOS:
        value = 27.4 * design_expectation(CovariateFunction.square(1))
    else:
        value = 27.4 * design_expectation(CovariateFunction.coordinate(1))
    if spec.scenario == "custom" and spec.delta != 0.0:
        for fn in spec.r2:
            value += spec.delta * design_expectation(fn)
    return value


def replication_seed(base_seed: int, r: int) -> int:
    """Counter-based mix of (base_seed, r) into one 64-bit stream key."""
    state = np.random.SeedSequence([int(base_seed), int(r)]).generate_state(
        1, np.uint64
    )
    return int(state[0])


def draw_replication(spec: DgpSpec, seed: int) -> ObservedSample:
    """One deterministic sample for (spec, seed).

    Draw order is fixed: x1 column, then the x2..x4 block, then the
    treatment uniforms, then the outcome noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    n = spec.n
    x1 = rng.normal(3.0, np.sqrt(2.0), size=n)
    rest = rng.normal(0.0, 1.0, size=(n, 3))
    X = np.column_stack([x1, rest])
    pi, _ = true_propensity(spec, X)
    T = (rng.uniform(size=n) < pi).astype(np.int64)
    eps = rng.normal(0.0, 1.0, size=n)
    K, L = outcome_means(spec, X)
    Y = K + T * L + eps
    return ObservedSample(X, T, Y)


def working_balance_spec() -> BalanceSpec:
    """The two balance blocks used throughout the study designs."""
    return BalanceSpec.from_strings("1,x2,x3,x4", "x1")


def working_covariate_map(spec: DgpSpec):
    """Working logistic index functions: intercept plus the four covariates.

    The same five-parameter map is fitted in every scenario (the study
    designs vary only the generating process, never the estimators), which
    together with the five balance conditions keeps the system
    just-identified.
    """
    coords = tuple(CovariateFunction.coordinate(j) for j in range(1, 5))
    return (CovariateFunction.constant_one(),) + coords


def sieve_balance_spec() -> BalanceSpec:
    """Working blocks extended with squared covariates.

    Each square joins the block whose approximation space it enlarges:
    the control-mean block gains x2^2..x4^2 and the effect block gains
    x1^2, keeping every condition aligned with the arm-level function it
    helps approximate.
    """
    return BalanceSpec.from_strings(
        "1,x2,x3,x4,x2^2,x3^2,x4^2", "x1,x1^2"
    )


def _balance_f_functions():
    """First-moment balance functions for the one-block comparator."""
    return (CovariateFunction.constant_one(),) + tuple(
        CovariateFunction.coordinate(j) for j in range(1, 5)
    )


def _gmm_options(n_conditions: int, n_params: int) -> GmmOptions:
    weighting = "identity" if n_conditions == n_params else "two-step"
    return GmmOptions(weighting=weighting)


_FAILURE_TYPES = (
    NonconvergenceError,
    SingularDesignError,
    DataError,
    EvaluationError,
)


class _RepContext:
    """Per-replication shared fits, memoized including any failure."""

    def __init__(self, sample, dgp):
        self.sample = sample
        self.dgp = dgp
        self.wspec = working_balance_spec()
        self.cmap = working_covariate_map(dgp)
        self._memo = {}

    def _get(self, key, build):
        if key not in self._memo:
            try:
                self._memo[key] = ("ok", build())
            except _FAILURE_TYPES as exc:
                self._memo[key] = ("err", exc)
        tag, value = self._memo[key]
        if tag == "err":
            raise value
        return value

    def outcome_fits(self):
        return self._get("ofits", lambda: fit_outcomes(self.sample, self.wspec))

    def mle(self):
        return self._get("mle", lambda: fit_mle(self.sample, self.cmap))


def _est_true(ctx):
    pi, _ = true_propensity(ctx.dgp, ctx.sample.covariates)
    point = iptw(ctx.sample, pi)
    return point, var_true(ctx.sample, pi), clip_propensity(pi)[1]


def _est_glm(ctx):
    model = ctx.mle()
    pi = model.pi_values(ctx.sample.covariates)
    point = iptw(ctx.sample, pi)
    variance = var_glm(ctx.sample, model, ctx.outcome_fits(), ctx.wspec)
    return point, variance, clip_propensity(pi)[1]


def _est_cbps(ctx):
    f_fns = _balance_f_functions()
    options = _gmm_options(len(f_fns), len(ctx.cmap))
    fit, point = fit_cbps_ate(
        ctx.sample, f_fns, options=options, covariate_map=ctx.cmap
    )
    variance = var_cbps(ctx.sample, fit, ctx.outcome_fits(), ctx.wspec)
    return point, variance, fit.clip_events


def _est_ocbps(ctx):
    options = _gmm_options(ctx.wspec.m, len(ctx.cmap))
    fit, point = fit_ocbps_ate(
        ctx.sample, ctx.wspec, options=options, covariate_map=ctx.cmap
    )
    variance = var_ocbps(ctx.sample, fit, ctx.outcome_fits(), ctx.wspec)
    return point, variance, fit.clip_events


def _est_aipw(ctx):
    model = ctx.mle()
    pi = model.pi_values(ctx.sample.covariates)
    ofits = ctx.outcome_fits()
    point = aipw(ctx.sample, pi, ofits, ctx.wspec)
    variance = var_vopt_plugin(ctx.sample, pi, ofits, ctx.wspec)
    return point, variance, clip_propensity(pi)[1]


def _est_ocbps_sieve(ctx):
    sspec = sieve_balance_spec()
    fit, point = fit_ocbps_sieve(ctx.sample, sspec)
    pi = fit.system.model.with_beta(fit.beta_hat).pi_values(
        ctx.sample.covariates
    )
    ofits = fit_outcomes(ctx.sample, sspec)
    variance = var_vopt_plugin(ctx.sample, pi, ofits, sspec)
    return point, variance, fit.clip_events


_ESTIMATORS = {
    "true": _est_true,
    "glm": _est_glm,
    "cbps": _est_cbps,
    "ocbps": _est_ocbps,
    "aipw": _est_aipw,
    "ocbps-sieve": _est_ocbps_sieve,
}


def _replicate(dgp: DgpSpec, names, base_seed: int, r: int):
    """Run every requested estimator on replication r.

    Returns, per estimator: (status, point, variance, clip_events,
    floor_events) with status "" on success or the failure class name.
    """
    out = []
    try:
        sample = draw_replication(dgp, replication_seed(base_seed, r))
    except _FAILURE_TYPES as exc:
        return [(type(exc).__name__, np.nan, np.nan, 0, 0) for _ in names]
    ctx = _RepContext(sample, dgp)
    for name in names:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", VarianceFloorWarning)
            try:
                point, variance, clips = _ESTIMATORS[name](ctx)
            except _FAILURE_TYPES as exc:
                out.append((type(exc).__name__, np.nan, np.nan, 0, 0))
                continue
        floors = sum(
            1 for w in caught if issubclass(w.category, VarianceFloorWarning)
        )
        out.append(("", float(point), float(variance), int(clips), floors))
    return out


def _mc_worker(args):
    dgp, names, base_seed, r = args
    return r, _replicate(dgp, names, base_seed, r)


@dataclass(frozen=True)
class McRow:
    """Summary statistics for one estimator across replications."""

    estimator: str
    bias: float
    sd: float
    rmse: float
    coverage: float
    failures: int
    mean_clip_events: float
    floor_events: int


@dataclass(frozen=True)
class McSummary:
    """Monte Carlo study output: one row per estimator, plus the setup."""

    scenario: str
    n: int
    beta1: float
    reps: int
    base_seed: int
    level: float
    true_ate: float
    rows: tuple
    invalid: bool

    def row(self, estimator: str) -> McRow:
        for row in self.rows:
            if row.estimator == estimator:
                return row
        raise KeyError(estimator)


def run_monte_carlo(spec: DgpSpec, estimators=DEFAULT_ESTIMATORS,
                    reps: int = 500, base_seed: int = 1,
                    level: float = 0.95, workers: int = 1) -> McSummary:
    """Replicate the design and summarize each estimator against truth.

    Deterministic for fixed inputs: replication r always uses the seed
    mixed from (base_seed, r), and results are reduced in index order
    whatever the worker count.
    """
    names = tuple(estimators)
    for name in names:
        if name not in _ESTIMATORS:
            raise SpecParseError(
                f"unknown estimator {name!r}; choose from {ESTIMATOR_NAMES}"
            )
    if len(set(names)) != len(names):
        raise SpecParseError("duplicate estimator names")
    if reps < 1:
        raise DataError("reps must be >= 1")
    if workers < 1:
        raise DataError("workers must be >= 1")

    results = [None] * reps
    if workers == 1:
        for r in range(reps):
            results[r] = _replicate(spec, names, base_seed, r)
    else:
        jobs = [(spec, names, base_seed, r) for r in range(reps)]
        chunk = max(1, reps // (workers * 4))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r, row in pool.map(_mc_worker, jobs, chunksize=chunk):
                results[r] = row

    truth = true_ate(spec)
    rows = []
    invalid = False
    for j, name in enumerate(names):
        status = [results[r][j] for r in range(reps)]
        ok = np.array([s[0] == "" for s in status], dtype=bool)
        failures = int(reps - np.count_nonzero(ok))
        est = np.array([s[1] for s in status])[ok]
        var = np.array([s[2] for s in status])[ok]
        clips = np.array([s[3] for s in status])[ok]
        floors = int(sum(s[4] for s in status))
        if est.size == 0:
            rows.append(
                McRow(name, np.nan, np.nan, np.nan, np.nan, failures, np.nan,
                      floors)
            )
            invalid = True
            continue
        mean = float(np.mean(est))
        bias = mean - truth
        sd = float(np.sqrt(np.mean((est - mean) ** 2)))
        rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
        covered = 0
        for point, variance in zip(est, var):
            low, high = confidence_interval(point, variance, spec.n, level)
            covered += int(low <= truth <= high)
        coverage = covered / est.size
        rows.append(
            McRow(name, bias, sd, rmse, coverage, failures,
                  float(np.mean(clips)) if clips.size else 0.0, floors)
        )
        if failures > 0.05 * reps:
            invalid = True
    return McSummary(
        scenario=spec.scenario,
        n=spec.n,
        beta1=spec.beta1,
        reps=reps,
        base_seed=int(base_seed),
        level=level,
        true_ate=truth,
        rows=tuple(rows),
        invalid=invalid,
    )


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6g}"


def summary_csv_text(summary: McSummary) -> str:
    """Render the summary as CSV with a fixed column order and format."""
    lines = ["estimator,bias,sd,rmse,coverage,failures"]
    for row in summary.rows:
        lines.append(
            ",".join(
                [
                    row.estimator,
                    _fmt(row.bias),
                    _fmt(row.sd),
                    _fmt(row.rmse),
                    _fmt(row.coverage),
                    str(row.failures),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_summary_csv(summary: McSummary, path) -> None:
    with open(path, "w", newline="") as handle:
        handle.write(summary_csv_text(summary))


def format_summary_table(summary: McSummary) -> str:
    """Aligned text table, one estimator per row."""
    head = (
        f"scenario={summary.scenario} n={summary.n} beta1={_fmt(summary.beta1)} "
        f"reps={summary.reps} seed={summary.base_seed} "
        f"true_ate={_fmt(summary.true_ate)}"
    )
    cols = ["estimator", "bias", "sd", "rmse", "coverage", "failures", "clips"]
    body = [
        [
            row.estimator,
            _fmt(row.bias),
            _fmt(row.sd),
            _fmt(row.rmse),
            _fmt(row.coverage),
            str(row.failures),
            _fmt(row.mean_clip_events),
        ]
        for row in summary.rows
    ]
    widths = [
        max(len(cols[k]), *(len(r[k]) for r in body)) if body else len(cols[k])
        for k in range(len(cols))
    ]
    lines = [head]
    lines.append("  ".join(c.ljust(widths[k]) for k, c in enumerate(cols)))
    for r in body:
        lines.append("  ".join(r[k].rjust(widths[k]) for k in range(len(cols))))
    if summary.invalid:
        lines.append("WARNING: failure rate above 5%; summary flagged invalid")
    return "\n".join(lines)


@dataclass(frozen=True)
class OracleEstimate:
    """Monte Carlo integral with its standard error across batches."""

    value: float
    std_error: float

    def __float__(self) -> float:
        return self.value


_ORACLE_SEED = 157


def make_optimal_f(spec: DgpSpec):
    """Balance functions that cancel the first-order tilt bias.

    Returns a callable mapping a covariate matrix to per-unit values of
    f with f1(x) = pi(x) K(x) + (1 - pi(x)) (K(x) + L(x)) and filler
    coordinates appended to match the working parameter count.  The
    fillers are the working index functions with the x4 coordinate
    dropped; f1 carries the x4 direction, so the moment geometry stays
    invertible.
    """
    map_fns = working_covariate_map(spec)
    x4 = CovariateFunction.coordinate(4)
    fillers = tuple(fn for fn in map_fns if fn != x4)
    if len(fillers) != len(map_fns) - 1:
        raise SingularDesignError("working map lacks the x4 coordinate")
    base = untilted(spec)

    def evaluate(X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        pi, _ = true_propensity(base, X)
        K, L = outcome_means(base, X)
        f1 = pi * K + (1.0 - pi) * (K + L)
        return np.column_stack([f1, _evaluate_matrix(fillers, X)])

    return evaluate


def untilted(spec: DgpSpec) -> DgpSpec:
    """The same design with the tilt switched off (the base model)."""
    if spec.scenario in _TILTED_SCENARIOS:
        return replace(spec, scenario="both-correct", xi=None)
    return spec


def bias_oracle_B(spec: DgpSpec, f_spec, mc_draws: int = 2_000_000,
                  weighting: str = "identity", batches: int = 20,
                  seed: int = _ORACLE_SEED) -> OracleEstimate:
    """First-order bias of the tilted-model weighting estimator.

    Integrates, by Monte Carlo over the covariate design, the difference
    between the direct tilt term and its projection through the moment
    geometry at the base coefficients.  f_spec is either a list of
    covariate functions or a callable returning per-unit f values.
    Within each batch the two expectation groups use disjoint draws so
    the reported standard error stays honest even when the bias is zero.
    """
    if spec.scenario not in _TILTED_SCENARIOS:
        raise DataError(
            "bias oracle applies to the tilted scenarios; got "
            f"{spec.scenario!r}"
        )
    if weighting not in ("identity", "inverse-covariance"):
        raise SpecParseError(f"unknown oracle weighting {weighting!r}")
    if batches < 2 or mc_draws < 2 * batches:
        raise DataError("need at least 2 batches and draws per batch")

    if callable(f_spec):
        f_values = f_spec
    else:
        fns = tuple(f_spec)

        def f_values(X):
            return _evaluate_matrix(fns, X)

    map_fns = working_covariate_map(spec)
    base = untilted(spec)
    per_batch = mc_draws // batches
    half = per_batch // 2
    rng = np.random.default_rng(np.random.SeedSequence([_ORACLE_SEED, seed]))
    values = np.empty(batches)
    for b in range(batches):
        x1 = rng.normal(3.0, np.sqrt(2.0), size=per_batch)
        rest = rng.normal(0.0, 1.0, size=(per_batch, 3))
        X = np.column_stack([x1, rest])
        pi, _ = true_propensity(base, X)
        K, L = outcome_means(base, X)
        u = _evaluate_matrix((spec.u_direction,), X)[:, 0]
        F = f_values(X)
        M = _evaluate_matrix(map_fns, X)
        phi = K + (1.0 - pi) * L
        # halves: direct tilt terms from the first, geometry from the second
        a = slice(0, half)
        g = slice(half, per_batch)
        term1 = float(np.mean(u[a] * phi[a] / (1.0 - pi[a])))
        H_y = -np.mean(phi[a, None] * M[a], axis=0)
        c = np.mean((u[g] / (1.0 - pi[g]))[:, None] * F[g], axis=0)
        H_f = -(F[g].T @ M[g]) / (per_batch - half)
        if weighting == "identity":
            W = np.eye(F.shape[1])
        else:
            scale = (pi[g] * (1.0 - pi[g]))[:, None]
            omega = (F[g] / scale).T @ F[g] / (per_batch - half)
            W = np.linalg.inv(omega)
        A = H_f.T @ W @ H_f
        try:
            proj = np.linalg.solve(A, H_f.T @ (W @ c))
        except np.linalg.LinAlgError:
            raise SingularDesignError(
                "singular moment geometry in bias oracle"
            ) from None
        values[b] = term1 - float(H_y @ proj)
    value = float(np.mean(values))
    std_error = float(np.std(values, ddof=1) / np.sqrt(batches))
    return OracleEstimate(value=value, std_error=std_error)
