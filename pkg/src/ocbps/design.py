"""Covariate functions, balance specifications, and observed samples.

A balance specification names two blocks of real-valued functions of the
covariate vector.  Functions in the first block (``h1``) are balanced between
the weighted treated and weighted control groups; functions in the second
block (``h2``) have their weighted treated mean tied to the full-sample mean.
Functions are monomials in the covariate coordinates and are written in a
small text grammar, for example ``"1, x2, x3, x4"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, SpecParseError

_FACTOR_RE = re.compile(r"^x(\d+)(?:\^(\d+))?$")


@dataclass(frozen=True)
class CovariateFunction:
    """A monomial in the covariate coordinates.

    The canonical form is a sorted tuple of (index, power) pairs with 1-based
    indices and powers >= 1.  The empty tuple is the constant-one function.
    Two functions are equal iff their canonical forms are equal, so e.g.
    ``coordinate(2)`` and ``monomial({2: 1})`` compare equal.
    """

    terms: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        for j, p in self.terms:
            if j < 1:
                raise SpecParseError(f"covariate index {j} must be >= 1")
            if p < 1:
                raise SpecParseError(f"exponent {p} for x{j} must be >= 1")
        canonical = _merge_terms(self.terms)
        if canonical != self.terms:
            object.__setattr__(self, "terms", canonical)

    # ---- constructors -------------------------------------------------

    @classmethod
    def constant_one(cls) -> "CovariateFunction":
        return cls(())

    @classmethod
    def coordinate(cls, j: int) -> "CovariateFunction":
        return cls(((j, 1),))

    @classmethod
    def square(cls, j: int) -> "CovariateFunction":
        return cls(((j, 2),))

    @classmethod
    def interaction(cls, j: int, k: int) -> "CovariateFunction":
        return cls(((j, 1), (k, 1)))

    @classmethod
    def monomial(cls, exponents: dict[int, int]) -> "CovariateFunction":
        """Arbitrary product of powers, e.g. {1: 3, 2: 1} for x1^3 * x2."""
        return cls(tuple(sorted(exponents.items())))

    # ---- description --------------------------------------------------

    @property
    def kind(self) -> str:
        t = self.terms
        if not t:
            return "constant-one"
        if len(t) == 1 and t[0][1] == 1:
            return "coordinate"
        if len(t) == 1 and t[0][1] == 2:
            return "square"
        if len(t) == 2 and t[0][1] == 1 and t[1][1] == 1:
            return "interaction"
        return "custom-polynomial"

    @property
    def max_index(self) -> int:
        """Largest 1-based covariate index used (0 for the constant)."""
        return max((j for j, _ in self.terms), default=0)

    def render(self) -> str:
        if not self.terms:
            return "1"
        return "*".join(
            f"x{j}^{p}" if p > 1 else f"x{j}" for j, p in self.terms
        )

    def __repr__(self):
        return f"CovariateFunction({self.render()!r})"

    def __call__(self, x) -> float:
        # Route through the shared matrix evaluator so scalar and batched
        # evaluation are bit-identical.
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(_evaluate_matrix((self,), x[None, :])[0, 0])


def _merge_terms(terms):
    merged: dict[int, int] = {}
    for j, p in terms:
        merged[j] = merged.get(j, 0) + p
    return tuple(sorted(merged.items()))


def parse_function_spec(text: str) -> tuple[CovariateFunction, ...]:
    """Parse a comma-separated list of covariate-function tokens.

    Grammar: each token is ``1`` (constant), ``x<j>`` (coordinate),
    ``x<j>^2`` (square), or ``x<j>*x<k>`` (interaction), with 1-based
    indices.  Products of powers such as ``x1^3*x2`` are accepted as the
    obvious generalization.  Whitespace around tokens is ignored.

    Raises:
        SpecParseError: empty spec, or a token outside the grammar.  The
            error message names the offending token verbatim.
    """
    if text is None or not text.strip():
        raise SpecParseError("empty covariate function spec")
    fns = []
    for token in text.split(","):
        tok = token.strip()
        if not tok:
            raise SpecParseError(f"empty token in spec {text!r}")
        fns.append(_parse_token(tok))
    return tuple(fns)


def _parse_token(tok: str) -> CovariateFunction:
    if tok == "1":
        return CovariateFunction.constant_one()
    terms = []
    for factor in tok.split("*"):
        factor = factor.strip()
        m = _FACTOR_RE.match(factor)
        if m is None:
            raise SpecParseError(f"malformed covariate function token {tok!r}")
        j = int(m.group(1))
        p = int(m.group(2)) if m.group(2) is not None else 1
        if j < 1 or p < 1:
            raise SpecParseError(f"malformed covariate function token {tok!r}")
        terms.append((j, p))
    return CovariateFunction(tuple(terms))


def render_function_spec(fns) -> str:
    """Inverse of :func:`parse_function_spec` (parse-render-parse is identity)."""
    return ",".join(f.render() for f in fns)


def _evaluate_matrix(fns, X: np.ndarray) -> np.ndarray:
    if X.ndim != 2:
        raise DimensionError(f"covariates must be 2-d, got shape {X.shape}")
    n, d = X.shape
    out = np.empty((n, len(fns)), dtype=float)
    for k, fn in enumerate(fns):
        if fn.max_index > d:
            raise DimensionError(
                f"function {fn.render()!r} needs covariate index "
                f"{fn.max_index} but the sample has d={d}"
            )
        col = np.ones(n)
        for j, p in fn.terms:
            col = col * X[:, j - 1] ** p
        out[:, k] = col
    return out


def evaluate_functions(fns, x) -> np.ndarray:
    """Evaluate a list of functions at one covariate vector.

    Args:
        fns: sequence of CovariateFunction.
        x: length-d vector (a single observation).

    Returns:
        length-len(fns) vector, component k holding fns[k](x).

    Raises:
        DimensionError: some function references an index beyond d.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError(f"expected a length-d vector, got shape {x.shape}")
    return _evaluate_matrix(tuple(fns), x[None, :])[0]


@dataclass(frozen=True)
class BalanceSpec:
    """Two blocks of balance functions.

    h1 functions get the treated-vs-control contrast condition, h2 functions
    the treated-vs-sample level condition.  h1 must be nonempty; h2 may be
    empty.  Duplicates within a block are rejected (the moment conditions
    would be collinear by construction).
    """

    h1: tuple[CovariateFunction, ...]
    h2: tuple[CovariateFunction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "h1", tuple(self.h1))
        object.__setattr__(self, "h2", tuple(self.h2))
        if len(self.h1) == 0:
            raise SpecParseError("h1 block must contain at least one function")
        for name, block in (("h1", self.h1), ("h2", self.h2)):
            seen = set()
            for fn in block:
                if fn in seen:
                    raise SpecParseError(
                        f"duplicate function {fn.render()!r} in {name} block"
                    )
                seen.add(fn)

    @classmethod
    def from_strings(cls, h1: str, h2: str | None = None) -> "BalanceSpec":
        fns1 = parse_function_spec(h1)
        fns2 = parse_function_spec(h2) if h2 else ()
        return cls(fns1, fns2)

    @property
    def m1(self) -> int:
        return len(self.h1)

    @property
    def m2(self) -> int:
        return len(self.h2)

    @property
    def m(self) -> int:
        return self.m1 + self.m2

    @property
    def functions(self) -> tuple[CovariateFunction, ...]:
        """All functions, h1 block then h2 block."""
        return self.h1 + self.h2

    def max_index(self) -> int:
        return max((f.max_index for f in self.functions), default=0)

    def render(self) -> tuple[str, str]:
        return render_function_spec(self.h1), render_function_spec(self.h2)


def design_matrix(fns, sample) -> np.ndarray:
    """Evaluate functions over every observation.

    Args:
        fns: sequence of CovariateFunction, or a BalanceSpec (h1 block
            columns first, then h2).
        sample: ObservedSample, or a raw (n, d) covariate matrix.

    Returns:
        (n, |fns|) matrix; row i is bit-identical to
        evaluate_functions(fns, X_i).
    """
    if isinstance(fns, BalanceSpec):
        fns = fns.functions
    X = getattr(sample, "covariates", sample)
    return _evaluate_matrix(tuple(fns), np.asarray(X, dtype=float))


@dataclass(frozen=True)
class ObservedSample:
    """One observed dataset (covariates, binary treatment, outcome).

    Validation on construction: covariates are an (n, d) finite float matrix
    with n >= 2 and d >= 1, treatment is 0/1 with both arms nonempty, and the
    outcome is finite with matching length.  Arrays are copied and frozen.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    _validated: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.array(self.covariates, dtype=float)
        T = np.asarray(self.treatment)
        Y = np.array(self.outcome, dtype=float)
        if X.ndim != 2:
            raise DataError(f"covariates must be 2-d, got shape {X.shape}")
        n, d = X.shape
        if n < 2:
            raise DataError(f"need at least 2 observations, got {n}")
        if d < 1:
            raise DataError("need at least 1 covariate column")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates contain non-finite values")
        if T.shape != (n,):
            raise DataError(
                f"treatment shape {T.shape} does not match n={n}"
            )
        Tf = np.asarray(T, dtype=float)
        if not np.all(np.isfinite(Tf)) or not np.all(
            (Tf == 0.0) | (Tf == 1.0)
        ):
            raise DataError("treatment values must all be 0 or 1")
        Ti = Tf.astype(np.int64)
        n1 = int(Ti.sum())
        if n1 == 0 or n1 == n:
            raise DataError(
                f"both arms must be nonempty (treated count {n1} of {n})"
            )
        if Y.shape != (n,):
            raise DataError(f"outcome shape {Y.shape} does not match n={n}")
        if not np.all(np.isfinite(Y)):
            raise DataError("outcome contains non-finite values")
        for arr in (X, Ti, Y):
            arr.flags.writeable = False
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "treatment", Ti)
        object.__setattr__(self, "outcome", Y)
        object.__setattr__(self, "_validated", True)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated
