"""Deterministic random-instance generators and oracles shared by tests."""

import numpy as np
from scipy.special import expit

from ocbps.design import BalanceSpec, CovariateFunction, ObservedSample
from ocbps.gmm import eval_moments


def random_logistic_sample(rng, n=None, d=None):
    """One draw from a random correctly specified logistic/linear design.

    Coefficients are kept small enough that overlap stays healthy and the
    balancing systems remain comfortably solvable at modest n.  Redraws on
    a nearly empty arm, so the effective n is always as requested.
    """
    n = int(n if n is not None else rng.integers(50, 501))
    d = int(d if d is not None else rng.integers(2, 5))
    while True:
        X = rng.normal(size=(n, d)) * rng.uniform(0.5, 1.5, size=d)
        gamma = rng.uniform(-0.6, 0.6, size=d)
        pi = expit(rng.uniform(-0.4, 0.4) + X @ gamma)
        T = (rng.uniform(size=n) < pi).astype(np.int64)
        if 2 <= T.sum() <= n - 2:
            break
    K = 5.0 + X @ rng.uniform(-2.0, 2.0, size=d)
    L = 1.0 + X @ rng.uniform(-1.0, 1.0, size=d)
    Y = K + T * L + rng.normal(size=n)
    return ObservedSample(X, T, Y)


def function_pool(d):
    """Non-constant candidate balance functions over d coordinates."""
    fns = [CovariateFunction.coordinate(j) for j in range(1, d + 1)]
    fns += [CovariateFunction.square(j) for j in range(1, d + 1)]
    return fns


def random_balance_spec(rng, d):
    """A random two-block spec with disjoint blocks.

    Disjointness keeps the default union covariate map the same length as
    the stacked conditions, so the fitted system is just-identified.
    """
    pool = function_pool(d)
    order = rng.permutation(len(pool))
    pool = [pool[i] for i in order]
    extra1 = int(rng.integers(1, 3))
    h1 = (CovariateFunction.constant_one(),) + tuple(pool[:extra1])
    m2 = int(rng.integers(1, 3))
    h2 = tuple(pool[extra1:extra1 + m2])
    return BalanceSpec(h1, h2)


def fd_jacobian(system, beta, h=1e-5):
    """Central finite differences of eval_moments, column by column."""
    beta = np.asarray(beta, dtype=float)
    cols = []
    for k in range(beta.size):
        e = np.zeros_like(beta)
        e[k] = h
        g_hi = eval_moments(system, beta + e)
        g_lo = eval_moments(system, beta - e)
        cols.append((g_hi - g_lo) / (2.0 * h))
    return np.column_stack(cols)


def rel_close(a, b, rtol):
    """Max-norm closeness relative to the larger of 1 and the target."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(1.0, float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) <= rtol * scale
