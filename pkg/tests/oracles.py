"""Independent reference computations for the test suite.

Everything here derives the quantities under test from scratch: plain-form
objectives minimized by derivative-free scipy optimizers, explicit per-row
summations, and grid searches. Deliberately structured differently from the
library code (different stable forms, loops instead of matrix algebra) so
agreement is evidence, not tautology.
"""

import numpy as np
from scipy.optimize import minimize


def softplus(t):
    t = np.asarray(t, dtype=float)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def binary_objective(beta, x, y, lam, kind, offset=None, penalize_intercept=False):
    """Penalized mean negative log-likelihood of a logistic model."""
    z = np.hstack([np.ones((x.shape[0], 1)), x])
    theta = z @ beta
    if offset is not None:
        theta = theta + offset
    nll = float(np.sum(softplus(theta) - y * theta))
    block = beta if penalize_intercept else beta[1:]
    if kind == "l2":
        pen = lam * float(np.sqrt(np.sum(block * block)))
    elif kind == "squared_l2":
        pen = lam * float(np.sum(block * block))
    else:
        raise ValueError(kind)
    return nll / x.shape[0] + pen


def multinomial_objective(wflat, x, t, lam, kind, categories,
                          penalize_intercept=False):
    """Penalized mean negative log-likelihood of a multinomial-logit model.

    categories: sorted class labels, the first being the reference with
    score 0; wflat reshapes to (p + 1, C - 1) feature-major.
    """
    n = x.shape[0]
    z = np.hstack([np.ones((n, 1)), x])
    c1 = len(categories) - 1
    w = np.asarray(wflat, dtype=float).reshape(z.shape[1], c1)
    scores = z @ w
    label_to_col = {lab: j for j, lab in enumerate(categories)}
    nll = 0.0
    for i in range(n):
        row = scores[i]
        m = max(0.0, float(row.max()))
        lse = m + np.log(np.exp(-m) + np.sum(np.exp(row - m)))
        col = label_to_col[t[i]]
        own = 0.0 if col == 0 else float(row[col - 1])
        nll += lse - own
    block = w if penalize_intercept else w[1:]
    flat = np.asarray(block).ravel()
    if kind == "l2":
        pen = lam * float(np.sqrt(flat @ flat))
    elif kind == "squared_l2":
        pen = lam * float(flat @ flat)
    else:
        raise ValueError(kind)
    return nll / n + pen


def _run(fun, x0, args, method):
    if method == "Powell":
        opts = {"xtol": 1e-10, "ftol": 1e-14, "maxiter": 50000, "maxfev": 200000}
    else:
        opts = {"xatol": 1e-10, "fatol": 1e-14, "maxiter": 50000, "maxfev": 50000}
    return minimize(fun, x0, args=args, method=method, options=opts)


def oracle_minimize(fun, d, args, method="Nelder-Mead", extra_starts=()):
    """Derivative-free minimization with restarts and polish passes."""
    starts = [np.zeros(d), np.full(d, 0.25), np.full(d, -0.25)]
    starts += [np.asarray(s, dtype=float) for s in extra_starts]
    best = None
    for s in starts:
        r = _run(fun, s, args, method)
        if best is None or r.fun < best.fun:
            best = r
    for _ in range(2):
        r = _run(fun, best.x, args, method)
        if r.fun < best.fun:
            best = r
    return best.x, float(best.fun)


def random_logistic_data(rng, n, p, beta=None, offset=None):
    """Random binary data with both classes present."""
    for _ in range(50):
        x = rng.normal(size=(n, p))
        b = rng.normal(scale=0.8, size=p + 1) if beta is None \
            else np.asarray(beta, dtype=float)
        theta = b[0] + x @ b[1:]
        if offset is not None:
            theta = theta + offset
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-theta))).astype(float)
        if 0.0 < y.mean() < 1.0:
            return x, y
    raise AssertionError("could not draw two-class data")


def solver_oracle_gaps(n_binary=12, n_multinomial=8, seed=91731):
    """Coefficient gaps between the library solvers and the scipy oracles on
    random small instances (n <= 50, p <= 3). Returns a list of
    (label, max_abs_gap) pairs, one per instance.
    """
    from tlcausal.glm import (PenaltySpec, fit_penalized_logistic,
                              fit_penalized_multinomial)
    gaps = []
    for i in range(n_binary):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0, i)))
        n = int(rng.integers(20, 51))
        p = int(rng.integers(1, 4))
        kind = "l2" if i % 2 == 0 else "squared_l2"
        lam = float(np.exp(rng.uniform(np.log(0.02), np.log(0.5))))
        x, y = random_logistic_data(rng, n, p)
        fit = fit_penalized_logistic(x, y, PenaltySpec(kind=kind, lam=lam),
                                     tol=1e-12, max_iter=20000)
        ref, _ = oracle_minimize(binary_objective, p + 1, (x, y, lam, kind),
                                 extra_starts=[fit.beta])
        gaps.append((f"binary[{i}] {kind} n={n} p={p}",
                     float(np.max(np.abs(fit.beta - ref)))))
    for i in range(n_multinomial):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 1, i)))
        n = int(rng.integers(24, 51))
        p = int(rng.integers(1, 3))
        kind = "l2" if i % 2 == 0 else "squared_l2"
        lam = float(np.exp(rng.uniform(np.log(0.05), np.log(0.5))))
        x = rng.normal(size=(n, p))
        while True:
            t = rng.integers(1, 4, size=n)
            if len(np.unique(t)) == 3:
                break
        fit = fit_penalized_multinomial(x, t, PenaltySpec(kind=kind, lam=lam),
                                        tol=1e-12, max_iter=20000)
        cats = sorted(np.unique(t).tolist())
        d = (p + 1) * (len(cats) - 1)
        ref, _ = oracle_minimize(multinomial_objective, d, (x, t, lam, kind, cats),
                                 method="Powell",
                                 extra_starts=[fit.beta.ravel()])
        gaps.append((f"multinomial[{i}] {kind} n={n} p={p}",
                     float(np.max(np.abs(fit.beta.ravel() - ref)))))
    return gaps


def tatt_by_explicit_sum(y, t, r, x, k, m1, m2, mu_fn, prob_fn):
    """The counterfactual-contrast estimator assembled row by row.

    mu_fn(x_row) -> scalar predicted outcome probability;
    prob_fn(x_row, m) -> propensity of region m for this group.
    Returns (tatt, mpo) from explicit indicator sums.
    """
    n2 = int(np.sum((r == k) & (t == m2)))
    total = 0.0
    ybar_sum = 0.0
    for i in range(len(y)):
        if r[i] != k:
            continue
        if t[i] == m2:
            mu_i = float(y[i]) if m1 == m2 else float(mu_fn(x[i]))
            total += mu_i
            ybar_sum += float(y[i])
        if m1 != m2 and t[i] == m1:
            w = prob_fn(x[i], m2) / prob_fn(x[i], m1)
            total += w * (float(y[i]) - float(mu_fn(x[i])))
    mpo = total / n2
    return mpo - ybar_sum / n2, mpo


def sandwich_se_by_explicit_sum(y, t, r, x, k, m1, m2, mu_fn, prob_fn, kind):
    """Fixed-nuisance se from an explicit pass over contributing rows."""
    phis = []
    for i in range(len(y)):
        if r[i] != k:
            continue
        if t[i] == m2:
            if m1 == m2:
                phi = float(y[i]) if kind == "MPO" else 0.0
            else:
                mu_i = float(mu_fn(x[i]))
                phi = mu_i if kind == "MPO" else mu_i - float(y[i])
            phis.append(phi)
        elif m1 != m2 and t[i] == m1:
            w = prob_fn(x[i], m2) / prob_fn(x[i], m1)
            phis.append(w * (float(y[i]) - float(mu_fn(x[i]))))
    phis = np.array(phis)
    n2 = int(np.sum((r == k) & (t == m2)))
    return float(np.sqrt(np.sum((phis - phis.mean()) ** 2)) / n2)


def best_simplex_loglik_by_grid(candidates, x_val, y_val, step=0.01):
    """Grid search over the 2-simplex (3 candidates) for the best validation
    log-likelihood; returns (best_loglik, best_eta)."""
    candidates = np.asarray(candidates, dtype=float)
    assert candidates.shape[1] == 3
    z = np.hstack([np.ones((x_val.shape[0], 1)), x_val])
    a = z @ candidates
    best = -np.inf
    best_eta = None
    ticks = int(round(1.0 / step))
    for i in range(ticks + 1):
        for j in range(ticks + 1 - i):
            eta = np.array([i, j, ticks - i - j], dtype=float) / ticks
            theta = a @ eta
            ll = float(y_val @ theta - np.sum(softplus(theta)))
            if ll > best:
                best = ll
                best_eta = eta
    return best, best_eta
