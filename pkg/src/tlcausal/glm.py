"""Penalized logistic and multinomial-logit solvers with cross-validated tuning.

Binary fits minimize

    (1/n) * sum_i [psi(theta_i) - y_i theta_i] + lam * pen(b),
    theta_i = z_i' b + offset_i,   psi(t) = log(1 + exp(t)),

where z_i is the covariate row, augmented with an unpenalized intercept
unless told otherwise. pen(b) is either the unsquared euclidean norm of the
penalized block (solved by proximal gradient with block soft-thresholding)
or its square (ridge, handled as a smooth term). Multinomial fits use the
same machinery on the stacked per-category coefficient matrix with the
first observed category as the reference (score 0).

All fits are deterministic pure functions of their inputs and safe to call
concurrently. Objective values are tracked per iteration and are
non-increasing; set STRICT_MONOTONE = True to assert this while testing.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import expit as _expit

STRICT_MONOTONE = False

# linear predictors are pinned to +-LINPRED_BOUND at prediction time, which
# keeps reported probabilities strictly inside (0, 1); the objective itself
# uses overflow-free forms and needs no clamp
LINPRED_BOUND = 30.0


def psi(theta):
    """Log-partition function log(1 + exp(theta)), overflow-safe."""
    return np.logaddexp(0.0, theta)


def psi_prime(theta):
    """Logistic mean 1 / (1 + exp(-theta))."""
    return _expit(theta)


@dataclasses.dataclass(frozen=True)
class LinkFamily:
    """Exponential-family link; psi and psi_prime are the binary maps.

    The multinomial case reuses the same machinery per category with a
    log-sum-exp normalizer handled inside the solver.
    """

    name: str

    def psi(self, theta):
        return psi(theta)

    def psi_prime(self, theta):
        return psi_prime(theta)


BINARY_LOGIT = LinkFamily("binary-logit")
MULTINOMIAL_LOGIT = LinkFamily("multinomial-logit")

_PENALTY_KINDS = ("l2", "squared_l2")


@dataclasses.dataclass(frozen=True)
class PenaltySpec:
    """Penalty on the non-intercept coefficient block.

    kind "l2" is lam * ||b||_2 (norm, not squared), kind "squared_l2" is
    lam * ||b||_2^2. The intercept joins the block only when
    penalize_intercept is set.
    """

    kind: str = "l2"
    lam: float = 0.0
    penalize_intercept: bool = False

    def __post_init__(self):
        if self.kind not in _PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if not (self.lam >= 0.0 and math.isfinite(self.lam)):
            raise ValueError("lam must be finite and >= 0")


@dataclasses.dataclass(frozen=True)
class CvConfig:
    """K-fold cross-validation settings for lambda selection.

    lambda_grid entries must be positive; None means a per-problem default
    grid. Folds are stratified by outcome and deterministic given fold_seed.
    """

    n_folds: int = 5
    lambda_grid: tuple | None = None
    fold_seed: int = 0

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError("need at least 2 folds")
        if self.lambda_grid is not None:
            grid = tuple(float(g) for g in self.lambda_grid)
            if len(grid) == 0 or any(g <= 0 or not math.isfinite(g) for g in grid):
                raise ValueError("lambda_grid entries must be positive and finite")
            object.__setattr__(self, "lambda_grid", grid)


@dataclasses.dataclass
class ModelFit:
    """A fitted penalized GLM.

    beta has the intercept first when add_intercept is True. For
    multinomial fits beta is (n_columns, C-1) with categories[0] as the
    reference class. penalty.lam records the lambda the fit was run at.
    """

    beta: np.ndarray
    family: LinkFamily
    penalty: PenaltySpec
    offset_used: bool
    objective_value: float
    converged: bool
    iterations: int
    add_intercept: bool = True
    categories: np.ndarray | None = None
    degenerate: bool = False
    diagnostics: dict = dataclasses.field(default_factory=dict)


def _design(x, add_intercept):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("x_matrix must be 2-d")
    if not np.isfinite(x).all():
        raise ValueError("x_matrix has non-finite entries")
    if add_intercept:
        return np.hstack([np.ones((x.shape[0], 1)), x])
    if x.shape[1] == 0:
        raise ValueError("empty design: no columns and no intercept")
    return x


def _penalty_mask(n_cols, add_intercept, penalize_intercept):
    mask = np.ones(n_cols, dtype=bool)
    if add_intercept and not penalize_intercept:
        mask[0] = False
    return mask


def _lipschitz_bound(z, curvature, ridge_term):
    # curvature: 1/4 for binary logit, 1/2 for the multinomial normalizer
    n = z.shape[0]
    gram = z.T @ z
    lam_max = float(np.linalg.eigvalsh(gram)[-1]) if gram.size else 0.0
    return max(curvature * lam_max / n + ridge_term, 1e-12)


def _fista(value_grad, value, nonsmooth, prox, x0, lipschitz, tol, max_iter):
    """Monotone accelerated proximal gradient on a flat parameter vector.

    Backtracks from the Lipschitz step 1/L (the global curvature bound makes
    shrinking rare); momentum steps that would increase the objective fall
    back to a plain proximal step, so the tracked objective never increases.
    """
    x = np.asarray(x0, dtype=float).copy()
    z = x.copy()
    fx = value(x)
    best = fx + nonsmooth(x)
    t_mom = 1.0
    step = 1.0 / lipschitz
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        fz, gz = value_grad(z)
        s = step
        for _ in range(60):
            cand = prox(z - s * gz, s)
            d = cand - z
            f_cand = value(cand)
            if f_cand <= fz + gz @ d + 0.5 * (d @ d) / s + 1e-12:
                break
            s *= 0.5
        total = f_cand + nonsmooth(cand)
        if total <= best:
            x_new, new_best = cand, total
        else:
            # restart: proximal step from the current iterate cannot ascend
            fxx, gx = value_grad(x)
            cand = prox(x - s * gx, s)
            total = value(cand) + nonsmooth(cand)
            if total <= best:
                x_new, new_best = cand, total
            else:
                x_new, new_best = x, best
            z = x_new.copy()
            t_mom = 1.0
        if STRICT_MONOTONE and not (new_best <= best + 1e-12):
            raise AssertionError("objective increased across an iteration")
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        z = x_new + ((t_mom - 1.0) / t_new) * (x_new - x)
        rel = abs(best - new_best) / max(1.0, abs(best))
        x, best, t_mom = x_new, new_best, t_new
        if rel < tol:
            converged = True
            break
    return x, best, converged, it


def _check_binary_outcome(y, n):
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError("y length does not match x_matrix")
    if n == 0:
        raise ValueError("zero rows")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("y must contain only 0/1 values")
    return y


def fit_penalized_logistic(x_matrix, y, penalty, offset=None, *, add_intercept=True,
                           beta0=None, tol=1e-8, max_iter=5000, _lipschitz=None):
    """Fit a binary penalized logistic regression.

    Parameters
    ----------
    x_matrix : (n, p) covariates, without an intercept column
    y : (n,) outcomes in {0, 1}
    penalty : PenaltySpec
    offset : optional (n,) per-row addition to the linear predictor
    add_intercept : prepend an unpenalized intercept column (default)
    beta0 : optional warm start, full coefficient vector

    Returns a ModelFit whose objective_value is the penalized mean negative
    log-likelihood at the solution.
    """
    z = _design(x_matrix, add_intercept)
    n, d = z.shape
    y = _check_binary_outcome(y, n)
    if offset is not None:
        offset = np.asarray(offset, dtype=float)
        if offset.shape != (n,):
            raise ValueError("offset length does not match x_matrix")
    # the penalized block is the tail of the parameter vector; keep it a view
    cut = 1 if (add_intercept and not penalty.penalize_intercept) else 0
    lam = penalty.lam
    ridge = penalty.kind == "squared_l2"
    inv_n = 1.0 / n

    def value(b):
        theta = z @ b
        if offset is not None:
            theta += offset
        v = (float(np.logaddexp(0.0, theta).sum()) - float(y @ theta)) * inv_n
        if ridge and lam > 0.0:
            bp = b[cut:]
            v += lam * float(bp @ bp)
        return v

    def value_grad(b):
        theta = z @ b
        if offset is not None:
            theta += offset
        v = (float(np.logaddexp(0.0, theta).sum()) - float(y @ theta)) * inv_n
        resid = _expit(theta)
        resid -= y
        g = z.T @ resid
        g *= inv_n
        if ridge and lam > 0.0:
            bp = b[cut:]
            v += lam * float(bp @ bp)
            g[cut:] += 2.0 * lam * bp
        return v, g

    if ridge:
        def nonsmooth(b):
            return 0.0

        def prox(v, s):
            return v
    else:
        def nonsmooth(b):
            blk = b[cut:]
            return lam * math.sqrt(float(blk @ blk))

        def prox(v, s):
            if lam == 0.0:
                return v
            out = v.copy()
            blk = out[cut:]
            nrm = math.sqrt(float(blk @ blk))
            thr = s * lam
            if nrm <= thr:
                blk[:] = 0.0
            else:
                blk *= 1.0 - thr / nrm
            return out

    lips = _lipschitz if _lipschitz is not None else _lipschitz_bound(
        z, 0.25, 2.0 * lam if ridge else 0.0)
    x0 = np.zeros(d) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    if x0.shape != (d,):
        raise ValueError("beta0 has the wrong length")
    beta, obj, converged, iters = _fista(value_grad, value, nonsmooth, prox,
                                         x0, lips, tol, max_iter)
    return ModelFit(beta=beta, family=BINARY_LOGIT, penalty=penalty,
                    offset_used=offset is not None, objective_value=obj,
                    converged=converged, iterations=iters,
                    add_intercept=add_intercept)


def _one_hot(labels, categories):
    # columns for categories[1:], the reference category gets the zero row
    idx = np.searchsorted(categories, labels)
    known = (idx < len(categories)) & (np.asarray(categories)[np.minimum(
        idx, len(categories) - 1)] == labels)
    if not known.all():
        bad = sorted(set(np.asarray(labels)[~known].tolist()))
        raise ValueError(f"labels outside the fitted categories: {bad}")
    out = np.zeros((labels.shape[0], len(categories) - 1))
    nonref = idx > 0
    out[np.where(nonref)[0], idx[nonref] - 1] = 1.0
    return out


def fit_penalized_multinomial(x_matrix, t_labels, penalty, *, n_categories=None,
                              add_intercept=True, beta0=None, tol=1e-8,
                              max_iter=5000, _lipschitz=None):
    """Fit a penalized multinomial-logit model.

    t_labels are integer class labels; the smallest observed label is the
    reference category with score 0. When n_categories says more classes
    exist than the data shows, the fit covers the observed ones and lists
    the absent labels in diagnostics["missing_categories"].
    """
    z = _design(x_matrix, add_intercept)
    n, d = z.shape
    t_labels = np.asarray(t_labels)
    if t_labels.shape != (n,):
        raise ValueError("t_labels length does not match x_matrix")
    if n == 0:
        raise ValueError("zero rows")
    categories = np.unique(t_labels)
    if len(categories) < 2:
        raise ValueError("need at least two observed categories")
    diagnostics = {}
    if n_categories is not None and len(categories) < n_categories:
        expected = set(range(1, n_categories + 1))
        diagnostics["missing_categories"] = sorted(expected - set(int(c) for c in categories))
    c1 = len(categories) - 1
    yoh = _one_hot(t_labels, categories)
    mask_rows = _penalty_mask(d, add_intercept, penalty.penalize_intercept)
    # flat layout is row-major (d, c1): the intercept row occupies the first
    # c1 entries, so the penalized block is again a tail view
    cut = c1 if not bool(mask_rows[0]) else 0
    lam = penalty.lam
    ridge = penalty.kind == "squared_l2"
    inv_n = 1.0 / n

    def _scores(wflat):
        return z @ wflat.reshape(d, c1)

    def _nll_total(scores):
        m = np.maximum(scores.max(axis=1), 0.0)
        lse = m + np.log(np.exp(-m) + np.exp(scores - m[:, None]).sum(axis=1))
        return float(lse.sum() - (scores * yoh).sum()), lse

    def value(wflat):
        total, _ = _nll_total(_scores(wflat))
        v = total * inv_n
        if ridge and lam > 0.0:
            wp = wflat[cut:]
            v += lam * float(wp @ wp)
        return v

    def value_grad(wflat):
        scores = _scores(wflat)
        total, lse = _nll_total(scores)
        probs = np.exp(scores - lse[:, None])
        probs -= yoh
        g = (z.T @ probs).ravel()
        g *= inv_n
        v = total * inv_n
        if ridge and lam > 0.0:
            wp = wflat[cut:]
            v += lam * float(wp @ wp)
            g[cut:] += 2.0 * lam * wp
        return v, g

    if ridge:
        def nonsmooth(w):
            return 0.0

        def prox(v, s):
            return v
    else:
        def nonsmooth(w):
            blk = w[cut:]
            return lam * math.sqrt(float(blk @ blk))

        def prox(v, s):
            if lam == 0.0:
                return v
            out = v.copy()
            blk = out[cut:]
            nrm = math.sqrt(float(blk @ blk))
            thr = s * lam
            if nrm <= thr:
                blk[:] = 0.0
            else:
                blk *= 1.0 - thr / nrm
            return out

    lips = _lipschitz if _lipschitz is not None else _lipschitz_bound(
        z, 0.5, 2.0 * lam if ridge else 0.0)
    x0 = np.zeros(d * c1) if beta0 is None else np.asarray(beta0, dtype=float).ravel().copy()
    if x0.shape != (d * c1,):
        raise ValueError("beta0 has the wrong shape")
    wflat, obj, converged, iters = _fista(value_grad, value, nonsmooth, prox,
                                          x0, lips, tol, max_iter)
    return ModelFit(beta=wflat.reshape(d, c1), family=MULTINOMIAL_LOGIT,
                    penalty=penalty, offset_used=False, objective_value=obj,
                    converged=converged, iterations=iters,
                    add_intercept=add_intercept, categories=categories,
                    diagnostics=diagnostics)


def predict_proba(fit, x_matrix, offset=None):
    """Predicted probabilities from a ModelFit.

    Binary fits return an (n,) vector with the linear predictor pinned to
    +-LINPRED_BOUND, so values stay strictly inside (0, 1). Multinomial
    fits return an (n, C) matrix aligned with fit.categories; rows sum to 1.
    """
    z = _design(x_matrix, fit.add_intercept)
    if fit.family.name == "binary-logit":
        if z.shape[1] != fit.beta.shape[0]:
            raise ValueError("fit dimension does not match x_matrix")
        theta = z @ fit.beta
        if offset is not None:
            theta = theta + np.asarray(offset, dtype=float)
        return _expit(np.clip(theta, -LINPRED_BOUND, LINPRED_BOUND))
    if z.shape[1] != fit.beta.shape[0]:
        raise ValueError("fit dimension does not match x_matrix")
    scores = z @ fit.beta
    full = np.hstack([np.zeros((scores.shape[0], 1)), scores])
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def negative_log_likelihood(beta, x_matrix, y, offset=None, *, add_intercept=None,
                            categories=None):
    """Total negative log-likelihood sum_i [psi(theta_i) - y_i theta_i].

    beta may be a ModelFit (its conventions are used) or a raw coefficient
    array; for a raw vector of length p+1 against (n, p) covariates an
    intercept-first layout is assumed. A 2-d beta with `categories` scores a
    multinomial model, with y holding integer class labels.
    """
    if isinstance(beta, ModelFit):
        fit = beta
        if fit.family.name == "multinomial-logit":
            return negative_log_likelihood(fit.beta, x_matrix, y, offset,
                                           add_intercept=fit.add_intercept,
                                           categories=fit.categories)
        return negative_log_likelihood(fit.beta, x_matrix, y, offset,
                                       add_intercept=fit.add_intercept)
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x_matrix, dtype=float)
    if beta.ndim == 2:
        if categories is None:
            raise ValueError("multinomial scoring needs the category labels")
        categories = np.asarray(categories)
        if add_intercept is None:
            add_intercept = beta.shape[0] == x.shape[1] + 1
        z = _design(x, add_intercept)
        labels = np.asarray(y)
        scores = z @ beta
        yoh = _one_hot(labels, categories)
        m = np.maximum(scores.max(axis=1), 0.0)
        lse = m + np.log(np.exp(-m) + np.exp(scores - m[:, None]).sum(axis=1))
        return float(lse.sum() - (scores * yoh).sum())
    if add_intercept is None:
        add_intercept = beta.shape[0] == x.shape[1] + 1
    z = _design(x, add_intercept)
    if z.shape[1] != beta.shape[0]:
        raise ValueError("beta length does not match x_matrix")
    yv = _check_binary_outcome(y, z.shape[0])
    theta = z @ beta
    if offset is not None:
        theta = theta + np.asarray(offset, dtype=float)
    return float(np.logaddexp(0.0, theta).sum() - yv @ theta)


def default_lambda_grid(x_matrix, y_or_t, family=BINARY_LOGIT, *, add_intercept=True,
                        penalize_intercept=False, n_points=20, span=(1e-4, 10.0)):
    """Descending lambda grid scaled by the gradient norm at beta = 0.

    20 points log-spaced over span * ||grad of the mean NLL at zero||
    restricted to the penalized block.
    """
    z = _design(x_matrix, add_intercept)
    n, d = z.shape
    mask = _penalty_mask(d, add_intercept, penalize_intercept)
    if family.name == "binary-logit":
        y = _check_binary_outcome(y_or_t, n)
        g = z.T @ (0.5 - y) / n
        scale = float(np.linalg.norm(g[mask]))
    else:
        labels = np.asarray(y_or_t)
        categories = np.unique(labels)
        c = len(categories)
        yoh = _one_hot(labels, categories)
        g = z.T @ (1.0 / c - yoh) / n
        scale = float(np.linalg.norm(g[mask.astype(bool), :]))
    if scale <= 0.0:
        scale = 1.0
    lo, hi = span
    return tuple(scale * np.logspace(math.log10(hi), math.log10(lo), n_points))


def _stratified_folds(labels, n_folds, seed):
    """Fold id per row, stratified by label, deterministic given seed."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    pos = 0
    for lab in np.unique(labels):
        idx = np.where(labels == lab)[0]
        rng.shuffle(idx)
        for j, row in enumerate(idx):
            fold_of[row] = (pos + j) % n_folds
        pos += len(idx)
    return fold_of


def cross_validate_lambda(x_matrix, y_or_t, family, cv, *, kind="l2", offset=None,
                          add_intercept=True, penalize_intercept=False,
                          tol=1e-8, max_iter=5000):
    """Pick lambda by stratified K-fold CV, minimizing mean held-out NLL.

    The grid is walked in descending order with warm starts; held-out loss
    is the per-row mean NLL averaged over folds, and exact ties go to the
    larger lambda.
    """
    x = np.asarray(x_matrix, dtype=float)
    n = x.shape[0]
    if n < cv.n_folds:
        raise ValueError(f"{n} rows is fewer than {cv.n_folds} folds")
    grid = cv.lambda_grid
    if grid is None:
        grid = default_lambda_grid(x, y_or_t, family, add_intercept=add_intercept,
                                   penalize_intercept=penalize_intercept)
    grid = tuple(sorted(grid, reverse=True))
    binary = family.name == "binary-logit"
    labels = np.asarray(y_or_t)
    fold_of = _stratified_folds(labels, cv.n_folds, cv.fold_seed)
    losses = np.zeros(len(grid))
    for f in range(cv.n_folds):
        test = fold_of == f
        train = ~test
        if not test.any():
            continue
        x_tr, x_te = x[train], x[test]
        lab_tr, lab_te = labels[train], labels[test]
        off_tr = offset[train] if offset is not None else None
        off_te = offset[test] if offset is not None else None
        z_tr = _design(x_tr, add_intercept)
        warm = None
        for g, lam in enumerate(grid):
            pen = PenaltySpec(kind=kind, lam=lam, penalize_intercept=penalize_intercept)
            ridge_term = 2.0 * lam if kind == "squared_l2" else 0.0
            lips = _lipschitz_bound(z_tr, 0.25 if binary else 0.5, ridge_term)
            if binary:
                fit = fit_penalized_logistic(x_tr, lab_tr, pen, off_tr,
                                             add_intercept=add_intercept, beta0=warm,
                                             tol=tol, max_iter=max_iter, _lipschitz=lips)
                held = negative_log_likelihood(fit.beta, x_te, lab_te, off_te,
                                               add_intercept=add_intercept)
            else:
                fit = fit_penalized_multinomial(x_tr, lab_tr, pen,
                                                add_intercept=add_intercept, beta0=warm,
                                                tol=tol, max_iter=max_iter, _lipschitz=lips)
                held = negative_log_likelihood(fit.beta, x_te, lab_te,
                                               add_intercept=add_intercept,
                                               categories=fit.categories)
            warm = fit.beta
            losses[g] += held / test.sum() / cv.n_folds
    # descending grid, so argmin's first-match rule breaks ties upward
    return grid[int(np.argmin(losses))]
