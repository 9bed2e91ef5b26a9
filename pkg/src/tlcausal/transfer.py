"""Transfer-learned outcome models for a small target stratum.

Pipeline for a target (group, region) stratum:

  1. split the target rows into a training and a validation part
  2. fit a penalized logistic model in each admissible source stratum
     (other groups, same region)
  3. correct each source fit toward the target by a penalized offset fit
     on the target training rows
  4. fit a target-only model on the same training rows
  5. combine all candidate coefficient vectors with simplex weights chosen
     to maximize the validation log-likelihood

Steps 2-4 never see validation rows; step 5 sees nothing else. The
aggregation step runs exponentiated-gradient ascent and falls back to the
best single candidate when that is better, so aggregation can never do
worse than any candidate on the validation data.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit as _expit

from .data import ObservationTable
from .glm import (
    BINARY_LOGIT,
    LINPRED_BOUND,
    CvConfig,
    ModelFit,
    PenaltySpec,
    cross_validate_lambda,
    fit_penalized_logistic,
    negative_log_likelihood,
)


@dataclasses.dataclass(frozen=True)
class StratumKey:
    k: int
    m: int


@dataclasses.dataclass(frozen=True)
class TransferConfig:
    """Knobs for the transfer pipeline.

    validation_fraction of the target stratum is held out for aggregation;
    the split is stratified by outcome and seeded. Sources need at least
    min_source_rows rows and both outcome classes. delta_cv overrides the
    lambda grid machinery for the bias-correction fits (defaults to cv).
    swap_splits additionally runs the pipeline with the two halves swapped
    and averages the aggregated coefficients.
    """

    validation_fraction: float = 0.3
    split_seed: int = 0
    cv: CvConfig = CvConfig()
    delta_cv: CvConfig | None = None
    min_source_rows: int = 20
    penalty_kind: str = "l2"
    swap_splits: bool = False
    tol: float = 1e-8
    max_iter: int = 5000

    def __post_init__(self):
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.min_source_rows < 1:
            raise ValueError("min_source_rows must be positive")


@dataclasses.dataclass
class TransferResult:
    """Everything the pipeline produced, with row-index bookkeeping.

    candidates is (p+1, C) with one column per adapted source (ascending
    group order) and the target-only fit last; candidate_groups aligns with
    the columns and marks the target-only column with the target's own
    group. beta_agg equals candidates @ eta.
    """

    target: StratumKey
    candidates: np.ndarray
    candidate_groups: list
    eta: np.ndarray
    beta_agg: np.ndarray
    validation_loglik: np.ndarray
    aggregated_loglik: float
    admitted_sources: list
    dropped_sources: dict
    source_fits: dict
    delta_fits: dict
    target_fit: ModelFit
    train_rows: np.ndarray
    validation_rows: np.ndarray
    degenerate: bool = False
    diagnostics: dict = dataclasses.field(default_factory=dict)


def split_target_rows(y, validation_fraction, seed):
    """Stratified train/validation split of a target stratum.

    Returns (train_local, validation_local) index arrays into the stratum's
    rows. Within each outcome class the shuffled first round(frac * n_c)
    rows go to validation. Deterministic given the seed.
    """
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    val = []
    train = []
    for cls in np.unique(y):
        idx = np.where(y == cls)[0]
        rng.shuffle(idx)
        n_val = int(round(validation_fraction * len(idx)))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    train = np.sort(np.concatenate(train))
    val = np.sort(np.concatenate(val)) if val else np.array([], dtype=int)
    return train, val


def fit_source_models(data: ObservationTable, target: StratumKey, cfg: TransferConfig):
    """Penalized logistic fits in every admissible source stratum.

    Sources are the other groups' strata in the target's region. A source
    with fewer than cfg.min_source_rows rows, a single outcome class, or a
    non-converging fit is dropped with a reason. Returns (fits, dropped).
    """
    fits = {}
    dropped = {}
    for k_src in range(1, data.n_groups + 1):
        if k_src == target.k:
            continue
        mask = data.stratum_mask(k_src, target.m)
        n_src = int(mask.sum())
        if n_src == 0:
            continue
        if n_src < cfg.min_source_rows:
            dropped[k_src] = f"only {n_src} rows (need {cfg.min_source_rows})"
            continue
        y_src = data.y[mask]
        if len(np.unique(y_src)) < 2:
            dropped[k_src] = "single-class outcome"
            continue
        x_src = data.x[mask]
        try:
            lam = cross_validate_lambda(x_src, y_src, BINARY_LOGIT, cfg.cv,
                                        kind=cfg.penalty_kind, tol=cfg.tol,
                                        max_iter=cfg.max_iter)
            fit = fit_penalized_logistic(
                x_src, y_src, PenaltySpec(kind=cfg.penalty_kind, lam=lam),
                tol=cfg.tol, max_iter=cfg.max_iter)
        except ValueError as exc:
            dropped[k_src] = f"fit failed: {exc}"
            continue
        if not fit.converged:
            dropped[k_src] = "did not converge"
            continue
        fits[k_src] = fit
    return fits, dropped


def debias_source(source_fit: ModelFit, x, y, cfg: TransferConfig):
    """Correct a source fit toward the target on its training rows.

    Fits a penalized logistic model for the correction with the source's
    linear predictor as a per-row offset; the corrected coefficients are
    source + correction. Returns (beta_adapted, delta_fit).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty target training split")
    z = np.hstack([np.ones((x.shape[0], 1)), x])
    if z.shape[1] != source_fit.beta.shape[0]:
        raise ValueError("source fit dimension does not match the target covariates")
    offset = z @ source_fit.beta
    cv = cfg.delta_cv if cfg.delta_cv is not None else cfg.cv
    lam = cross_validate_lambda(x, y, BINARY_LOGIT, cv, kind=cfg.penalty_kind,
                                offset=offset, tol=cfg.tol, max_iter=cfg.max_iter)
    delta_fit = fit_penalized_logistic(
        x, y, PenaltySpec(kind=cfg.penalty_kind, lam=lam), offset,
        tol=cfg.tol, max_iter=cfg.max_iter)
    return source_fit.beta + delta_fit.beta, delta_fit


def fit_target_only(x, y, cfg: TransferConfig) -> ModelFit:
    """Penalized logistic fit on target rows alone.

    A single-class outcome gives a degenerate intercept-only fit with the
    intercept pinned at +-LINPRED_BOUND (probability pinned near 0 or 1).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty target stratum")
    classes = np.unique(y)
    if len(classes) < 2:
        sign = 1.0 if classes[0] == 1.0 else -1.0
        beta = np.zeros(x.shape[1] + 1)
        beta[0] = sign * LINPRED_BOUND
        obj = negative_log_likelihood(beta, x, y) / x.shape[0]
        return ModelFit(beta=beta, family=BINARY_LOGIT,
                        penalty=PenaltySpec(kind=cfg.penalty_kind, lam=0.0),
                        offset_used=False, objective_value=obj, converged=True,
                        iterations=0, degenerate=True,
                        diagnostics={"reason": "single-class outcome"})
    lam = cross_validate_lambda(x, y, BINARY_LOGIT, cfg.cv, kind=cfg.penalty_kind,
                                tol=cfg.tol, max_iter=cfg.max_iter)
    return fit_penalized_logistic(x, y, PenaltySpec(kind=cfg.penalty_kind, lam=lam),
                                  tol=cfg.tol, max_iter=cfg.max_iter)


def _validation_loglik(candidates, z_val, y_val):
    theta = z_val @ candidates
    return y_val @ theta - np.logaddexp(0.0, theta).sum(axis=0)


def aggregate(candidates, x_val, y_val, *, max_iter=1000, tol=1e-10):
    """Simplex weights over candidate coefficient vectors.

    Maximizes the validation log-likelihood sum_i [y_i theta_i - psi(theta_i)]
    with theta = x' (candidates @ eta) by exponentiated-gradient ascent with
    the weights kept in log space, so a coordinate driven small early can
    still recover. The objective is concave, so max_j g_j - g'eta bounds the
    remaining suboptimality; iteration stops once that gap drops below
    tol * (1 + |loglik|). If the best single candidate still beats the ascent
    solution it is returned instead, so the aggregated validation
    log-likelihood is never below any candidate's.

    Returns (eta, beta_agg, info) with per-candidate log-likelihoods and the
    aggregated one in info.
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim != 2 or candidates.shape[1] == 0:
        raise ValueError("candidates must be a (p+1, C) matrix")
    x_val = np.asarray(x_val, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if x_val.shape[0] == 0:
        raise ValueError("empty validation set")
    z = np.hstack([np.ones((x_val.shape[0], 1)), x_val])
    if z.shape[1] != candidates.shape[0]:
        raise ValueError("candidate dimension does not match the validation covariates")
    n_cand = candidates.shape[1]
    per_candidate = _validation_loglik(candidates, z, y_val)
    a = z @ candidates

    def loglik(eta):
        theta = a @ eta
        return float(y_val @ theta - np.logaddexp(0.0, theta).sum())

    if n_cand == 1:
        eta = np.array([1.0])
        beta_agg = candidates @ eta
        return eta, beta_agg, {
            "per_candidate_loglik": per_candidate,
            "aggregated_loglik": float(per_candidate[0]),
            "iterations": 0, "converged": True, "vertex_fallback": False,
        }

    log_w = np.zeros(n_cand)
    eta = np.full(n_cand, 1.0 / n_cand)
    cur = loglik(eta)
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        theta = a @ eta
        grad = a.T @ (y_val - _expit(theta))
        gap = float(grad.max() - grad @ eta)
        if gap <= tol * (1.0 + abs(cur)):
            converged = True
            break
        improved = False
        s = step
        for _ in range(60):
            trial_log_w = log_w + s * grad
            trial_log_w -= trial_log_w.max()
            w = np.exp(trial_log_w)
            nxt = w / w.sum()
            val = loglik(nxt)
            if val > cur:
                improved = True
                break
            s *= 0.5
        if not improved:
            # no step of any size helps: at the numerical optimum
            converged = True
            break
        log_w, eta, cur = trial_log_w, nxt, val
        step = min(s * 2.0, 1e6)
    info = {"iterations": it, "converged": converged, "vertex_fallback": False}
    best = int(np.argmax(per_candidate))
    if per_candidate[best] > cur:
        eta = np.zeros(n_cand)
        eta[best] = 1.0
        cur = float(per_candidate[best])
        info["vertex_fallback"] = True
    beta_agg = candidates @ eta
    info["per_candidate_loglik"] = per_candidate
    info["aggregated_loglik"] = cur
    return eta, beta_agg, info


def _agg_predictor(beta_agg):
    beta_agg = np.asarray(beta_agg, dtype=float)

    def mu(x_matrix):
        x_matrix = np.asarray(x_matrix, dtype=float)
        z = np.hstack([np.ones((x_matrix.shape[0], 1)), x_matrix])
        return _expit(np.clip(z @ beta_agg, -LINPRED_BOUND, LINPRED_BOUND))

    return mu


def _run_half(data, target, cfg, stratum_rows, train_local, val_local):
    train_rows = stratum_rows[train_local]
    val_rows = stratum_rows[val_local]
    x_tr = data.x[train_rows]
    y_tr = data.y[train_rows]
    if x_tr.shape[0] == 0:
        raise ValueError("empty target training split")

    source_fits, dropped = fit_source_models(data, target, cfg)
    delta_fits = {}
    adapted = {}
    for k_src in sorted(source_fits):
        try:
            beta_adapted, dfit = debias_source(source_fits[k_src], x_tr, y_tr, cfg)
        except ValueError as exc:
            dropped[k_src] = f"bias correction failed: {exc}"
            continue
        adapted[k_src] = beta_adapted
        delta_fits[k_src] = dfit
    for k_src in list(source_fits):
        if k_src not in adapted:
            del source_fits[k_src]

    target_fit = fit_target_only(x_tr, y_tr, cfg)
    admitted = sorted(adapted)
    cols = [adapted[k_src] for k_src in admitted] + [target_fit.beta]
    candidates = np.column_stack(cols)
    candidate_groups = admitted + [target.k]

    degenerate = False
    diagnostics = {}
    if len(val_rows) == 0:
        # nothing to validate on: keep the target-only candidate
        eta = np.zeros(len(candidate_groups))
        eta[-1] = 1.0
        beta_agg = candidates @ eta
        per_cand = np.full(len(candidate_groups), np.nan)
        agg_ll = float("nan")
        degenerate = True
        diagnostics["no_validation_rows"] = True
    else:
        x_val = data.x[val_rows]
        y_val = data.y[val_rows]
        if len(candidate_groups) == 1:
            eta = np.array([1.0])
            beta_agg = candidates @ eta
            z_val = np.hstack([np.ones((x_val.shape[0], 1)), x_val])
            per_cand = _validation_loglik(candidates, z_val, y_val)
            agg_ll = float(per_cand[0])
        else:
            eta, beta_agg, info = aggregate(candidates, x_val, y_val)
            per_cand = info["per_candidate_loglik"]
            agg_ll = info["aggregated_loglik"]
            diagnostics["aggregation"] = {k: info[k] for k in
                                          ("iterations", "converged", "vertex_fallback")}

    return TransferResult(
        target=target, candidates=candidates, candidate_groups=candidate_groups,
        eta=eta, beta_agg=beta_agg, validation_loglik=per_cand,
        aggregated_loglik=agg_ll, admitted_sources=admitted,
        dropped_sources=dropped, source_fits=source_fits, delta_fits=delta_fits,
        target_fit=target_fit, train_rows=train_rows, validation_rows=val_rows,
        degenerate=degenerate or target_fit.degenerate, diagnostics=diagnostics)


def transfer_fit(data: ObservationTable, target: StratumKey, cfg: TransferConfig):
    """Run the full transfer pipeline for one target stratum.

    Returns (TransferResult, mu_hat) where mu_hat maps a covariate matrix to
    predicted outcome probabilities under the aggregated model. Deterministic
    given (data, target, cfg); with no admissible sources the result is the
    target-only fit with eta = (1,).
    """
    stratum_rows = np.where(data.stratum_mask(target.k, target.m))[0]
    if len(stratum_rows) == 0:
        raise ValueError(f"target stratum (k={target.k}, m={target.m}) is empty")
    y_stratum = data.y[stratum_rows]
    train_local, val_local = split_target_rows(
        y_stratum, cfg.validation_fraction, cfg.split_seed)
    result = _run_half(data, target, cfg, stratum_rows, train_local, val_local)
    if cfg.swap_splits and len(val_local) > 0 and len(train_local) > 0:
        other = _run_half(data, target, cfg, stratum_rows, val_local, train_local)
        averaged = 0.5 * (result.beta_agg + other.beta_agg)
        result.diagnostics["swap"] = {
            "eta_second_half": other.eta,
            "beta_agg_second_half": other.beta_agg,
        }
        result.beta_agg = averaged
    return result, _agg_predictor(result.beta_agg)
