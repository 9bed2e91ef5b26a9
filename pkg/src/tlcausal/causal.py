"""Doubly robust effect estimation for a target (group, region) stratum.

Estimands for target group k observed in region m2:

  mean potential outcome  E[Y(m1) | R = k, T = m2]
  treated-region effect   E[Y(m1) - Y(m2) | R = k, T = m2]

The estimator averages model predictions over the (k, m2) stratum and adds
a propensity-ratio weighted residual correction from the (k, m1) stratum,
so it is consistent when either the outcome model or the within-group
region propensity model is correct. Standard errors treat the fitted
nuisance functions as fixed.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import ObservationTable
from .glm import ModelFit, PenaltySpec, fit_penalized_multinomial, predict_proba
from .transfer import StratumKey, TransferConfig, transfer_fit

Z_95 = 1.96


@dataclasses.dataclass
class PropensityModel:
    """Within-group region propensity P(T = m | X, R = k).

    Probabilities are clipped to [clip_low, clip_high] and renormalized per
    row; clipping happens before the ratio, so every probability ratio lies
    in [clip_low / clip_high, clip_high / clip_low]. Backed either by a
    fitted multinomial model or by an explicit probability function.
    """

    group: int
    categories: np.ndarray
    clip_low: float
    clip_high: float
    fit: ModelFit | None = None
    prob_fn: object = None

    def __post_init__(self):
        if not (0.0 < self.clip_low < self.clip_high < 1.0):
            raise ValueError("need 0 < clip_low < clip_high < 1")
        self.categories = np.asarray(self.categories)
        if self.fit is None and self.prob_fn is None:
            raise ValueError("need either a fitted model or a probability function")

    @classmethod
    def from_probabilities(cls, prob_fn, categories, group=0, clip=(0.01, 0.99)):
        """Wrap an explicit x -> (n, C) raw probability function."""
        return cls(group=group, categories=np.asarray(categories),
                   clip_low=clip[0], clip_high=clip[1], prob_fn=prob_fn)

    def raw_probabilities(self, x_matrix):
        if self.fit is not None:
            return predict_proba(self.fit, x_matrix)
        return np.asarray(self.prob_fn(x_matrix), dtype=float)

    def probabilities(self, x_matrix):
        """Clipped and renormalized probabilities, columns per categories."""
        raw = self.raw_probabilities(x_matrix)
        if raw.ndim != 2 or raw.shape[1] != len(self.categories):
            raise ValueError("probability matrix does not match the categories")
        clipped = np.clip(raw, self.clip_low, self.clip_high)
        return clipped / clipped.sum(axis=1, keepdims=True)

    def _column(self, m):
        hit = np.where(self.categories == m)[0]
        if len(hit) == 0:
            raise ValueError(f"region {m} absent from the propensity model")
        return int(hit[0])

    def probability(self, x_matrix, m):
        return self.probabilities(x_matrix)[:, self._column(m)]

    def ratio(self, x_matrix, m_num, m_den):
        """P(T = m_num | X) / P(T = m_den | X), computed after clipping."""
        probs = self.probabilities(x_matrix)
        return probs[:, self._column(m_num)] / probs[:, self._column(m_den)]


def estimate_propensity(data: ObservationTable, k: int,
                        penalty: PenaltySpec = PenaltySpec("squared_l2", 1e-3),
                        clip=(0.01, 0.99), *, tol=1e-8, max_iter=5000) -> PropensityModel:
    """Fit the within-group region propensity model for group k.

    Multinomial logit on group k's rows over the regions they appear in;
    requires at least two observed regions. Regions absent for the group are
    recorded in the fit diagnostics.
    """
    mask = data.r == k
    if not mask.any():
        raise ValueError(f"group {k} has no rows")
    t_k = data.t[mask]
    if len(np.unique(t_k)) < 2:
        raise ValueError(f"group {k} appears in fewer than two regions")
    fit = fit_penalized_multinomial(data.x[mask], t_k, penalty,
                                    n_categories=data.n_regions,
                                    tol=tol, max_iter=max_iter)
    return PropensityModel(group=k, categories=fit.categories,
                           clip_low=clip[0], clip_high=clip[1], fit=fit)


@dataclasses.dataclass
class TattEstimate:
    """A point estimate with its normal-theory interval.

    kind is "TATT" or "MPO"; n_target is the (k, m2) stratum size. metadata
    keeps raw (unclamped) values, stratum counts and variance details.
    """

    kind: str
    k: int
    m1: int
    m2: int
    point: float
    se: float
    ci: tuple
    n_target: int
    method: str
    metadata: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class DrComponents:
    """Per-row pieces of the estimator for one (k, m1, m2) triple.

    part2 holds the (k, m2) rows' model predictions (observed outcomes when
    m1 = m2), part1 the weighted residuals from the (k, m1) rows. The
    estimator's first bracket is (part2.sum() + part1.sum()) / n2.
    """

    k: int
    m1: int
    m2: int
    n: int
    n1: int
    n2: int
    y2: np.ndarray
    part2: np.ndarray
    part1: np.ndarray
    ybar: float
    mpo_raw: float
    tatt_raw: float
    same_region: bool
    gformula_only: bool


def dr_components(data: ObservationTable, k, m1, m2, mu_hat, prop) -> DrComponents:
    """Assemble the per-row contributions for one estimand.

    mu_hat maps a covariate matrix to outcome probabilities; prop is the
    group's PropensityModel. Both are ignored when m1 = m2 (the estimator
    reduces to the observed stratum mean). With an empty (k, m1) stratum the
    residual correction vanishes and the result is flagged gformula_only.
    """
    mask2 = data.stratum_mask(k, m2)
    n2 = int(mask2.sum())
    if n2 == 0:
        raise ValueError(f"target stratum (k={k}, m2={m2}) is empty")
    y2 = data.y[mask2]
    same_region = m1 == m2
    if same_region:
        part2 = y2
        part1 = np.zeros(0)
        n1 = n2
        gformula_only = False
    else:
        if mu_hat is None or prop is None:
            raise ValueError("mu_hat and a propensity model are required when m1 != m2")
        mask1 = data.stratum_mask(k, m1)
        n1 = int(mask1.sum())
        part2 = np.asarray(mu_hat(data.x[mask2]), dtype=float)
        if n1 > 0:
            x1 = data.x[mask1]
            w = prop.ratio(x1, m2, m1)
            part1 = w * (data.y[mask1] - np.asarray(mu_hat(x1), dtype=float))
        else:
            part1 = np.zeros(0)
        gformula_only = n1 == 0
    ybar = float(y2.sum() / n2)
    mpo_raw = float((part2.sum() + part1.sum()) / n2)
    tatt_raw = mpo_raw - ybar
    return DrComponents(k=k, m1=m1, m2=m2, n=data.n, n1=n1, n2=n2, y2=y2,
                        part2=part2, part1=part1, ybar=ybar, mpo_raw=mpo_raw,
                        tatt_raw=tatt_raw, same_region=same_region,
                        gformula_only=gformula_only)


def _phi_parts(components: DrComponents, kind: str):
    if kind == "TATT":
        return components.part2 - components.y2, components.part1
    if kind == "MPO":
        return components.part2, components.part1
    raise ValueError(f"unknown estimand kind {kind!r}")


def sandwich_se(components: DrComponents, kind="TATT") -> float:
    """Fixed-nuisance standard error.

    se^2 = n2^{-2} * sum_i (phi_i - phibar)^2 over the rows that carry a
    contribution phi_i (the two strata; one stratum when m1 = m2), phibar
    their mean. Rows of other strata never enter, so dropping them leaves
    the whole estimate unchanged.
    """
    if components.n2 < 2:
        raise ValueError("standard error undefined for a single-row target stratum")
    a, b = _phi_parts(components, kind)
    n_contrib = len(a) + len(b)
    total = float(a.sum() + b.sum())
    ssq = float((a * a).sum() + (b * b).sum())
    phibar = total / n_contrib
    centered = max(ssq - n_contrib * phibar * phibar, 0.0)
    return float(np.sqrt(centered) / components.n2)


def bootstrap_se(components: DrComponents, kind="TATT", n_boot=200, seed=0) -> float:
    """Within-stratum nonparametric bootstrap with nuisances held fixed.

    Resamples the (k, m2) rows and the (k, m1) rows independently with
    replacement, keeping both stratum sizes; the returned value is the
    sample standard deviation of the resampled estimates.
    """
    if components.n2 < 2:
        raise ValueError("standard error undefined for a single-row target stratum")
    a, b = _phi_parts(components, kind)
    rng = np.random.default_rng(seed)
    idx2 = rng.integers(0, components.n2, size=(n_boot, components.n2))
    totals = a[idx2].sum(axis=1)
    if len(b) > 0:
        idx1 = rng.integers(0, len(b), size=(n_boot, len(b)))
        totals = totals + b[idx1].sum(axis=1)
    draws = totals / components.n2
    return float(np.std(draws, ddof=1))


def estimate_se(components: DrComponents, kind="TATT", method="sandwich",
                n_boot=200, seed=0):
    """(se, ci) for one estimand; ci is point +- 1.96 * se.

    MPO intervals are clamped into [0, 1] along with the point.
    """
    if method == "sandwich":
        se = sandwich_se(components, kind)
    elif method == "bootstrap":
        se = bootstrap_se(components, kind, n_boot=n_boot, seed=seed)
    else:
        raise ValueError(f"unknown variance method {method!r}")
    point = components.tatt_raw if kind == "TATT" else components.mpo_raw
    lo, hi = point - Z_95 * se, point + Z_95 * se
    if kind == "MPO":
        lo, hi = min(max(lo, 0.0), 1.0), min(max(hi, 0.0), 1.0)
    return se, (lo, hi)


def _estimate(data, k, m1, m2, mu_hat, prop, kind, method, variance,
              n_boot, boot_seed):
    comp = dr_components(data, k, m1, m2, mu_hat, prop)
    se, ci = estimate_se(comp, kind, variance, n_boot=n_boot, seed=boot_seed)
    raw = comp.tatt_raw if kind == "TATT" else comp.mpo_raw
    point = raw if kind == "TATT" else min(max(raw, 0.0), 1.0)
    metadata = {
        "raw_point": raw, "ybar": comp.ybar, "n1": comp.n1, "n2": comp.n2,
        "same_region": comp.same_region, "gformula_only": comp.gformula_only,
        "variance": variance,
    }
    if variance == "sandwich":
        metadata["se_sandwich"] = se
    else:
        metadata["se_bootstrap"] = se
        metadata["se_sandwich"] = sandwich_se(comp, kind)
    return TattEstimate(kind=kind, k=k, m1=m1, m2=m2, point=point, se=se,
                        ci=ci, n_target=comp.n2, method=method, metadata=metadata)


def estimate_tatt(data: ObservationTable, k, m1, m2, mu_hat, prop, *,
                  method="transfer", variance="sandwich", n_boot=200,
                  bootstrap_seed=0) -> TattEstimate:
    """Doubly robust treated-region effect E[Y(m1) - Y(m2) | R=k, T=m2].

    Exactly zero (with zero per-row contributions) when m1 = m2.
    """
    return _estimate(data, k, m1, m2, mu_hat, prop, "TATT", method,
                     variance, n_boot, bootstrap_seed)


def estimate_mpo(data: ObservationTable, k, m1, m2, mu_hat, prop, *,
                 method="transfer", variance="sandwich", n_boot=200,
                 bootstrap_seed=0) -> TattEstimate:
    """Mean potential outcome E[Y(m1) | R=k, T=m2], clamped into [0, 1].

    The unclamped value stays in metadata["raw_point"]; for m1 = m2 this is
    the observed stratum mean.
    """
    return _estimate(data, k, m1, m2, mu_hat, prop, "MPO", method,
                     variance, n_boot, bootstrap_seed)


@dataclasses.dataclass
class SensitivityResult:
    """Leave-one-center-out series for one target population."""

    target_group: int
    target_region: int
    reference: list
    excluded: dict
    diagnostics: dict = dataclasses.field(default_factory=dict)


def _estimate_series(table, k, target_region, transfer_cfg, prop_penalty, clip,
                     variance, method_label):
    prop = estimate_propensity(table, k, prop_penalty, clip)
    estimates = []
    problems = {}
    for m1 in range(1, table.n_regions + 1):
        if m1 == target_region:
            estimates.append(estimate_mpo(table, k, m1, target_region, None, None,
                                          method=method_label, variance=variance))
            continue
        try:
            result, mu = transfer_fit(table, StratumKey(k, m1), transfer_cfg)
            estimates.append(estimate_mpo(table, k, m1, target_region, mu, prop,
                                          method=method_label, variance=variance))
            estimates.append(estimate_tatt(table, k, m1, target_region, mu, prop,
                                           method=method_label, variance=variance))
        except ValueError as exc:
            problems[m1] = str(exc)
    return estimates, problems


def leave_one_out_sensitivity(data: ObservationTable, k, target_region, *,
                              transfer_cfg: TransferConfig,
                              prop_penalty: PenaltySpec = PenaltySpec("squared_l2", 1e-3),
                              clip=(0.01, 0.99), variance="sandwich",
                              centers=None, method_label="transfer") -> SensitivityResult:
    """Re-run the full pipeline once per center in the target region.

    Each run drops every row of one center (centers are identified among
    rows with t = target_region) and recomputes propensity, transfer fits
    and all counterfactual-region estimates for group k observed in
    target_region; the reference entry uses all centers. Needs center ids
    and at least two centers in the target region.
    """
    if data.center_id is None:
        raise ValueError("sensitivity analysis needs center identifiers")
    in_region = data.t == target_region
    region_centers = sorted({str(c) for c in data.center_id[in_region]})
    if centers is not None:
        unknown = [c for c in centers if str(c) not in region_centers]
        if unknown:
            raise ValueError(f"unknown centers in the target region: {unknown}")
        region_centers = [str(c) for c in centers]
    if len(region_centers) < 2:
        raise ValueError("need at least two centers in the target region")

    reference, ref_problems = _estimate_series(
        data, k, target_region, transfer_cfg, prop_penalty, clip, variance,
        method_label)
    excluded = {}
    diagnostics = {}
    if ref_problems:
        diagnostics["reference"] = ref_problems
    ids = data.center_id.astype(str)
    for center in region_centers:
        sub = data.subset(ids != center)
        series, problems = _estimate_series(
            sub, k, target_region, transfer_cfg, prop_penalty, clip, variance,
            method_label)
        excluded[center] = series
        if problems:
            diagnostics[center] = problems
    return SensitivityResult(target_group=k, target_region=target_region,
                             reference=reference, excluded=excluded,
                             diagnostics=diagnostics)
