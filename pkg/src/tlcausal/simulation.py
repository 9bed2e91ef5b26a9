"""Monte Carlo study of the transfer estimator on synthetic registries.

Data generating process: K groups with fixed proportions; covariates are
multivariate normal with an AR(1)-type covariance (entry 2^{-|i-j|}),
truncated entrywise; region membership follows a within-group multinomial
logit in the covariates; binary outcomes follow stratum-specific logistic
models whose coefficients share a common base vector plus a sparse
stratum-specific shift. True effects for the target group come from a
self-normalized Monte Carlo oracle over the same covariate law.

Replicate r's dataset is a pure function of (coefficient_seed,
replicate_seed_base, r), so results do not depend on scheduling or worker
count.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import functools

import numpy as np
from scipy.special import expit as _expit

from .causal import estimate_propensity, estimate_tatt
from .data import ObservationTable
from .glm import PenaltySpec, predict_proba
from .transfer import StratumKey, TransferConfig, fit_target_only, transfer_fit


@dataclasses.dataclass(frozen=True)
class DgpConfig:
    """Synthetic-registry settings; defaults give the benchmark design.

    group_means are the constants c_k with mean vector c_k * 1 (an assumed
    parameterization of the between-group covariate shift). Outcome
    coefficients are base + delta with delta holding s nonzero entries of
    magnitude drawn from delta_magnitudes and random sign.
    """

    n_groups: int = 4
    n_regions: int = 5
    n_total: int = 10_000
    group_proportions: tuple = (0.05, 0.15, 0.20, 0.60)
    p: int = 20
    s: int = 5
    delta_magnitudes: tuple = (0.1, 0.2)
    alpha_low: float = -0.2
    alpha_high: float = 0.2
    beta_start: float = 0.6
    beta_end: float = -0.4
    group_means: tuple | None = (0.0, 0.1, 0.2, 0.3)
    truncation: float | None = 2.0
    coefficient_seed: int = 0
    replicate_seed_base: int = 1_000_000
    redraw_coefficients: bool = False

    def __post_init__(self):
        if self.n_groups < 1 or self.n_regions < 2:
            raise ValueError("need at least one group and two regions")
        if len(self.group_proportions) != self.n_groups:
            raise ValueError("group_proportions length must match n_groups")
        if abs(sum(self.group_proportions) - 1.0) > 1e-8:
            raise ValueError("group_proportions must sum to 1")
        if min(self.group_proportions) <= 0.0:
            raise ValueError("group_proportions must be positive")
        if not (0 <= self.s <= self.p):
            raise ValueError("s must lie in [0, p]")
        if self.truncation is not None and self.truncation <= 0.0:
            raise ValueError("truncation bound must be positive")
        if self.group_means is not None and len(self.group_means) != self.n_groups:
            raise ValueError("group_means length must match n_groups")

    @property
    def beta_base(self):
        return np.linspace(self.beta_start, self.beta_end, self.p)

    def mean_vector(self, k):
        c = 0.0 if self.group_means is None else self.group_means[k - 1]
        return np.full(self.p, float(c))

    def group_sizes(self):
        """Integer stratum sizes by largest remainder; sums to n_total."""
        raw = np.array(self.group_proportions) * self.n_total
        base = np.floor(raw).astype(int)
        short = self.n_total - base.sum()
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
        return base


@dataclasses.dataclass
class DgpCoefficients:
    """Region-assignment (alpha) and outcome (beta) coefficients.

    alpha is (K, M, p) with the first region's row identically zero; beta is
    (K, M, p) = base + delta and delta is kept for inspection.
    """

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray


def draw_sparse_shift(rng, p, s, magnitudes):
    """Sparse shift: s positions without replacement, random magnitude/sign."""
    delta = np.zeros(p)
    if s == 0:
        return delta
    pos = rng.choice(p, size=s, replace=False)
    mag = rng.choice(np.asarray(magnitudes, dtype=float), size=s)
    sign = np.where(rng.random(s) < 0.5, 1.0, -1.0)
    delta[pos] = sign * mag
    return delta


def draw_coefficients(cfg: DgpConfig, rng) -> DgpCoefficients:
    k_, m_, p = cfg.n_groups, cfg.n_regions, cfg.p
    alpha = np.zeros((k_, m_, p))
    for k in range(k_):
        for m in range(1, m_):
            alpha[k, m] = rng.uniform(cfg.alpha_low, cfg.alpha_high, size=p)
    delta = np.zeros((k_, m_, p))
    for k in range(k_):
        for m in range(m_):
            delta[k, m] = draw_sparse_shift(rng, p, cfg.s, cfg.delta_magnitudes)
    beta = cfg.beta_base[None, None, :] + delta
    return DgpCoefficients(alpha=alpha, beta=beta, delta=delta)


@functools.lru_cache(maxsize=8)
def _ar_cholesky(p):
    idx = np.arange(p)
    sigma = 2.0 ** (-np.abs(idx[:, None] - idx[None, :]))
    return np.linalg.cholesky(sigma)


def draw_covariates(n, mu, p, bound, rng):
    """n draws from N(mu, Sigma) with Sigma_ij = 2^{-|i-j|}, clamped to +-bound.

    bound None skips the truncation.
    """
    chol = _ar_cholesky(p)
    x = rng.standard_normal((n, p)) @ chol.T + np.asarray(mu)
    if bound is not None:
        np.clip(x, -bound, bound, out=x)
    return x


def region_probabilities(x, alpha_k):
    """Per-row region probabilities for one group's (M, p) coefficients."""
    scores = x @ alpha_k.T
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def assign_regions(x, alpha_k, rng):
    """Draw region labels 1..M from the within-group multinomial logit."""
    probs = region_probabilities(x, alpha_k)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(x.shape[0])
    labels = (u[:, None] > cum).sum(axis=1) + 1
    return np.minimum(labels, alpha_k.shape[0])


def draw_outcomes(x, beta, rng):
    """Bernoulli outcomes with success probability expit(x' beta) per row."""
    pr = _expit(x @ beta if beta.ndim == 1 else np.sum(x * beta, axis=1))
    return (rng.random(x.shape[0]) < pr).astype(float)


def generate_dataset(cfg: DgpConfig, coeffs: DgpCoefficients, rng) -> ObservationTable:
    """One synthetic registry: groups in blocks, per-row regions and outcomes."""
    sizes = cfg.group_sizes()
    xs, ts, rs, ys = [], [], [], []
    for k in range(1, cfg.n_groups + 1):
        n_k = int(sizes[k - 1])
        x = draw_covariates(n_k, cfg.mean_vector(k), cfg.p, cfg.truncation, rng)
        t = assign_regions(x, coeffs.alpha[k - 1], rng)
        y = draw_outcomes(x, coeffs.beta[k - 1, t - 1], rng)
        xs.append(x)
        ts.append(t)
        rs.append(np.full(n_k, k))
        ys.append(y)
    return ObservationTable(
        y=np.concatenate(ys), t=np.concatenate(ts), r=np.concatenate(rs),
        x=np.vstack(xs),
        feature_names=[f"x{j + 1}" for j in range(cfg.p)],
        region_labels=[str(m) for m in range(1, cfg.n_regions + 1)],
        group_labels=[str(k) for k in range(1, cfg.n_groups + 1)])


@dataclasses.dataclass
class TrueEffects:
    """Oracle effects for one target group: tau[m1-1, m2-1] with MC se."""

    k: int
    tau: np.ndarray
    mc_se: np.ndarray
    oracle_n: int
    seed: int

    def get(self, m1, m2):
        return float(self.tau[m1 - 1, m2 - 1]), float(self.mc_se[m1 - 1, m2 - 1])


def _oracle_pass(cfg, coeffs, pairs, k, oracle_n, seed, chunk):
    # self-normalized weighted means: weight P(T=m2|X,R=k), integrand
    # expit(X b_{k,m1}) - expit(X b_{k,m2}); five running sums per pair
    acc = {pair: np.zeros(5) for pair in pairs}
    rng = np.random.default_rng(seed)
    mu = cfg.mean_vector(k)
    alpha_k = coeffs.alpha[k - 1]
    beta_k = coeffs.beta[k - 1]
    done = 0
    while done < oracle_n:
        c = min(chunk, oracle_n - done)
        x = draw_covariates(c, mu, cfg.p, cfg.truncation, rng)
        probs = region_probabilities(x, alpha_k)
        q = _expit(x @ beta_k.T)
        for m1, m2 in pairs:
            w = probs[:, m2 - 1]
            g = q[:, m1 - 1] - q[:, m2 - 1]
            w2 = w * w
            a = acc[(m1, m2)]
            a[0] += w.sum()
            a[1] += w @ g
            a[2] += w2.sum()
            a[3] += w2 @ g
            a[4] += w2 @ (g * g)
        done += c
    out = {}
    for pair, (sw, swg, sw2, sw2g, sw2g2) in acc.items():
        est = swg / sw
        var = (sw2g2 - 2.0 * est * sw2g + est * est * sw2) / (sw * sw)
        out[pair] = (float(est), float(np.sqrt(max(var, 0.0))))
    return out


def compute_true_tatt(cfg, coeffs, m1, m2, *, k=1, oracle_n=10_000_000,
                      seed=0, chunk=1_000_000):
    """Oracle E[Y(m1) - Y(m2) | R=k, T=m2] with its MC standard error."""
    if m1 == m2:
        return 0.0, 0.0
    got = _oracle_pass(cfg, coeffs, [(m1, m2)], k, oracle_n, seed, chunk)
    return got[(m1, m2)]


def compute_true_effects(cfg, coeffs, *, k=1, oracle_n=10_000_000, seed=0,
                         chunk=1_000_000) -> TrueEffects:
    """Oracle effects for every ordered region pair, sharing one draw stream."""
    m_ = cfg.n_regions
    pairs = [(m1, m2) for m1 in range(1, m_ + 1) for m2 in range(1, m_ + 1)
             if m1 != m2]
    got = _oracle_pass(cfg, coeffs, pairs, k, oracle_n, seed, chunk)
    tau = np.zeros((m_, m_))
    mc = np.zeros((m_, m_))
    for (m1, m2), (est, se) in got.items():
        tau[m1 - 1, m2 - 1] = est
        mc[m1 - 1, m2 - 1] = se
    return TrueEffects(k=k, tau=tau, mc_se=mc, oracle_n=oracle_n, seed=seed)


@dataclasses.dataclass(frozen=True)
class AnalysisConfig:
    """Estimator settings applied to every replicate."""

    target_group: int = 1
    transfer: TransferConfig = TransferConfig()
    prop_penalty: PenaltySpec = PenaltySpec("squared_l2", 1e-3)
    clip: tuple = (0.01, 0.99)
    variance: str = "sandwich"
    n_boot: int = 200
    bootstrap_seed: int = 0
    methods: tuple = ("transfer", "target-only")
    max_failure_fraction: float = 0.05


@dataclasses.dataclass
class EstimateRecord:
    """One per-replicate estimate row; flagged rows carry nan values."""

    replicate: int
    k: int
    m1: int
    m2: int
    method: str
    point: float
    se: float
    lo: float
    hi: float
    flagged: bool = False
    reason: str = ""


def _per_stratum_cfg(transfer_cfg: TransferConfig, r, m1):
    # one deterministic seed stream per (replicate, region)
    bump = 100_003 * r + m1
    cv = dataclasses.replace(transfer_cfg.cv,
                             fold_seed=transfer_cfg.cv.fold_seed + bump)
    delta_cv = transfer_cfg.delta_cv
    if delta_cv is not None:
        delta_cv = dataclasses.replace(delta_cv, fold_seed=delta_cv.fold_seed + bump)
    return dataclasses.replace(transfer_cfg, cv=cv, delta_cv=delta_cv,
                               split_seed=transfer_cfg.split_seed + bump)


def _flag_all(records, r, k, m_, methods, reason):
    for m1 in range(1, m_ + 1):
        for m2 in range(1, m_ + 1):
            if m1 == m2:
                continue
            for method in methods:
                records.append(EstimateRecord(
                    replicate=r, k=k, m1=m1, m2=m2, method=method,
                    point=float("nan"), se=float("nan"), lo=float("nan"),
                    hi=float("nan"), flagged=True, reason=reason))


def run_one_replicate(cfg: DgpConfig, coeffs, analysis: AnalysisConfig, r):
    """All ordered-pair estimates for replicate r; never raises on fit trouble."""
    if cfg.redraw_coefficients or coeffs is None:
        coeffs = draw_coefficients(
            cfg, np.random.default_rng(np.random.SeedSequence((cfg.coefficient_seed, r))))
    rng = np.random.default_rng(cfg.replicate_seed_base + r)
    table = generate_dataset(cfg, coeffs, rng)
    k = analysis.target_group
    m_ = cfg.n_regions
    records = []
    try:
        prop = estimate_propensity(table, k, analysis.prop_penalty, analysis.clip)
    except ValueError as exc:
        _flag_all(records, r, k, m_, analysis.methods, f"propensity: {exc}")
        return records

    mus = {}
    for m1 in range(1, m_ + 1):
        tcfg = _per_stratum_cfg(analysis.transfer, r, m1)
        if "transfer" in analysis.methods:
            try:
                _, mu = transfer_fit(table, StratumKey(k, m1), tcfg)
                mus[(m1, "transfer")] = (mu, "")
            except ValueError as exc:
                mus[(m1, "transfer")] = (None, f"transfer fit: {exc}")
        if "target-only" in analysis.methods:
            mask = table.stratum_mask(k, m1)
            try:
                fit = fit_target_only(table.x[mask], table.y[mask], tcfg)
                mus[(m1, "target-only")] = (
                    (lambda f: lambda xm: predict_proba(f, xm))(fit), "")
            except ValueError as exc:
                mus[(m1, "target-only")] = (None, f"target-only fit: {exc}")

    for m1 in range(1, m_ + 1):
        for m2 in range(1, m_ + 1):
            if m1 == m2:
                continue
            for method in analysis.methods:
                mu, reason = mus[(m1, method)]
                if mu is None:
                    records.append(EstimateRecord(
                        replicate=r, k=k, m1=m1, m2=m2, method=method,
                        point=float("nan"), se=float("nan"), lo=float("nan"),
                        hi=float("nan"), flagged=True, reason=reason))
                    continue
                try:
                    est = estimate_tatt(table, k, m1, m2, mu, prop,
                                        method=method, variance=analysis.variance,
                                        n_boot=analysis.n_boot,
                                        bootstrap_seed=analysis.bootstrap_seed)
                    records.append(EstimateRecord(
                        replicate=r, k=k, m1=m1, m2=m2, method=method,
                        point=est.point, se=est.se, lo=est.ci[0], hi=est.ci[1]))
                except ValueError as exc:
                    records.append(EstimateRecord(
                        replicate=r, k=k, m1=m1, m2=m2, method=method,
                        point=float("nan"), se=float("nan"), lo=float("nan"),
                        hi=float("nan"), flagged=True, reason=str(exc)))
    return records


def _replicate_worker(args):
    cfg, coeffs, analysis, r = args
    return r, run_one_replicate(cfg, coeffs, analysis, r)


def run_replicates(cfg: DgpConfig, n_replicates, analysis: AnalysisConfig, *,
                   threads=1, coefficients=None, progress=None):
    """Estimates for replicates 0..n_replicates-1, in replicate order.

    Coefficients are drawn once from coefficient_seed unless
    cfg.redraw_coefficients is set (then each replicate redraws its own).
    Results are identical for any thread count; aborts if more than
    analysis.max_failure_fraction of the estimate rows are flagged.
    """
    if n_replicates < 1:
        raise ValueError("need at least one replicate")
    coeffs = coefficients
    if coeffs is None and not cfg.redraw_coefficients:
        coeffs = draw_coefficients(cfg, np.random.default_rng(cfg.coefficient_seed))
    jobs = [(cfg, coeffs, analysis, r) for r in range(n_replicates)]
    by_rep = {}
    if threads <= 1:
        for job in jobs:
            r, recs = _replicate_worker(job)
            by_rep[r] = recs
            if progress is not None:
                progress(r)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            for r, recs in pool.map(_replicate_worker, jobs):
                by_rep[r] = recs
                if progress is not None:
                    progress(r)
    records = []
    for r in range(n_replicates):
        records.extend(by_rep[r])
    flagged = sum(1 for rec in records if rec.flagged)
    if records and flagged / len(records) > analysis.max_failure_fraction:
        reasons = {}
        for rec in records:
            if rec.flagged:
                reasons[rec.reason] = reasons.get(rec.reason, 0) + 1
        raise RuntimeError(
            f"{flagged}/{len(records)} estimate rows flagged "
            f"(limit {analysis.max_failure_fraction:.0%}): {reasons}")
    return records


@dataclasses.dataclass
class MetricRow:
    m1: int
    m2: int
    method: str
    bias: float
    bias_x100: float
    rmse: float
    coverage: float
    n_used: int
    n_flagged: int


@dataclasses.dataclass
class MetricsTable:
    """Bias / RMSE / coverage per ordered pair and method.

    bias is on the raw outcome scale; bias_x100 is the reporting convention
    (100 x bias). Coverage counts replicates whose interval contains the
    oracle value.
    """

    rows: list
    n_replicates: int
    k: int

    def lookup(self, m1, m2, method):
        for row in self.rows:
            if (row.m1, row.m2, row.method) == (m1, m2, method):
                return row
        raise KeyError((m1, m2, method))


def compute_metrics(records, truth: TrueEffects) -> MetricsTable:
    """Aggregate per-replicate estimates against the oracle."""
    keys = sorted({(rec.m1, rec.m2, rec.method) for rec in records},
                  key=lambda t: (t[0], t[1], t[2]))
    reps = {rec.replicate for rec in records}
    rows = []
    for m1, m2, method in keys:
        cell = [rec for rec in records
                if (rec.m1, rec.m2, rec.method) == (m1, m2, method)]
        good = [rec for rec in cell if not rec.flagged]
        n_flagged = len(cell) - len(good)
        tau, _ = truth.get(m1, m2)
        if good:
            points = np.array([rec.point for rec in good])
            bias = float(points.mean() - tau)
            rmse = float(np.sqrt(np.mean((points - tau) ** 2)))
            cover = float(np.mean([(rec.lo <= tau <= rec.hi) for rec in good]))
        else:
            bias = rmse = cover = float("nan")
        rows.append(MetricRow(m1=m1, m2=m2, method=method, bias=bias,
                              bias_x100=100.0 * bias, rmse=rmse, coverage=cover,
                              n_used=len(good), n_flagged=n_flagged))
    return MetricsTable(rows=rows, n_replicates=len(reps), k=truth.k)
