"""Study configuration, CSV input, and report emission.

A study is described by one JSON config file with a mode ("simulate",
"estimate" or "sensitivity"), a master seed, and per-mode sections; every
derived seed comes from the master seed by fixed offsets, so reruns of the
same config reproduce every output file byte for byte. Output files are
written atomically (temp file + rename) and a manifest.json records the
resolved config, its hash, seeds, package versions, timings and output
checksums.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np
import scipy

from . import __version__
from .causal import (
    PropensityModel,
    SensitivityResult,
    TattEstimate,
    estimate_mpo,
    estimate_propensity,
    estimate_tatt,
    leave_one_out_sensitivity,
)
from .data import ObservationTable
from .glm import CvConfig, PenaltySpec, predict_proba
from .simulation import (
    AnalysisConfig,
    DgpConfig,
    EstimateRecord,
    MetricsTable,
    TrueEffects,
    compute_metrics,
    compute_true_effects,
    draw_coefficients,
    generate_dataset,
    run_replicates,
)
from .transfer import StratumKey, TransferConfig, fit_target_only, transfer_fit

MODES = ("simulate", "estimate", "sensitivity")

# derived-seed offsets from the master seed
SEED_OFFSETS = {
    "coefficient_seed": 0,
    "fold_seed": 11,
    "split_seed": 13,
    "oracle_seed": 17,
    "bootstrap_seed": 19,
    "replicate_seed_base": 1_000_000,
}


@dataclasses.dataclass(frozen=True)
class ColumnMapping:
    """Which CSV columns hold what.

    covariates None means every unmapped header column is a covariate, in
    header order. Non-numeric covariate columns are one-hot expanded with
    the lexically first level as the reference.
    """

    outcome: str
    region: str
    group: str
    center: str | None = None
    covariates: tuple | None = None


def _check_keys(section, allowed, where):
    extra = set(section) - set(allowed)
    if extra:
        raise ValueError(f"unknown keys in {where}: {sorted(extra)}")


@dataclasses.dataclass
class StudyConfig:
    """Fully resolved study settings plus the resolved-config dict."""

    mode: str
    seed: int
    output_dir: str
    threads: int
    dgp: DgpConfig | None
    replicates: int
    oracle_draws: int
    analysis: AnalysisConfig
    input_path: str | None
    columns: ColumnMapping | None
    groups: object
    sensitivity_group: object
    sensitivity_region: object
    resolved: dict

    def seeds(self):
        return {name: self.seed + off for name, off in SEED_OFFSETS.items()}


def _build_transfer(analysis_section, seed):
    grid = analysis_section.get("lambda_grid")
    cv = CvConfig(n_folds=int(analysis_section.get("n_folds", 5)),
                  lambda_grid=None if grid is None else tuple(grid),
                  fold_seed=seed + SEED_OFFSETS["fold_seed"])
    return TransferConfig(
        validation_fraction=float(analysis_section.get("validation_fraction", 0.3)),
        split_seed=seed + SEED_OFFSETS["split_seed"],
        cv=cv,
        min_source_rows=int(analysis_section.get("min_source_rows", 20)),
        penalty_kind=analysis_section.get("penalty_kind", "l2"))


def config_from_dict(raw, *, overrides=None, base_dir="."):
    """Validate a config dict and resolve it into a StudyConfig.

    overrides may carry CLI-level seed / threads / output_dir replacements.
    """
    overrides = overrides or {}
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    _check_keys(raw, ("mode", "seed", "output_dir", "threads", "analysis") + MODES,
                "config")
    mode = raw.get("mode")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    for other in MODES:
        if other != mode and other in raw:
            raise ValueError(f"config has a {other!r} section but mode is {mode!r}")
    if mode not in raw:
        raise ValueError(f"config is missing its {mode!r} section")
    seed = overrides.get("seed", raw.get("seed"))
    if seed is None:
        raise ValueError("config needs an integer seed (no wall-clock defaults)")
    seed = int(seed)
    output_dir = overrides.get("output_dir", raw.get("output_dir"))
    if not output_dir:
        raise ValueError("no output directory (set output_dir or pass --output-dir)")
    if not os.path.isabs(output_dir):
        output_dir = os.path.join(base_dir, output_dir)
    threads = int(overrides.get("threads", raw.get("threads", 1)))
    if threads < 1:
        raise ValueError("threads must be >= 1")

    analysis_section = raw.get("analysis", {})
    _check_keys(analysis_section,
                ("validation_fraction", "min_source_rows", "n_folds", "lambda_grid",
                 "penalty_kind", "clip", "variance", "bootstrap_replicates",
                 "propensity_penalty", "methods"), "analysis")
    transfer = _build_transfer(analysis_section, seed)
    clip = tuple(analysis_section.get("clip", (0.01, 0.99)))
    pp = analysis_section.get("propensity_penalty", {})
    _check_keys(pp, ("kind", "lam"), "analysis.propensity_penalty")
    prop_penalty = PenaltySpec(kind=pp.get("kind", "squared_l2"),
                               lam=float(pp.get("lam", 1e-3)))
    methods = tuple(analysis_section.get("methods", ("transfer", "target-only")))
    for m in methods:
        if m not in ("transfer", "target-only"):
            raise ValueError(f"unknown method {m!r}")

    dgp = None
    replicates = 0
    oracle_draws = 0
    input_path = None
    columns = None
    groups = "all"
    sens_group = None
    sens_region = None
    target_group = 1

    if mode == "simulate":
        sec = raw["simulate"]
        _check_keys(sec, ("replicates", "oracle_draws", "target_group", "dgp"),
                    "simulate")
        replicates = int(sec.get("replicates", 1000))
        oracle_draws = int(sec.get("oracle_draws", 10_000_000))
        target_group = int(sec.get("target_group", 1))
        dgp_sec = dict(sec.get("dgp", {}))
        allowed = {f.name for f in dataclasses.fields(DgpConfig)}
        _check_keys(dgp_sec, allowed, "simulate.dgp")
        for key in ("group_proportions", "delta_magnitudes", "group_means"):
            if key in dgp_sec and dgp_sec[key] is not None:
                dgp_sec[key] = tuple(dgp_sec[key])
        dgp_sec.setdefault("coefficient_seed", seed + SEED_OFFSETS["coefficient_seed"])
        dgp_sec.setdefault("replicate_seed_base", seed + SEED_OFFSETS["replicate_seed_base"])
        dgp = DgpConfig(**dgp_sec)
    else:
        sec = raw[mode]
        common = ("input", "columns")
        if mode == "estimate":
            _check_keys(sec, common + ("groups",), "estimate")
            groups = sec.get("groups", "all")
        else:
            _check_keys(sec, common + ("group", "target_region"), "sensitivity")
            if "group" not in sec or "target_region" not in sec:
                raise ValueError("sensitivity needs 'group' and 'target_region'")
            sens_group = sec["group"]
            sens_region = sec["target_region"]
        if "input" not in sec or "columns" not in sec:
            raise ValueError(f"{mode} needs 'input' and 'columns'")
        input_path = sec["input"]
        if not os.path.isabs(input_path):
            input_path = os.path.join(base_dir, input_path)
        colsec = sec["columns"]
        _check_keys(colsec, ("outcome", "region", "group", "center", "covariates"),
                    f"{mode}.columns")
        for need in ("outcome", "region", "group"):
            if need not in colsec:
                raise ValueError(f"{mode}.columns needs {need!r}")
        cov = colsec.get("covariates")
        columns = ColumnMapping(outcome=colsec["outcome"], region=colsec["region"],
                                group=colsec["group"], center=colsec.get("center"),
                                covariates=None if cov is None else tuple(cov))

    analysis = AnalysisConfig(
        target_group=target_group,
        transfer=transfer,
        prop_penalty=prop_penalty,
        clip=clip,
        variance=analysis_section.get("variance", "sandwich"),
        n_boot=int(analysis_section.get("bootstrap_replicates", 200)),
        bootstrap_seed=seed + SEED_OFFSETS["bootstrap_seed"],
        methods=methods)
    if analysis.variance not in ("sandwich", "bootstrap"):
        raise ValueError(f"unknown variance method {analysis.variance!r}")

    resolved = {
        "mode": mode, "seed": seed, "output_dir": output_dir, "threads": threads,
        "analysis": {
            "validation_fraction": transfer.validation_fraction,
            "min_source_rows": transfer.min_source_rows,
            "n_folds": transfer.cv.n_folds,
            "lambda_grid": None if transfer.cv.lambda_grid is None
                           else list(transfer.cv.lambda_grid),
            "penalty_kind": transfer.penalty_kind,
            "clip": list(clip),
            "variance": analysis.variance,
            "bootstrap_replicates": analysis.n_boot,
            "propensity_penalty": {"kind": prop_penalty.kind, "lam": prop_penalty.lam},
            "methods": list(methods),
        },
    }
    if mode == "simulate":
        dgp_dict = dataclasses.asdict(dgp)
        for key in ("group_proportions", "delta_magnitudes", "group_means"):
            if dgp_dict[key] is not None:
                dgp_dict[key] = list(dgp_dict[key])
        resolved["simulate"] = {"replicates": replicates, "oracle_draws": oracle_draws,
                                "target_group": target_group, "dgp": dgp_dict}
    elif mode == "estimate":
        resolved["estimate"] = {"input": input_path,
                                "columns": dataclasses.asdict(columns),
                                "groups": groups}
    else:
        resolved["sensitivity"] = {"input": input_path,
                                   "columns": dataclasses.asdict(columns),
                                   "group": sens_group,
                                   "target_region": sens_region}

    return StudyConfig(mode=mode, seed=seed, output_dir=output_dir, threads=threads,
                       dgp=dgp, replicates=replicates, oracle_draws=oracle_draws,
                       analysis=analysis, input_path=input_path, columns=columns,
                       groups=groups, sensitivity_group=sens_group,
                       sensitivity_region=sens_region, resolved=resolved)


def load_config(path, *, overrides=None):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw, overrides=overrides,
                            base_dir=os.path.dirname(os.path.abspath(path)))


def _sorted_labels(values):
    uniq = sorted(set(values))
    try:
        uniq.sort(key=lambda v: int(v))
    except ValueError:
        pass
    return uniq


def load_table(path, columns: ColumnMapping) -> ObservationTable:
    """Read a UTF-8 CSV with a header row into an ObservationTable.

    Region and group labels may be arbitrary strings; they are mapped to
    1..M / 1..K in sorted order (numeric when every label parses as an
    integer) and kept for reporting. Rows with missing or malformed fields
    are reported with their line numbers (header = line 1).
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")

    mapped = [columns.outcome, columns.region, columns.group]
    if columns.center is not None:
        mapped.append(columns.center)
    missing_cols = [c for c in mapped if c not in header]
    if columns.covariates is not None:
        missing_cols += [c for c in columns.covariates if c not in header]
    if missing_cols:
        raise ValueError(f"{path}: columns not in header: {missing_cols}")
    cov_names = list(columns.covariates) if columns.covariates is not None else \
        [c for c in header if c not in mapped]
    if not cov_names:
        raise ValueError(f"{path}: no covariate columns")

    col_idx = {c: header.index(c) for c in header}
    bad_lines = {}

    def complain(line, why):
        bad_lines.setdefault(why, []).append(line)

    outcome = []
    region_raw = []
    group_raw = []
    center_raw = []
    cov_raw = {c: [] for c in cov_names}
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            complain(line, "wrong number of fields")
            continue
        v = row[col_idx[columns.outcome]].strip()
        if v not in ("0", "1"):
            complain(line, f"non-binary outcome in column {columns.outcome!r}")
            continue
        out_v = float(v)
        reg_v = row[col_idx[columns.region]].strip()
        grp_v = row[col_idx[columns.group]].strip()
        if not reg_v or not grp_v:
            complain(line, "missing region or group")
            continue
        covs = {}
        ok = True
        for c in cov_names:
            cell = row[col_idx[c]].strip()
            if cell == "":
                complain(line, f"missing value in column {c!r}")
                ok = False
                break
            covs[c] = cell
        if not ok:
            continue
        outcome.append(out_v)
        region_raw.append(reg_v)
        group_raw.append(grp_v)
        if columns.center is not None:
            center_raw.append(row[col_idx[columns.center]].strip())
        for c in cov_names:
            cov_raw[c].append(covs[c])
    if bad_lines:
        parts = [f"{why} (lines {v[:8]}{'...' if len(v) > 8 else ''})"
                 for why, v in bad_lines.items()]
        raise ValueError(f"{path}: " + "; ".join(parts))

    region_labels = _sorted_labels(region_raw)
    group_labels = _sorted_labels(group_raw)
    t = np.array([region_labels.index(v) + 1 for v in region_raw])
    r = np.array([group_labels.index(v) + 1 for v in group_raw])

    feature_cols = []
    feature_names = []
    for c in cov_names:
        vals = cov_raw[c]
        try:
            col = np.array([float(v) for v in vals])
            if not np.isfinite(col).all():
                raise ValueError
            feature_cols.append(col)
            feature_names.append(c)
        except ValueError:
            levels = sorted(set(vals))
            for lev in levels[1:]:
                feature_cols.append(np.array([1.0 if v == lev else 0.0 for v in vals]))
                feature_names.append(f"{c}={lev}")
    x = np.column_stack(feature_cols)
    return ObservationTable(
        y=np.array(outcome), t=t, r=r, x=x,
        center_id=np.array(center_raw) if columns.center is not None else None,
        feature_names=feature_names, region_labels=region_labels,
        group_labels=group_labels)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def atomic_write_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, header, rows):
    """Atomic CSV write with deterministic float formatting (repr)."""
    import io as _io
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_table(table: ObservationTable, path):
    """Inverse of load_table; original region/group labels are preserved."""
    header = ["outcome", "region", "group"]
    if table.center_id is not None:
        header.append("center")
    names = table.feature_names or [f"x{j + 1}" for j in range(table.p)]
    header += list(names)
    region_labels = table.region_labels or [str(m) for m in range(1, table.n_regions + 1)]
    group_labels = table.group_labels or [str(k) for k in range(1, table.n_groups + 1)]
    rows = []
    for i in range(table.n):
        row = [int(table.y[i]), region_labels[table.t[i] - 1],
               group_labels[table.r[i] - 1]]
        if table.center_id is not None:
            row.append(str(table.center_id[i]))
        row += [float(v) for v in table.x[i]]
        rows.append(row)
    write_csv(path, header, rows)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclasses.dataclass
class ReportBundle:
    """What a run produced: files on disk plus in-memory results."""

    mode: str
    output_dir: str
    files: list
    manifest: dict
    metrics: MetricsTable | None = None
    records: list | None = None
    estimates: list | None = None
    sensitivity: SensitivityResult | None = None
    flagged_count: int = 0


def _write_manifest(cfg: StudyConfig, timings, file_rows, flagged):
    manifest = {
        "mode": cfg.mode,
        "config_hash": config_hash(cfg.resolved),
        "config": cfg.resolved,
        "seeds": cfg.seeds(),
        "versions": {
            "tlcausal": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "timings_seconds": {k: round(v, 3) for k, v in timings.items()},
        "outputs": file_rows,
        "flagged": flagged,
    }
    path = os.path.join(cfg.output_dir, "manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _labels_for(table):
    if table is None:
        return None, None
    return table.region_labels, table.group_labels


def _estimate_rows(estimates, table=None):
    region_labels, group_labels = _labels_for(table)
    rows = []
    for e in estimates:
        k = group_labels[e.k - 1] if group_labels else e.k
        m1 = region_labels[e.m1 - 1] if region_labels else e.m1
        m2 = region_labels[e.m2 - 1] if region_labels else e.m2
        rows.append([e.kind, k, m1, m2, e.point, e.se, e.ci[0], e.ci[1],
                     e.method, e.n_target])
    return rows


def _forest_rows(estimates, table=None):
    region_labels, group_labels = _labels_for(table)
    rows = []
    for e in estimates:
        k = group_labels[e.k - 1] if group_labels else e.k
        m1 = region_labels[e.m1 - 1] if region_labels else e.m1
        m2 = region_labels[e.m2 - 1] if region_labels else e.m2
        label = f"{e.kind} k={k} m1={m1} m2={m2} ({e.method})"
        rows.append([label, e.point, e.ci[0], e.ci[1]])
    return rows


def _safe_name(s):
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in str(s))


def run_simulate(cfg: StudyConfig) -> ReportBundle:
    """Replicated study: oracle truth, replicate estimates, summary metrics."""
    if cfg.dgp.redraw_coefficients:
        raise ValueError("metrics need coefficients fixed across replicates; "
                         "redraw_coefficients is not supported in simulate mode")
    os.makedirs(cfg.output_dir, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    coeffs = draw_coefficients(cfg.dgp, np.random.default_rng(cfg.dgp.coefficient_seed))
    truth = compute_true_effects(cfg.dgp, coeffs,
                                 k=cfg.analysis.target_group,
                                 oracle_n=cfg.oracle_draws,
                                 seed=cfg.seed + SEED_OFFSETS["oracle_seed"])
    timings["oracle"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    records = run_replicates(cfg.dgp, cfg.replicates, cfg.analysis,
                             threads=cfg.threads, coefficients=coeffs)
    timings["replicates"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    metrics = compute_metrics(records, truth)
    files = {}
    m_ = cfg.dgp.n_regions
    truth_rows = [[m1, m2] + list(truth.get(m1, m2))
                  for m1 in range(1, m_ + 1) for m2 in range(1, m_ + 1) if m1 != m2]
    write_csv(os.path.join(cfg.output_dir, "true_effects.csv"),
              ["m1", "m2", "tatt", "mc_se"], truth_rows)
    files["true_effects.csv"] = None
    write_csv(os.path.join(cfg.output_dir, "raw_estimates.csv"),
              ["replicate", "k", "m1", "m2", "method", "point", "se", "lo", "hi",
               "flagged", "reason"],
              [[rec.replicate, rec.k, rec.m1, rec.m2, rec.method, rec.point, rec.se,
                rec.lo, rec.hi, int(rec.flagged), rec.reason] for rec in records])
    files["raw_estimates.csv"] = None
    write_csv(os.path.join(cfg.output_dir, "metrics.csv"),
              ["pair", "method", "bias", "bias_x100", "rmse", "coverage", "n_reps"],
              [[f"{row.m1}->{row.m2}", row.method, row.bias, row.bias_x100,
                row.rmse, row.coverage, row.n_used] for row in metrics.rows])
    files["metrics.csv"] = None
    timings["reports"] = time.perf_counter() - t0

    flagged_count = sum(1 for rec in records if rec.flagged)
    reasons = {}
    for rec in records:
        if rec.flagged:
            reasons[rec.reason] = reasons.get(rec.reason, 0) + 1
    file_rows = {name: {"sha256": _sha256(os.path.join(cfg.output_dir, name))}
                 for name in files}
    manifest = _write_manifest(cfg, timings, file_rows,
                               {"count": flagged_count, "reasons": reasons})
    return ReportBundle(mode="simulate", output_dir=cfg.output_dir,
                        files=sorted(files) + ["manifest.json"], manifest=manifest,
                        metrics=metrics, records=records,
                        flagged_count=flagged_count)


def _resolve_groups(cfg, table):
    if cfg.groups == "all":
        return list(range(1, table.n_groups + 1))
    out = []
    for g in cfg.groups:
        label = str(g)
        if label not in table.group_labels:
            raise ValueError(f"unknown group {g!r}; known: {table.group_labels}")
        out.append(table.group_labels.index(label) + 1)
    return out


def _estimates_for_group(table, k, cfg):
    """Every (m1, m2) estimate for one group; returns (estimates, failures)."""
    analysis = cfg.analysis
    estimates = []
    failures = []
    try:
        prop = estimate_propensity(table, k, analysis.prop_penalty, analysis.clip)
    except ValueError as exc:
        failures.append({"group": k, "stage": "propensity", "reason": str(exc)})
        return estimates, failures
    m_ = table.n_regions
    for m1 in range(1, m_ + 1):
        mus = []
        if "transfer" in analysis.methods:
            try:
                _, mu = transfer_fit(table, StratumKey(k, m1), analysis.transfer)
                mus.append(("transfer", mu))
            except ValueError as exc:
                failures.append({"group": k, "region": m1, "stage": "transfer",
                                 "reason": str(exc)})
        if "target-only" in analysis.methods:
            mask = table.stratum_mask(k, m1)
            try:
                fit = fit_target_only(table.x[mask], table.y[mask], analysis.transfer)
                mus.append(("target-only", lambda xm, f=fit: predict_proba(f, xm)))
            except ValueError as exc:
                failures.append({"group": k, "region": m1, "stage": "target-only",
                                 "reason": str(exc)})
        for m2 in range(1, m_ + 1):
            if m1 == m2:
                try:
                    estimates.append(estimate_mpo(table, k, m1, m2, None, None,
                                                  method="observed",
                                                  variance=analysis.variance,
                                                  n_boot=analysis.n_boot,
                                                  bootstrap_seed=analysis.bootstrap_seed))
                except ValueError as exc:
                    failures.append({"group": k, "region": m1, "stage": "observed-mean",
                                     "reason": str(exc)})
                continue
            for method, mu in mus:
                try:
                    estimates.append(estimate_mpo(table, k, m1, m2, mu, prop,
                                                  method=method,
                                                  variance=analysis.variance,
                                                  n_boot=analysis.n_boot,
                                                  bootstrap_seed=analysis.bootstrap_seed))
                    estimates.append(estimate_tatt(table, k, m1, m2, mu, prop,
                                                   method=method,
                                                   variance=analysis.variance,
                                                   n_boot=analysis.n_boot,
                                                   bootstrap_seed=analysis.bootstrap_seed))
                except ValueError as exc:
                    failures.append({"group": k, "m1": m1, "m2": m2, "method": method,
                                     "stage": "estimate", "reason": str(exc)})
    return estimates, failures


def run_estimate(cfg: StudyConfig) -> ReportBundle:
    """Estimate every requested stratum contrast from a CSV registry."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    table = load_table(cfg.input_path, cfg.columns)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    estimates = []
    failures = []
    for k in _resolve_groups(cfg, table):
        got, bad = _estimates_for_group(table, k, cfg)
        estimates.extend(got)
        failures.extend(bad)
    timings["estimates"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    files = {}
    write_csv(os.path.join(cfg.output_dir, "estimates.csv"),
              ["kind", "k", "m1", "m2", "point", "se", "lo", "hi", "method",
               "n_target"], _estimate_rows(estimates, table))
    files["estimates.csv"] = None
    forest_name = f"forest_{_safe_name(cfg.columns.outcome)}.csv"
    write_csv(os.path.join(cfg.output_dir, forest_name),
              ["label", "point", "lower", "upper"], _forest_rows(estimates, table))
    files[forest_name] = None
    timings["reports"] = time.perf_counter() - t0

    file_rows = {name: {"sha256": _sha256(os.path.join(cfg.output_dir, name))}
                 for name in files}
    manifest = _write_manifest(cfg, timings, file_rows,
                               {"count": len(failures), "records": failures})
    return ReportBundle(mode="estimate", output_dir=cfg.output_dir,
                        files=sorted(files) + ["manifest.json"], manifest=manifest,
                        estimates=estimates, flagged_count=len(failures))


def _map_label(value, labels, what):
    label = str(value)
    if labels is None or label not in labels:
        raise ValueError(f"unknown {what} {value!r}; known: {labels}")
    return labels.index(label) + 1


def run_sensitivity(cfg: StudyConfig) -> ReportBundle:
    """Leave-one-center-out analysis for one target population."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    table = load_table(cfg.input_path, cfg.columns)
    timings["load"] = time.perf_counter() - t0
    if cfg.columns.center is None:
        raise ValueError("sensitivity mode needs a center column mapping")
    k = _map_label(cfg.sensitivity_group, table.group_labels, "group")
    m2 = _map_label(cfg.sensitivity_region, table.region_labels, "target region")

    t0 = time.perf_counter()
    analysis = cfg.analysis
    result = leave_one_out_sensitivity(
        table, k, m2, transfer_cfg=analysis.transfer,
        prop_penalty=analysis.prop_penalty, clip=analysis.clip,
        variance=analysis.variance)
    timings["sensitivity"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    files = {}
    sens_rows = []
    for e in result.reference:
        sens_rows.append([""] + _estimate_rows([e], table)[0])
    for center in sorted(result.excluded):
        for e in result.excluded[center]:
            sens_rows.append([center] + _estimate_rows([e], table)[0])
    write_csv(os.path.join(cfg.output_dir, "sensitivity.csv"),
              ["excluded_center", "kind", "k", "m1", "m2", "point", "se", "lo",
               "hi", "method", "n_target"], sens_rows)
    files["sensitivity.csv"] = None
    write_csv(os.path.join(cfg.output_dir, "estimates.csv"),
              ["kind", "k", "m1", "m2", "point", "se", "lo", "hi", "method",
               "n_target"], _estimate_rows(result.reference, table))
    files["estimates.csv"] = None
    forest_name = f"forest_{_safe_name(cfg.columns.outcome)}.csv"
    write_csv(os.path.join(cfg.output_dir, forest_name),
              ["label", "point", "lower", "upper"],
              _forest_rows(result.reference, table))
    files[forest_name] = None
    timings["reports"] = time.perf_counter() - t0

    flagged = {"count": sum(len(v) for v in result.diagnostics.values()),
               "records": {key: val for key, val in result.diagnostics.items()}}
    file_rows = {name: {"sha256": _sha256(os.path.join(cfg.output_dir, name))}
                 for name in files}
    manifest = _write_manifest(cfg, timings, file_rows, flagged)
    return ReportBundle(mode="sensitivity", output_dir=cfg.output_dir,
                        files=sorted(files) + ["manifest.json"], manifest=manifest,
                        sensitivity=result, flagged_count=flagged["count"])


def write_synthetic_registry_csv(path, *, seed=0, n_rows=3600, n_groups=3,
                                 n_regions=4, n_numeric=30, centers_per_region=4):
    """Registry-shaped demo CSV: groups x regions strata, centers, one
    categorical covariate, and per-region one center without target-group rows.

    Returns a dict describing the layout (labels, centers, and the reserved
    center per region that has no rows from the first group).
    """
    rng = np.random.default_rng(seed)
    props = np.full(n_groups, 1.0 / n_groups)
    props[-1] += 1.0 - props.sum()
    cfg = DgpConfig(
        n_groups=n_groups, n_regions=n_regions, n_total=n_rows,
        group_proportions=tuple(np.array([0.15, 0.25, 0.60]) if n_groups == 3
                                else props),
        p=n_numeric, s=4,
        group_means=tuple(0.1 * np.arange(n_groups)),
        coefficient_seed=seed, replicate_seed_base=seed + 1)
    coeffs = draw_coefficients(cfg, np.random.default_rng(cfg.coefficient_seed))
    table = generate_dataset(cfg, coeffs, rng)

    region_names = ["east", "north", "south", "west"][:n_regions]
    while len(region_names) < n_regions:
        region_names.append(f"region{len(region_names) + 1}")
    group_names = [f"group{chr(ord('a') + i)}" for i in range(n_groups)]
    site_types = ["academic", "community", "rural"]

    centers = {m: [f"{region_names[m - 1]}_c{j + 1}" for j in range(centers_per_region)]
               for m in range(1, n_regions + 1)}
    reserved = {region_names[m - 1]: centers[m][-1] for m in range(1, n_regions + 1)}

    center_col = []
    for i in range(table.n):
        m = int(table.t[i])
        pool = centers[m]
        if table.r[i] == 1:
            # the last center of each region never sees the first group
            center_col.append(pool[int(rng.integers(0, len(pool) - 1))])
        else:
            center_col.append(pool[int(rng.integers(0, len(pool)))])

    header = (["died", "region", "race_group", "center_id", "site_type"]
              + [f"x{j + 1}" for j in range(n_numeric)])
    rows = []
    for i in range(table.n):
        center = center_col[i]
        idx = centers[int(table.t[i])].index(center)
        row = [int(table.y[i]), region_names[table.t[i] - 1],
               group_names[table.r[i] - 1], center, site_types[idx % len(site_types)]]
        row += [float(v) for v in table.x[i]]
        rows.append(row)
    write_csv(path, header, rows)
    return {
        "path": path,
        "outcome": "died",
        "region": "region",
        "group": "race_group",
        "center": "center_id",
        "region_labels": region_names,
        "group_labels": group_names,
        "target_group_label": group_names[0],
        "reserved_center_by_region": reserved,
        "n_rows": table.n,
        "n_expanded_covariates": n_numeric + len(site_types) - 1,
    }
