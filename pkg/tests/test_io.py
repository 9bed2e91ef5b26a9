"""Config parsing, CSV ingestion, report emission, and CLI exit codes."""

import json
import os

import numpy as np
import pytest

from tlcausal import cli
from tlcausal.io import (
    SEED_OFFSETS,
    ColumnMapping,
    config_from_dict,
    config_hash,
    load_config,
    load_table,
    run_estimate,
    run_sensitivity,
    run_simulate,
    write_csv,
    write_synthetic_registry_csv,
    write_table,
)
from tlcausal.causal import estimate_propensity, estimate_tatt
from tlcausal.transfer import StratumKey, transfer_fit

SIM_SECTION = {
    "replicates": 2,
    "oracle_draws": 20_000,
    "dgp": {"n_groups": 3, "n_regions": 3, "n_total": 900,
            "group_proportions": [0.2, 0.3, 0.5], "p": 4, "s": 2,
            "group_means": [0.0, 0.1, 0.2]},
}
ANALYSIS_SECTION = {"lambda_grid": [0.05, 0.2], "n_folds": 3}


def _sim_config(output_dir, seed=21):
    return {"mode": "simulate", "seed": seed, "output_dir": output_dir,
            "analysis": dict(ANALYSIS_SECTION), "simulate": dict(SIM_SECTION)}


@pytest.fixture(scope="module")
def tiny_registry(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny") / "tiny.csv"
    return write_synthetic_registry_csv(str(path), seed=11, n_rows=700,
                                        n_groups=3, n_regions=3, n_numeric=5,
                                        centers_per_region=3)


def _estimate_config(info, output_dir, groups=("groupa",)):
    return {"mode": "estimate", "seed": 5, "output_dir": output_dir,
            "analysis": dict(ANALYSIS_SECTION),
            "estimate": {"input": info["path"],
                         "columns": {"outcome": info["outcome"],
                                     "region": info["region"],
                                     "group": info["group"],
                                     "center": info["center"]},
                         "groups": list(groups)}}


# ----------------------------------------------------------- config parsing

def test_config_rejects_unknown_and_missing_pieces(tmp_path):
    good = _sim_config(str(tmp_path))
    config_from_dict(good)
    with pytest.raises(ValueError, match="unknown keys in config"):
        config_from_dict({**good, "extra": 1})
    with pytest.raises(ValueError, match="mode must be one of"):
        config_from_dict({**good, "mode": "explode"})
    with pytest.raises(ValueError, match="section but mode is"):
        config_from_dict({**good, "estimate": {}})
    with pytest.raises(ValueError, match="missing its 'simulate' section"):
        config_from_dict({k: v for k, v in good.items() if k != "simulate"})
    with pytest.raises(ValueError, match="seed"):
        config_from_dict({k: v for k, v in good.items() if k != "seed"})
    with pytest.raises(ValueError, match="output directory"):
        config_from_dict({k: v for k, v in good.items() if k != "output_dir"})
    with pytest.raises(ValueError, match="unknown keys in analysis"):
        config_from_dict({**good, "analysis": {"typo": 1}})
    with pytest.raises(ValueError, match="unknown keys in simulate.dgp"):
        config_from_dict({**good, "simulate": {"dgp": {"n_bogus": 2}}})
    with pytest.raises(ValueError, match="unknown variance"):
        config_from_dict({**good, "analysis": {"variance": "exact"}})
    with pytest.raises(ValueError, match="unknown method"):
        config_from_dict({**good, "analysis": {"methods": ["transfer", "x"]}})
    with pytest.raises(ValueError, match="threads"):
        config_from_dict({**good, "threads": 0})


def test_estimate_and_sensitivity_sections(tmp_path, tiny_registry):
    cfg = config_from_dict(_estimate_config(tiny_registry, str(tmp_path)))
    assert cfg.mode == "estimate" and cfg.groups == ["groupa"]
    assert cfg.columns.center == "center_id"
    with pytest.raises(ValueError, match="needs 'input' and 'columns'"):
        config_from_dict({"mode": "estimate", "seed": 1,
                          "output_dir": str(tmp_path), "estimate": {}})
    with pytest.raises(ValueError, match="needs 'group' and 'target_region'"):
        config_from_dict({"mode": "sensitivity", "seed": 1,
                          "output_dir": str(tmp_path),
                          "sensitivity": {"input": "x.csv",
                                          "columns": {"outcome": "y",
                                                      "region": "m",
                                                      "group": "k"}}})
    with pytest.raises(ValueError, match="columns needs 'region'"):
        config_from_dict({"mode": "estimate", "seed": 1,
                          "output_dir": str(tmp_path),
                          "estimate": {"input": "x.csv",
                                       "columns": {"outcome": "y", "group": "k"}}})


def test_seed_offsets_and_overrides(tmp_path):
    raw = _sim_config(str(tmp_path), seed=100)
    cfg = config_from_dict(raw)
    assert cfg.seeds() == {name: 100 + off for name, off in SEED_OFFSETS.items()}
    assert cfg.dgp.coefficient_seed == 100
    assert cfg.dgp.replicate_seed_base == 100 + 1_000_000
    assert cfg.analysis.transfer.cv.fold_seed == 111
    assert cfg.analysis.transfer.split_seed == 113
    assert cfg.analysis.bootstrap_seed == 119

    cfg2 = config_from_dict(raw, overrides={"seed": 7, "threads": 3,
                                            "output_dir": "/tmp/elsewhere"})
    assert cfg2.seed == 7 and cfg2.threads == 3
    assert cfg2.output_dir == "/tmp/elsewhere"


def test_relative_paths_resolve_against_the_config_file(tmp_path, tiny_registry):
    cfg_path = tmp_path / "study.json"
    raw = _estimate_config(tiny_registry, "out")
    raw["estimate"]["input"] = os.path.basename(tiny_registry["path"])
    cfg_path.write_text(json.dumps(raw))
    # the registry lives elsewhere, so resolution is relative to the config
    cfg = load_config(str(cfg_path))
    assert cfg.output_dir == str(tmp_path / "out")
    assert cfg.input_path == str(tmp_path / os.path.basename(tiny_registry["path"]))
    bad = tmp_path / "broken.json"
    bad.write_text("{nope")
    with pytest.raises(ValueError, match="not valid JSON"):
        load_config(str(bad))


def test_config_hash_is_order_insensitive_and_content_sensitive(tmp_path):
    cfg = config_from_dict(_sim_config(str(tmp_path)))
    resolved = cfg.resolved
    shuffled = json.loads(json.dumps(resolved))
    assert config_hash(resolved) == config_hash(shuffled)
    other = config_from_dict(_sim_config(str(tmp_path), seed=22))
    assert config_hash(resolved) != config_hash(other.resolved)


# -------------------------------------------------------------- CSV loading

COLS = ColumnMapping(outcome="y", region="m", group="k")


def _write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_load_small_fixture(tmp_path):
    path = _write(tmp_path, "y,m,k,a,b\n1,east,g1,0.5,1\n0,west,g1,1.5,2\n"
                            "1,east,g2,2.5,3\n0,west,g2,3.5,4\n1,east,g1,4.5,5\n")
    table = load_table(path, COLS)
    assert table.n == 5 and table.p == 2
    assert table.region_labels == ["east", "west"]
    assert table.group_labels == ["g1", "g2"]
    assert table.t.tolist() == [1, 2, 1, 2, 1]
    assert table.feature_names == ["a", "b"]


def test_load_errors_carry_line_numbers(tmp_path):
    path = _write(tmp_path, "y,m,k,a\n1,east,g1,0.5\n,east,g1,1.0\n2,west,g2,2.0\n")
    with pytest.raises(ValueError) as err:
        load_table(path, COLS)
    msg = str(err.value)
    assert "non-binary outcome" in msg and "[3, 4]" in msg

    path2 = _write(tmp_path, "y,m,k,a\n1,east,g1,\n", "miss.csv")
    with pytest.raises(ValueError, match=r"missing value in column 'a' \(lines \[2\]"):
        load_table(path2, COLS)

    path3 = _write(tmp_path, "y,m,k,a\n1,east\n", "short.csv")
    with pytest.raises(ValueError, match=r"wrong number of fields \(lines \[2\]"):
        load_table(path3, COLS)

    with pytest.raises(ValueError, match="columns not in header"):
        load_table(_write(tmp_path, "y,m,a\n1,east,0.5\n", "nok.csv"), COLS)
    with pytest.raises(ValueError, match="empty file"):
        load_table(_write(tmp_path, "", "empty.csv"), COLS)
    with pytest.raises(ValueError, match="no data rows"):
        load_table(_write(tmp_path, "y,m,k,a\n", "hdr.csv"), COLS)
    with pytest.raises(ValueError, match="no covariate columns"):
        load_table(_write(tmp_path, "y,m,k\n1,east,g1\n", "nocov.csv"), COLS)


def test_long_error_lists_are_truncated(tmp_path):
    lines = "".join(f"2,east,g1,{i}\n" for i in range(12))
    path = _write(tmp_path, "y,m,k,a\n" + lines)
    with pytest.raises(ValueError, match=r"\.\.\."):
        load_table(path, COLS)


def test_numeric_labels_sort_numerically(tmp_path):
    path = _write(tmp_path, "y,m,k,a\n1,10,1,0.1\n0,2,1,0.2\n1,1,2,0.3\n")
    table = load_table(path, COLS)
    assert table.region_labels == ["1", "2", "10"]
    assert table.t.tolist() == [3, 2, 1]
    lex = _write(tmp_path, "y,m,k,a\n1,b10,1,0.1\n0,b2,1,0.2\n", "lex.csv")
    assert load_table(lex, COLS).region_labels == ["b10", "b2"]


def test_categorical_covariates_expand_against_first_level(tmp_path):
    path = _write(tmp_path, "y,m,k,site,a\n1,east,g1,beta,0.5\n0,west,g1,alpha,1.0\n"
                            "1,east,g2,gamma,1.5\n")
    table = load_table(path, ColumnMapping(outcome="y", region="m", group="k"))
    assert table.feature_names == ["site=beta", "site=gamma", "a"]
    assert table.x[:, 0].tolist() == [1.0, 0.0, 0.0]
    assert table.x[:, 1].tolist() == [0.0, 0.0, 1.0]


def test_explicit_covariate_subset(tmp_path):
    path = _write(tmp_path, "y,m,k,a,b,junk\n1,east,g1,0.5,1,zzz\n0,west,g1,1,2,qqq\n")
    table = load_table(path, ColumnMapping(outcome="y", region="m", group="k",
                                           covariates=("b",)))
    assert table.feature_names == ["b"] and table.p == 1


def test_write_table_round_trip(tmp_path):
    src = _write(tmp_path, "y,m,k,c,site,a\n1,east,g1,c1,alpha,0.5\n"
                           "0,west,g1,c2,beta,1.5\n1,east,g2,c1,alpha,2.5\n")
    cols = ColumnMapping(outcome="y", region="m", group="k", center="c")
    table = load_table(src, cols)
    out = tmp_path / "echo.csv"
    write_table(table, str(out))
    back = load_table(str(out), ColumnMapping(outcome="outcome", region="region",
                                              group="group", center="center"))
    assert np.array_equal(back.y, table.y)
    assert np.array_equal(back.t, table.t)
    assert np.array_equal(back.r, table.r)
    assert np.array_equal(back.x, table.x)
    assert back.region_labels == table.region_labels
    assert np.array_equal(back.center_id, table.center_id)


def test_write_csv_is_deterministic_and_full_precision(tmp_path):
    rows = [[1 / 3, "a"], [2.0 ** -40, "b"]]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(str(p1), ["v", "tag"], rows)
    write_csv(str(p2), ["v", "tag"], rows)
    assert p1.read_bytes() == p2.read_bytes()
    text = p1.read_text()
    assert repr(1 / 3) in text
    assert float(text.splitlines()[2].split(",")[0]) == 2.0 ** -40


# -------------------------------------------------------- synthetic registry

def test_registry_layout(registry_csv):
    info = registry_csv
    assert info["n_rows"] == 3600
    assert info["group_labels"] == ["groupa", "groupb", "groupc"]
    assert info["region_labels"] == ["east", "north", "south", "west"]
    assert info["n_expanded_covariates"] == 32
    cols = ColumnMapping(outcome=info["outcome"], region=info["region"],
                         group=info["group"], center=info["center"])
    table = load_table(info["path"], cols)
    assert table.n == 3600 and table.p == 32
    assert table.group_labels == info["group_labels"]
    ids = table.center_id.astype(str)
    for region, reserved in info["reserved_center_by_region"].items():
        m = table.region_labels.index(region) + 1
        at_center = ids == reserved
        assert at_center.any()
        assert not np.any(at_center & (table.r == 1) & (table.t == m))


# ------------------------------------------------------------ run_* bundles

def test_run_simulate_outputs_and_manifest(tmp_path):
    out1 = tmp_path / "one"
    cfg = config_from_dict(_sim_config(str(out1)))
    bundle = run_simulate(cfg)
    assert bundle.flagged_count == 0
    names = {"true_effects.csv", "raw_estimates.csv", "metrics.csv"}
    assert set(bundle.files) == names | {"manifest.json"}
    for name in names:
        assert (out1 / name).exists()

    man = json.loads((out1 / "manifest.json").read_text())
    assert man["config_hash"] == config_hash(cfg.resolved)
    assert man["seeds"] == {k: 21 + v for k, v in SEED_OFFSETS.items()}
    assert set(man["versions"]) == {"tlcausal", "python", "numpy", "scipy"}
    assert man["flagged"] == {"count": 0, "reasons": {}}
    for name in names:
        assert len(man["outputs"][name]["sha256"]) == 64

    metrics_lines = (out1 / "metrics.csv").read_text().splitlines()
    assert metrics_lines[0] == "pair,method,bias,bias_x100,rmse,coverage,n_reps"
    assert len(metrics_lines) == 1 + 6 * 2  # ordered pairs x methods
    raw_lines = (out1 / "raw_estimates.csv").read_text().splitlines()
    assert len(raw_lines) == 1 + 2 * 6 * 2

    # rerunning the same config elsewhere reproduces every byte
    out2 = tmp_path / "two"
    run_simulate(config_from_dict(_sim_config(str(out2))))
    for name in names:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    man2 = json.loads((out2 / "manifest.json").read_text())
    assert man2["outputs"] == man["outputs"]
    assert man2["config_hash"] != config_hash(
        config_from_dict(_sim_config(str(out2), seed=22)).resolved)


def test_run_simulate_refuses_redrawn_coefficients(tmp_path):
    raw = _sim_config(str(tmp_path))
    raw["simulate"]["dgp"]["redraw_coefficients"] = True
    with pytest.raises(ValueError, match="redraw_coefficients"):
        run_simulate(config_from_dict(raw))


def test_run_estimate_matches_direct_library_calls(tmp_path, tiny_registry):
    out = tmp_path / "est"
    cfg = config_from_dict(_estimate_config(tiny_registry, str(out)))
    bundle = run_estimate(cfg)
    assert bundle.flagged_count == 0
    # 3 regions: per m1 one observed diagonal + 2 methods x (MPO+TATT) per m2
    assert len(bundle.estimates) == 3 * (1 + 2 * 4)
    assert (out / "estimates.csv").exists()
    assert (out / "forest_died.csv").exists()

    table = load_table(cfg.input_path, cfg.columns)
    prop = estimate_propensity(table, 1, cfg.analysis.prop_penalty,
                               cfg.analysis.clip)
    _, mu = transfer_fit(table, StratumKey(1, 2), cfg.analysis.transfer)
    expect = estimate_tatt(table, 1, 2, 3, mu, prop, method="transfer")
    got = next(e for e in bundle.estimates
               if (e.kind, e.m1, e.m2, e.method) == ("TATT", 2, 3, "transfer"))
    assert got.point == expect.point and got.se == expect.se

    first_data = (out / "estimates.csv").read_text().splitlines()[1]
    assert first_data.split(",")[:4] == ["MPO", "groupa", "east", "east"]


def test_run_sensitivity_emits_loo_series(tmp_path, tiny_registry):
    out = tmp_path / "sens"
    raw = {"mode": "sensitivity", "seed": 5, "output_dir": str(out),
           "analysis": dict(ANALYSIS_SECTION),
           "sensitivity": {"input": tiny_registry["path"],
                           "columns": {"outcome": "died", "region": "region",
                                       "group": "race_group",
                                       "center": "center_id"},
                           "group": "groupa", "target_region": "south"}}
    bundle = run_sensitivity(config_from_dict(raw))
    res = bundle.sensitivity
    assert sorted(res.excluded) == [f"south_c{j}" for j in (1, 2, 3)]
    lines = (out / "sensitivity.csv").read_text().splitlines()
    assert lines[0].startswith("excluded_center,")
    per_series = len(res.reference)
    assert len(lines) == 1 + per_series + sum(
        len(v) for v in res.excluded.values())
    refs = [ln for ln in lines[1:] if ln.startswith(",")]
    assert len(refs) == per_series
    assert (out / "estimates.csv").exists() and (out / "manifest.json").exists()

    noncenter = {**raw, "sensitivity": {**raw["sensitivity"],
                                        "columns": {"outcome": "died",
                                                    "region": "region",
                                                    "group": "race_group"}}}
    with pytest.raises(ValueError, match="center column"):
        run_sensitivity(config_from_dict(noncenter))


# -------------------------------------------------------------- CLI surface

def _cfg_file(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def test_cli_estimate_ok_and_mode_mismatch(tmp_path, tiny_registry, capsys):
    out = tmp_path / "cliout"
    cfg_path = _cfg_file(tmp_path, _estimate_config(tiny_registry, str(out)))
    assert cli.main(["estimate", "--config", cfg_path]) == cli.EXIT_OK
    stdout = capsys.readouterr().out
    assert "estimates" in stdout and (out / "manifest.json").exists()

    assert cli.main(["simulate", "--config", cfg_path]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "config mode is 'estimate'" in err


def test_cli_config_error_writes_error_json(tmp_path, capsys):
    raw = _sim_config(str(tmp_path / "o"))
    del raw["seed"]
    cfg_path = _cfg_file(tmp_path, raw)
    errdir = tmp_path / "errs"
    code = cli.main(["simulate", "--config", cfg_path,
                     "--output-dir", str(errdir)])
    assert code == cli.EXIT_CONFIG
    record = json.loads((errdir / "error.json").read_text())
    assert record["command"] == "simulate"
    assert record["error_type"] == "ValueError"
    assert "seed" in record["message"]
    capsys.readouterr()


def test_cli_runtime_failure_exits_two(tmp_path, monkeypatch, capsys):
    cfg_path = _cfg_file(tmp_path, _sim_config(str(tmp_path / "o")))

    def boom(cfg):
        raise RuntimeError("worker crashed")

    monkeypatch.setattr(cli, "run_simulate", boom)
    assert cli.main(["simulate", "--config", cfg_path]) == cli.EXIT_RUNTIME
    record = json.loads((tmp_path / "o" / "error.json").read_text())
    assert record["error_type"] == "RuntimeError"
    capsys.readouterr()


def test_cli_flagged_run_exits_four(tmp_path, capsys):
    # a group confined to one region cannot get a propensity model
    src = tmp_path / "solo.csv"
    lines = ["y,m,k,a,b"]
    rng = np.random.default_rng(3)
    for i in range(240):
        region = ["east", "west"][i % 2]
        group = "main"
        lines.append(f"{int(rng.random() < 0.5)},{region},{group},"
                     f"{rng.normal():.4f},{rng.normal():.4f}")
    for i in range(40):
        lines.append(f"{int(rng.random() < 0.5)},east,solo,"
                     f"{rng.normal():.4f},{rng.normal():.4f}")
    src.write_text("\n".join(lines) + "\n")
    out = tmp_path / "flagged"
    raw = {"mode": "estimate", "seed": 2, "output_dir": str(out),
           "analysis": dict(ANALYSIS_SECTION),
           "estimate": {"input": str(src),
                        "columns": {"outcome": "y", "region": "m", "group": "k"},
                        "groups": ["solo"]}}
    code = cli.main(["estimate", "--config", _cfg_file(tmp_path, raw)])
    assert code == cli.EXIT_FLAGGED
    assert "WARNING" in capsys.readouterr().out
    man = json.loads((out / "manifest.json").read_text())
    assert man["flagged"]["count"] == 1
    assert man["flagged"]["records"][0]["stage"] == "propensity"


def test_cli_seed_override_changes_results(tmp_path, tiny_registry, capsys):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    cfg_path = _cfg_file(tmp_path, _estimate_config(tiny_registry, "ignored"))
    assert cli.main(["estimate", "--config", cfg_path,
                     "--output-dir", str(out_a)]) == cli.EXIT_OK
    assert cli.main(["estimate", "--config", cfg_path, "--seed", "99",
                     "--output-dir", str(out_b)]) == cli.EXIT_OK
    capsys.readouterr()
    man_a = json.loads((out_a / "manifest.json").read_text())
    man_b = json.loads((out_b / "manifest.json").read_text())
    assert man_a["config_hash"] != man_b["config_hash"]
    assert man_b["seeds"]["fold_seed"] == 99 + SEED_OFFSETS["fold_seed"]
