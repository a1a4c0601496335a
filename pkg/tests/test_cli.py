import csv
import json

import pytest

from kvbudget import load_config, load_trace
from kvbudget.cli import main, parse_budget


def run(args, cwd):
    import os

    old = os.getcwd()
    os.chdir(cwd)
    try:
        return main(args)
    finally:
        os.chdir(old)


def read_csv(path):
    with open(path) as handle:
        return list(csv.DictReader(handle))


@pytest.fixture
def dirichlet_trace(tmp_path):
    code = run(
        ["synth", "--mode", "dirichlet", "--layers", "2", "--heads", "1",
         "--seq", "40", "--concentration", "0.05,5.0", "--kv", "--seed", "7",
         "--out", "t.json"],
        tmp_path,
    )
    assert code == 0
    return tmp_path / "t.json"


class TestSynth:
    def test_dirichlet_trace_is_valid(self, dirichlet_trace):
        trace = load_trace(dirichlet_trace)
        assert trace.meta.layers == 2
        assert trace.keys is not None
        assert (dirichlet_trace.parent / "t.json.manifest.json").exists()

    def test_toy_trace_is_valid(self, tmp_path):
        assert run(["synth", "--mode", "toy", "--layers", "4", "--heads", "2",
                    "--dim", "32", "--seq", "24", "--seed", "3", "--out", "toy.json"],
                   tmp_path) == 0
        trace = load_trace(tmp_path / "toy.json")
        assert trace.meta.layers == 4
        assert trace.features is not None

    def test_missing_out_is_usage_error(self, tmp_path):
        assert run(["synth", "--mode", "dirichlet"], tmp_path) == 1

    def test_bad_concentration_count(self, tmp_path):
        assert run(["synth", "--layers", "3", "--concentration", "1.0,2.0",
                    "--out", "x.json"], tmp_path) == 1

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("KVBUDGET_SEED", "99")
        run(["synth", "--layers", "1", "--seq", "8", "--out", "a.json"], tmp_path)
        monkeypatch.delenv("KVBUDGET_SEED")
        run(["synth", "--layers", "1", "--seq", "8", "--seed", "99", "--out", "b.json"],
            tmp_path)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestAnalyze:
    def test_uniform_importance_gives_zero_gini(self, tmp_path):
        doc = {"meta": {"layers": 2, "heads": 1, "seq_len": 6},
               "importance": [[1.0] * 6, [1.0] * 6]}
        (tmp_path / "u.json").write_text(json.dumps(doc))
        assert run(["analyze", "u.json"], tmp_path) == 0
        rows = read_csv(tmp_path / "gini.csv")
        assert len(rows) == 2
        assert all(abs(float(r["gini"])) < 1e-9 for r in rows)

    def test_gini_in_range_and_layer_filter(self, tmp_path, dirichlet_trace):
        assert run(["analyze", "t.json"], tmp_path) == 0
        rows = read_csv(tmp_path / "gini.csv")
        assert len(rows) == 2
        assert all(0.0 <= float(r["gini"]) < 1.0 for r in rows)
        assert run(["analyze", "t.json", "--layer", "1",
                    "--out-curves", "c1.csv", "--out-stats", "g1.csv"], tmp_path) == 0
        assert [r["layer"] for r in read_csv(tmp_path / "g1.csv")] == ["1"]
        curves = read_csv(tmp_path / "c1.csv")
        assert {r["layer"] for r in curves} == {"1"}
        assert len(curves) == 40

    def test_validation_error_exit_code(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({
            "meta": {"layers": 1, "heads": 1, "seq_len": 2},
            "attention": [[[[0.5, 0.6], [0.5, 0.5]]]],
        }))
        assert run(["analyze", "bad.json"], tmp_path) == 2


class TestPlan:
    def test_online_plan_budget_exact(self, tmp_path, dirichlet_trace):
        assert run(["plan", "--budget", "0.5", "--delta-tol", "0.025",
                    "--out", "c.json", "t.json"], tmp_path) == 0
        config = load_config(tmp_path / "c.json")
        assert config.token_counts.sum() == round(0.5 * 2 * 40)
        assert config.source == "online"
        assert config.policy == "prefixkv"

    def test_percentage_budget(self, tmp_path, dirichlet_trace):
        run(["plan", "--budget", "50%", "--out", "p.json", "t.json"], tmp_path)
        run(["plan", "--budget", "0.5", "--out", "f.json", "t.json"], tmp_path)
        assert (tmp_path / "p.json").read_text() == (tmp_path / "f.json").read_text()

    def test_offline_plan_records_samples(self, tmp_path):
        for i in range(3):
            run(["synth", "--layers", "2", "--seq", "24", "--concentration",
                 "0.1,2.0", "--seed", str(i), "--out", f"s{i}.json"], tmp_path)
        assert run(["plan", "--offline", "--budget", "0.5", "--out", "off.json",
                    "s0.json", "s1.json", "s2.json"], tmp_path) == 0
        config = load_config(tmp_path / "off.json")
        assert config.source == "offline"
        assert config.samples == 3

    def test_multiple_traces_without_offline_is_usage_error(self, tmp_path):
        for i in range(2):
            run(["synth", "--layers", "1", "--seq", "8", "--seed", str(i),
                 "--out", f"m{i}.json"], tmp_path)
        assert run(["plan", "--budget", "0.5", "--out", "x.json",
                    "m0.json", "m1.json"], tmp_path) == 1

    def test_infeasible_budget_exit_code(self, tmp_path, dirichlet_trace):
        assert run(["plan", "--budget", "0.001", "--layers-min", "1",
                    "--out", "x.json", "t.json"], tmp_path) == 3

    def test_baseline_policies(self, tmp_path, dirichlet_trace):
        assert run(["plan", "--budget", "0.5", "--policy", "pyramid",
                    "--out", "py.json", "t.json"], tmp_path) == 0
        config = load_config(tmp_path / "py.json")
        assert config.policy == "pyramid"
        assert config.threshold is None
        assert run(["plan", "--budget", "0.5", "--policy", "local", "--sink", "2",
                    "--out", "lo.json", "t.json"], tmp_path) == 0
        assert load_config(tmp_path / "lo.json").sink_count == 2


class TestSimulate:
    def test_replay_with_config(self, tmp_path, dirichlet_trace):
        run(["plan", "--budget", "0.5", "--prefill", "32", "--out", "c.json",
             "t.json"], tmp_path)
        assert run(["simulate", "--config", "c.json", "--trace", "t.json",
                    "--steps", "8", "--protect", "4"], tmp_path) == 0
        records = [json.loads(line) for line in
                   (tmp_path / "sim.jsonl").read_text().splitlines()]
        assert len(records) == 8
        config = load_config(tmp_path / "c.json")
        for rec in records:
            t = 32 + rec["step"]
            for l, size in enumerate(rec["layer_sizes"]):
                assert size <= max(1, int(config.ratios[l] * t)) + 1
        info = read_csv(tmp_path / "retained_info.csv")
        assert {r["step"] for r in info} == {str(i) for i in range(9)}

    def test_merge_feature_logs_targets(self, tmp_path, dirichlet_trace):
        run(["plan", "--budget", "0.3", "--prefill", "32", "--out", "c.json",
             "t.json"], tmp_path)
        assert run(["simulate", "--config", "c.json", "--trace", "t.json",
                    "--steps", "8", "--merge", "feature", "--protect", "2",
                    "--out-log", "m.jsonl"], tmp_path) == 0
        records = [json.loads(line) for line in
                   (tmp_path / "m.jsonl").read_text().splitlines()]
        events = [ev for rec in records for ev in rec["evicted"]]
        assert events
        assert all(ev["merged_into"] is not None for ev in events)

    def test_full_budget_disturb_is_zero(self, tmp_path):
        assert run(["simulate", "--budget", "1.0", "--toy-seed", "5",
                    "--toy-layers", "4", "--toy-dim", "32", "--prompt-len", "24",
                    "--steps", "4", "--disturb"], tmp_path) == 0
        rows = read_csv(tmp_path / "disturbance.csv")
        assert len(rows) == 4 * 4
        assert all(float(r["mae"]) == 0.0 for r in rows)

    def test_disturb_requires_toy_mode(self, tmp_path, dirichlet_trace):
        assert run(["simulate", "--budget", "0.5", "--trace", "t.json",
                    "--steps", "4", "--disturb"], tmp_path) == 1

    def test_config_trace_length_mismatch(self, tmp_path, dirichlet_trace):
        run(["plan", "--budget", "0.5", "--out", "c.json", "t.json"], tmp_path)
        assert run(["simulate", "--config", "c.json", "--trace", "t.json",
                    "--steps", "8"], tmp_path) == 2


class TestCompare:
    def test_policy_grid(self, tmp_path, dirichlet_trace):
        assert run(["compare", "--budgets", "0.3,0.6",
                    "--policies", "prefixkv,uniform,pyramid,local",
                    "--sink", "2", "--out", "grid.csv", "t.json"], tmp_path) == 0
        rows = read_csv(tmp_path / "grid.csv")
        assert len(rows) == 8
        by_key = {(r["budget"], r["policy"]): float(r["min_retained_info"]) for r in rows}
        for budget in ("0.3", "0.6"):
            assert by_key[(budget, "prefixkv")] >= by_key[(budget, "uniform")] - 0.05

    def test_single_cell(self, tmp_path, dirichlet_trace):
        assert run(["compare", "--budgets", "0.5", "--policies", "prefixkv",
                    "--out", "one.csv", "t.json"], tmp_path) == 0
        assert len(read_csv(tmp_path / "one.csv")) == 1

    def test_empty_budget_list_is_usage_error(self, tmp_path, dirichlet_trace):
        assert run(["compare", "--budgets", ",", "--out", "x.csv", "t.json"],
                   tmp_path) == 1

    def test_toy_mode_reports_mae(self, tmp_path):
        assert run(["compare", "--budgets", "0.5", "--policies", "prefixkv,uniform",
                    "--toy-seed", "2", "--runs", "2", "--toy-layers", "4",
                    "--toy-dim", "32", "--prompt-len", "24", "--decode-len", "4",
                    "--out", "toy.csv"], tmp_path) == 0
        rows = read_csv(tmp_path / "toy.csv")
        assert len(rows) == 2
        assert all("mean_mae" in r for r in rows)


class TestManifests:
    def test_replay_reproduces_bit_exactly(self, tmp_path, dirichlet_trace):
        run(["plan", "--budget", "0.4", "--prefill", "32", "--out", "c.json",
             "t.json"], tmp_path)
        run(["simulate", "--config", "c.json", "--trace", "t.json", "--steps", "6",
             "--merge", "position", "--protect", "4"], tmp_path)
        log_bytes = (tmp_path / "sim.jsonl").read_bytes()
        info_bytes = (tmp_path / "retained_info.csv").read_bytes()
        assert run(["replay", "sim.jsonl.manifest.json"], tmp_path) == 0
        assert (tmp_path / "sim.jsonl").read_bytes() == log_bytes
        assert (tmp_path / "retained_info.csv").read_bytes() == info_bytes

    def test_manifest_lists_outputs_and_version(self, tmp_path, dirichlet_trace):
        manifest = json.loads((tmp_path / "t.json.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["outputs"] == ["t.json"]
        assert manifest["seed"] == 7
        assert manifest["tool_version"]

    def test_rerun_is_byte_stable(self, tmp_path, dirichlet_trace):
        run(["analyze", "t.json"], tmp_path)
        first = (tmp_path / "lorenz.csv").read_bytes()
        run(["analyze", "t.json"], tmp_path)
        assert (tmp_path / "lorenz.csv").read_bytes() == first

    def test_synth_replay_reproduces_trace(self, tmp_path, dirichlet_trace):
        original = dirichlet_trace.read_bytes()
        assert run(["replay", "t.json.manifest.json"], tmp_path) == 0
        assert dirichlet_trace.read_bytes() == original

    def test_replay_rejects_bad_manifest(self, tmp_path):
        (tmp_path / "bad.manifest.json").write_text("{}")
        assert run(["replay", "bad.manifest.json"], tmp_path) == 2


def test_parse_budget_forms():
    assert parse_budget("0.5") == 0.5
    assert parse_budget("50%") == 0.5
    assert parse_budget(0.25) == 0.25
    with pytest.raises(Exception):
        parse_budget("half")
