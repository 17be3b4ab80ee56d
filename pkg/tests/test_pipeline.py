import json
from pathlib import Path

import numpy as np
import pytest

from shiftmatch.covstats import CovKind
from shiftmatch.errors import ConfigError
from shiftmatch.pipeline import (
    ExperimentConfig,
    apply_overrides,
    load_config,
    method_list,
    parse_config,
    parse_corruptions,
    read_report_csv,
    report_content_hash,
    resolve_method,
    run_eval,
    run_stats,
    run_theory,
    run_train,
    validate_config,
)

SMALL = dict(members=2, epochs=1, train_size=240, test_size=80, classes=4,
             corruptions="blur:2,noise:1", methods="plain,meanvar,shiftmatch",
             graph="mlp-s", batch=60)


def small_cfg(tmp_path, **kw):
    args = dict(SMALL)
    args.update(samples=str(tmp_path / "samples"), out=str(tmp_path / "out"))
    args.update(kw)
    return ExperimentConfig(**args)


class TestConfig:
    def test_parse_round_trip(self):
        cfg = ExperimentConfig(members=3, lr=0.01, corruptions="blur:1")
        back = parse_config(cfg.to_text())
        assert back == cfg
        assert back.config_hash() == cfg.config_hash()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config("frobnicate = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config("members = three\n")

    def test_comments_and_blanks(self):
        cfg = parse_config("# hello\n\nmembers = 4\n")
        assert cfg.members == 4

    def test_overrides(self):
        cfg = apply_overrides(ExperimentConfig(), {"eps": "1e-3", "seed": 9, "methods": None})
        assert cfg.eps == pytest.approx(1e-3)
        assert cfg.seed == 9

    def test_validate_rejects(self):
        with pytest.raises(ConfigError):
            validate_config(ExperimentConfig(spec="diag"))
        with pytest.raises(ConfigError):
            validate_config(ExperimentConfig(placement="middle"))
        with pytest.raises(ConfigError):
            validate_config(ExperimentConfig(methods="plain,magic"))
        with pytest.raises(ConfigError):
            validate_config(ExperimentConfig(corruptions="blur"))

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_corruption_parsing(self):
        assert parse_corruptions("blur:4, noise:2") == [("blur", 4), ("noise", 2)]
        assert method_list(" plain, shiftmatch ") == ["plain", "shiftmatch"]


class TestMethodResolution:
    def test_method_map(self):
        cfg = ExperimentConfig()
        assert not resolve_method("plain", cfg).matched
        assert resolve_method("shiftmatch", cfg).kind is CovKind.KRON
        assert resolve_method("meanvar", cfg).kind is CovKind.MEAN_VAR
        assert resolve_method("full-cov", cfg).kind is CovKind.PER_CHANNEL
        assert resolve_method("channel-joint", cfg).kind is CovKind.CHANNEL_JOINT
        assert resolve_method("input-only", cfg).variant == "input-only"
        assert resolve_method("post-activation", cfg).timing == "post"

    def test_shiftmatch_follows_config(self):
        cfg = ExperimentConfig(spec="full", placement="post")
        setup = resolve_method("shiftmatch", cfg)
        assert setup.kind is CovKind.PER_CHANNEL and setup.timing == "post"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = small_cfg(tmp)
    train_result = run_train(cfg)
    stats_result = run_stats(cfg)
    return cfg, train_result, stats_result


class TestCommands:
    def test_train_outputs(self, trained):
        cfg, result, _ = trained
        assert len(result["weight_files"]) == cfg.members
        for path in result["weight_files"]:
            assert Path(path).exists()
        assert Path(result["graph_file"]).exists()
        assert set(result["clean_accuracy"]) == {"member-0", "member-1"}

    def test_train_deterministic(self, trained, tmp_path):
        cfg, result, _ = trained
        cfg2 = small_cfg(tmp_path)
        result2 = run_train(cfg2)
        a = Path(result["weight_files"][0]).read_bytes()
        b = Path(result2["weight_files"][0]).read_bytes()
        assert a == b

    def test_stats_idempotent(self, trained):
        cfg, _, stats_result = trained
        before = {p: Path(p).read_bytes() for p in stats_result["stats_files"]}
        again = run_stats(cfg)
        for path in again["stats_files"]:
            assert Path(path).read_bytes() == before[path]

    def test_eval_report(self, trained):
        cfg, _, _ = trained
        result = run_eval(cfg)
        rows = result["rows"]
        # full grid: (clean + 2 corruptions) x 3 methods
        assert len(rows) == 9
        for row in rows:
            assert 0.0 <= row["accuracy"] <= 1.0
            assert row["nll"] >= 0.0
            assert row["examples"] == cfg.test_size
        # CSV round-trips losslessly through its JSON twin
        csv_rows = read_report_csv(result["csv_path"])
        json_doc = json.loads(Path(result["json_path"]).read_text())
        assert json_doc["config_hash"] == cfg.config_hash()
        for a, b in zip(csv_rows, json_doc["rows"]):
            assert a == b
        stored_hash = Path(result["hash_path"]).read_text().strip()
        assert stored_hash == report_content_hash(rows)

    def test_eval_deterministic_content(self, trained):
        cfg, _, _ = trained
        h1 = report_content_hash(run_eval(cfg)["rows"])
        h2 = report_content_hash(run_eval(cfg)["rows"])
        assert h1 == h2

    def test_plain_rows_independent_of_matching_config(self, trained):
        cfg, _, _ = trained
        base = [r for r in run_eval(cfg, ["plain"])["rows"]]
        from dataclasses import replace

        other = replace(cfg, spec="meanvar", placement="input-only", eps=0.5)
        moved = [r for r in run_eval(other, ["plain"])["rows"]]
        for a, b in zip(base, moved):
            assert a["accuracy"] == b["accuracy"]
            assert a["nll"] == b["nll"]

    def test_eval_requires_stats(self, trained, tmp_path):
        cfg, _, _ = trained
        from dataclasses import replace

        missing = replace(cfg, out=str(tmp_path))
        with pytest.raises(ConfigError):
            run_eval(missing, ["plain", "channel-joint"])  # no channel-joint stats yet

    def test_stats_requires_weights(self, tmp_path):
        cfg = small_cfg(tmp_path)
        with pytest.raises(ConfigError):
            run_stats(cfg)

    def test_eval_unknown_method(self, trained):
        cfg, _, _ = trained
        with pytest.raises(ConfigError):
            run_eval(cfg, ["nonsense"])

    def test_ablation_methods_end_to_end(self, trained):
        cfg, _, _ = trained
        methods = ["channel-joint", "full-cov", "post-activation"]
        run_stats(cfg, methods)
        rows = run_eval(cfg, methods)["rows"]
        assert {r["method"] for r in rows} == set(methods)
        for row in rows:
            assert 0.0 <= row["accuracy"] <= 1.0
            assert np.isfinite(row["nll"])


class TestTheory:
    def test_small_theory_run(self, tmp_path):
        cfg = ExperimentConfig(out=str(tmp_path), theory_samples=4000, seed=1)
        result = run_theory(cfg)
        assert Path(result["csv_path"]).exists()
        modes = {(r["mode"], r["corruption"]) for r in result["rows"]}
        assert ("population", "identity") in modes
        assert ("empirical", "blur:2.0") in modes
        pop = [r for r in result["rows"] if r["mode"] == "population"]
        assert all(r["passed"] for r in pop)
