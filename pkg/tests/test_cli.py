from pathlib import Path

import pytest

from shiftmatch.cli import EXIT_CONFIG, EXIT_OK, build_parser, gather_config, main


def write_config(tmp_path, **kw):
    cfg = dict(
        graph="mlp-s", classes=4, members=1, epochs=1, train_size=160, test_size=60,
        batch=40, corruptions="blur:2", methods="plain,shiftmatch",
        samples=str(tmp_path / "samples"), out=str(tmp_path / "out"),
    )
    cfg.update(kw)
    path = tmp_path / "exp.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in cfg.items()))
    return path


class TestParsing:
    def test_flags_override_config(self, tmp_path):
        path = write_config(tmp_path, seed=1, eps=1e-5)
        parser = build_parser()
        args = parser.parse_args(["eval", "--config", str(path), "--seed", "9",
                                  "--eps", "1e-3", "--spec", "meanvar"])
        cfg = gather_config(args)
        assert cfg["seed"] == 9
        assert cfg["eps"] == pytest.approx(1e-3)
        assert cfg["spec"] == "meanvar"
        assert cfg["members"] == 1  # from file

    def test_defaults_without_config(self):
        args = build_parser().parse_args(["theory"])
        cfg = gather_config(args)
        assert cfg["spec"] == "kron"

    def test_bad_config_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense_key = 1\n")
        code = main(["train", "--config", str(bad)])
        assert code == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err


class TestCommands:
    def test_train_stats_eval_in_process(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert main(["train", "--config", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "clean accuracy" in out
        assert (tmp_path / "samples" / "member-0.smwt").exists()

        assert main(["stats", "--config", str(path)]) == EXIT_OK
        assert main(["eval", "--config", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "report:" in out
        assert (tmp_path / "out" / "eval.csv").exists()
        assert (tmp_path / "out" / "eval.json").exists()

    def test_eval_without_stats_exits_config(self, tmp_path, capsys):
        path = write_config(tmp_path, samples=str(tmp_path / "missing"))
        with pytest.raises(SystemExit) as err:
            main(["eval", "--config", str(path)])
        assert err.value.code == EXIT_CONFIG

    def test_numeric_failure_exits_3(self, tmp_path, capsys):
        from shiftmatch.cli import EXIT_NUMERIC

        path = write_config(tmp_path, graph="lenet-s", classes=10, spec="full",
                            placement="input-only", eps=0.0, methods="shiftmatch")
        assert main(["train", "--config", str(path)]) == EXIT_OK
        assert main(["stats", "--config", str(path)]) == EXIT_OK
        with pytest.raises(SystemExit) as err:
            main(["eval", "--config", str(path)])
        assert err.value.code == EXIT_NUMERIC
        message = capsys.readouterr().err
        assert "grid cell" in message and "eps" in message

    def test_theory_exit_code(self, tmp_path, capsys):
        # 15k samples keep the empirical rows under their 5% gate (the
        # acceptance suite runs the full 50k)
        path = write_config(tmp_path, theory_samples=15000, out=str(tmp_path / "th"))
        code = main(["theory", "--config", str(path)])
        captured = capsys.readouterr().out
        assert "population" in captured and "empirical" in captured
        assert code == EXIT_OK
        assert (tmp_path / "th" / "theory.csv").exists()

    def test_theory_threshold_failure_exits_4(self, tmp_path, capsys):
        # far too few samples: empirical rows exceed 5%
        from shiftmatch.cli import EXIT_THRESHOLD

        path = write_config(tmp_path, theory_samples=800, out=str(tmp_path / "th2"))
        code = main(["theory", "--config", str(path)])
        assert code == EXIT_THRESHOLD
        assert "threshold exceeded" in capsys.readouterr().err
