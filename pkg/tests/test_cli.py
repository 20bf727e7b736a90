import csv
import json
import stat

import pytest

from robocoord import cli, config
from robocoord.errors import ConfigError

DEFAULT = config.default_config_text()


@pytest.fixture
def cfg_file(tmp_path):
    def write(text=DEFAULT, name="cfg.ini"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return write


def header(path):
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh)))


@pytest.fixture(scope="module")
def robust_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("robust")
    cfg = out / "cfg.ini"
    cfg.write_text(DEFAULT)
    code = cli.main(["run", "--config", str(cfg), "--out-dir", str(out / "o")])
    return code, out / "o"


class TestRun:
    def test_robust_exits_zero(self, robust_out):
        assert robust_out[0] == cli.EXIT_OK

    def test_writes_fixed_column_order(self, robust_out):
        out = robust_out[1]
        assert header(out / "trajectories.csv") == cli.TRAJECTORY_COLUMNS
        assert header(out / "tube.csv") == cli.TUBE_COLUMNS
        assert header(out / "events.csv") == cli.EVENT_COLUMNS
        m = json.loads((out / "metrics.json").read_text())
        assert m["violations"] == 0 and m["mode"] == "robust"

    def test_outputs_are_world_readable(self, robust_out):
        mode = (robust_out[1] / "metrics.json").stat().st_mode
        assert mode & stat.S_IROTH

    def test_no_temp_files_left(self, robust_out):
        assert not [p for p in robust_out[1].iterdir() if p.name.startswith(".")]

    def test_deterministic_seed_zero_exits_two(self, cfg_file, tmp_path, capsys):
        code = cli.main(["run", "--config", str(cfg_file()), "--mode", "deterministic",
                         "--out-dir", str(tmp_path / "d")])
        assert code == cli.EXIT_VIOLATION
        assert "deterministic" in capsys.readouterr().out

    def test_missing_t_h(self, cfg_file, tmp_path, capsys):
        path = cfg_file(DEFAULT.replace("t_h = 0.5\n", ""))
        code = cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "x")])
        assert code == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "t_h" in err
        assert not (tmp_path / "x").exists()

    def test_missing_file(self, tmp_path, capsys):
        assert cli.main(["run", "--config", str(tmp_path / "nope.ini")]) == cli.EXIT_CONFIG
        assert "nope.ini" in capsys.readouterr().err

    def test_sample_period_override(self, cfg_file, tmp_path):
        text = DEFAULT.replace("n_cavs = 24", "n_cavs = 2")
        out = tmp_path / "s"
        cli.main(["run", "--config", str(cfg_file(text)), "--sample-period", "0.5", "--out-dir", str(out)])
        with open(out / "trajectories.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = sorted({float(r["t"]) for r in rows if r["cav_id"] == "1"})
        assert all(abs(b - a - 0.5) < 1e-9 for a, b in zip(t, t[1:]))


class TestCheckConfig:
    def test_default_is_valid(self, cfg_file, capsys):
        assert cli.main(["check-config", "--config", str(cfg_file())]) == cli.EXIT_OK
        assert "[safety]" in capsys.readouterr().out

    def test_round_trip(self, cfg_file, capsys):
        cli.main(["check-config", "--config", str(cfg_file())])
        first = capsys.readouterr().out
        cli.main(["check-config", "--config", str(cfg_file(first, "norm.ini"))])
        assert capsys.readouterr().out == first
        a = config.parse_text(DEFAULT).scenario
        b = config.parse_text(first).scenario
        assert a == b

    def test_probability_above_one(self, cfg_file, capsys):
        path = cfg_file(DEFAULT.replace("P_e = 0.95", "P_e = 1.2"))
        assert cli.main(["check-config", "--config", str(path)]) == cli.EXIT_CONFIG
        assert "P_e" in capsys.readouterr().err

    def test_p_z_beyond_path(self, cfg_file, capsys):
        path = cfg_file(DEFAULT.replace("p_z = 50", "p_z = 500"))
        assert cli.main(["check-config", "--config", str(path)]) == cli.EXIT_CONFIG
        assert "p_z" in capsys.readouterr().err

    def test_lists_every_problem(self, cfg_file, capsys):
        text = DEFAULT.replace("P_e = 0.95", "P_e = 1.2").replace("P_f = 0.95", "P_f = 0")
        assert cli.main(["check-config", "--config", str(cfg_file(text))]) == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "P_e" in err and "P_f" in err


class TestConfigMessages:
    def line_of(self, text, needle):
        return next(i for i, line in enumerate(text.splitlines(), 1) if line.startswith(needle))

    def test_unknown_key_is_rejected_with_its_line(self):
        text = DEFAULT.replace("t_h = 0.5", "t_h = 0.5\nheadway = 1")
        with pytest.raises(ConfigError) as exc:
            config.parse_text(text, "c.ini")
        assert any(f"c.ini:{self.line_of(text, 'headway')}" in p and "headway" in p for p in exc.value.problems)

    def test_bad_value_points_at_its_line(self):
        text = DEFAULT.replace("gamma = 1.5", "gamma = wide")
        with pytest.raises(ConfigError) as exc:
            config.parse_text(text, "c.ini")
        assert any(f"c.ini:{self.line_of(text, 'gamma')}" in p for p in exc.value.problems)

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            config.parse_text(DEFAULT + "\n[extra]\nx = 1\n")

    def test_bad_conflict_entry(self):
        with pytest.raises(ConfigError):
            config.parse_text(DEFAULT.replace("c1@198.25", "c1-198.25"))

    def test_conflict_outside_path(self):
        with pytest.raises(ConfigError):
            config.parse_text(DEFAULT.replace("c1@198.25", "c1@450"))

    def test_vp_regime_enforced(self):
        with pytest.raises(ConfigError):
            config.parse_text(DEFAULT.replace("P_g = 0.95", "P_g = 0.8"))

    def test_overrides_apply(self):
        rc = config.parse_text(DEFAULT, overrides={"scenario.seed": 7, "scenario.mode": "deterministic"})
        assert rc.scenario.seed == 7 and rc.scenario.mode == "deterministic"

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            config.parse_text(DEFAULT.replace("mode = robust", "mode = cautious"))


@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = out / "cfg.ini"
    cfg.write_text(DEFAULT)
    code = cli.main(["sweep", "--config", str(cfg), "--out-dir", str(out / "o")])
    return code, out / "o", json.loads((out / "o" / "comparison.json").read_text())


class TestSweep:
    def test_exit_code(self, comparison):
        assert comparison[0] == cli.EXIT_OK

    def test_contrast(self, comparison):
        c = comparison[2]
        assert c["modes"]["robust"]["violations"] == 0
        assert c["modes"]["deterministic"]["bound_crossings"] >= 1

    def test_same_arrivals(self, comparison):
        assert comparison[2]["same_arrivals"] is True

    def test_signed_delta(self, comparison):
        c = comparison[2]
        modes = c["modes"]
        assert c["travel_time_delta"] == pytest.approx(
            modes["robust"]["mean_travel_time"] - modes["deterministic"]["mean_travel_time"])

    def test_per_mode_subdirectories(self, comparison):
        for mode in config.MODES:
            m = json.loads((comparison[1] / mode / "metrics.json").read_text())
            assert m["mode"] == mode
