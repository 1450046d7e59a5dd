import subprocess
import sys
from importlib.resources import files

import numpy as np
import pytest

from nmqsim import cli
from nmqsim.config import (
    ConfigError,
    build_grid,
    build_kernels,
    build_model,
    initial_state,
    parse_config,
    to_text,
)

SHIPPED = ("fig1", "fig3", "fig4", "fig5", "fig6")


def shipped_text(name):
    return (files("nmqsim") / "configs" / f"{name}.cfg").read_text()


SMALL_EVOLVE = """
[model]
type = cascade
omega = 1, 2, 3, 4
kappa = 1, 1, 1

[kernel]
type = ou
gamma = 0.5

[grid]
dt = 0.05
t_max = 1

[initial]
state = 0.5, 0.5, 0.5, 0.5

[run]
mode = evolve
observables = p1, p2, p3, p4, abs_rho14
seed = 3
"""

SMALL_COMPARE = """
[model]
type = cascade
omega = 1, 2, 3, 4
kappa = 1, 1, 1

[kernel]
type = ou
gamma = 50

[grid]
dt = 0.002
t_max = 1

[initial]
state = 0.5, 0.5, 0.5, 0.5

[run]
mode = compare

[hierarchy]
max_order = 0

[compare]
oracle = lindblad
tolerance = 0.02
"""


class TestParsing:
    @pytest.mark.parametrize("name", SHIPPED)
    def test_shipped_configs_roundtrip(self, name):
        cfg = parse_config(shipped_text(name))
        assert parse_config(to_text(cfg)) == cfg

    def test_zero_dt_diagnostic(self):
        text = SMALL_EVOLVE.replace("dt = 0.05", "dt = 0")
        with pytest.raises(ConfigError, match=r"\[grid\] dt must be positive"):
            parse_config(text)

    def test_unknown_key_has_line_number(self):
        text = SMALL_EVOLVE + "\n[grid]\n" if False else SMALL_EVOLVE.replace(
            "t_max = 1", "t_max = 1\nnonsense = 3")
        with pytest.raises(ConfigError, match="unknown key 'nonsense'") as err:
            parse_config(text)
        assert any(ln > 0 for ln, _ in err.value.diagnostics)

    def test_duplicate_key_rejected(self):
        text = SMALL_EVOLVE.replace("t_max = 1", "t_max = 1\nt_max = 2")
        with pytest.raises(ConfigError, match="duplicate key"):
            parse_config(text)

    def test_missing_section_rejected(self):
        text = SMALL_EVOLVE.replace("[kernel]\ntype = ou\ngamma = 0.5\n", "")
        with pytest.raises(ConfigError, match=r"missing section \[kernel\]"):
            parse_config(text)

    def test_bad_observable_rejected(self):
        text = SMALL_EVOLVE.replace("abs_rho14", "banana")
        with pytest.raises(ConfigError, match="p<m> or abs_rho<j><k>"):
            parse_config(text)

    def test_sweep_mode_needs_sweep_section(self):
        text = SMALL_EVOLVE.replace("mode = evolve", "mode = sweep")
        with pytest.raises(ConfigError, match="needs a"):
            parse_config(text)

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match=r"unknown section \[extra\]"):
            parse_config(SMALL_EVOLVE + "\n[extra]\nx = 1\n")


class TestBuilders:
    def test_build_cascade_model(self):
        cfg = parse_config(SMALL_EVOLVE)
        model = build_model(cfg)
        assert model.dim == 4 and model.drives == ()

    def test_ratio_override(self):
        cfg = parse_config(shipped_text("fig5"))
        model = build_model(cfg, ratio=2.5)
        assert model.drives[1].amplitude == pytest.approx(2.5 * 5.0)

    def test_kernel_list_per_gamma(self):
        cfg = parse_config(shipped_text("fig1"))
        ks = build_kernels(cfg)
        assert [k.gamma for k in ks] == [0.2, 0.5, 2.0]

    def test_grid_steps(self):
        cfg = parse_config(SMALL_EVOLVE)
        grid = build_grid(cfg)
        assert grid.n_steps == 20

    def test_initial_state_label_and_amplitudes(self):
        cfg = parse_config(shipped_text("fig3"))
        psi = initial_state(cfg, 4)
        assert np.allclose(psi, [0, 0, 0, 1])
        cfg = parse_config(SMALL_EVOLVE)
        psi = initial_state(cfg, 4)
        assert np.allclose(psi, 0.5)

    def test_initial_state_label_out_of_range(self):
        cfg = parse_config(shipped_text("fig3"))
        with pytest.raises(ConfigError):
            initial_state(cfg, 2)


def run_cli(args):
    return cli.main(list(args))


class TestCli:
    def test_run_writes_valid_csv(self, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text(SMALL_EVOLVE)
        out = tmp_path / "out.csv"
        assert run_cli(["run", str(cfgfile), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# nmqsim ")
        header = next(l for l in lines if not l.startswith("#"))
        assert header.split(",") == ["t", "p1", "p2", "p3", "p4", "abs_rho14"]
        data = np.array([[float(v) for v in l.split(",")]
                         for l in lines if not l.startswith("#")
                         and not l.startswith("t,")])
        pops = data[:, 1:5]
        assert np.all(pops > -1e-6) and np.all(pops < 1 + 1e-6)
        assert np.max(np.abs(pops.sum(axis=1) - 1.0)) < 1e-6

    def test_byte_identical_rerun(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "run.cfg").write_text(SMALL_EVOLVE)
        assert run_cli(["run", "run.cfg", "--out", "out.csv"]) == 0
        first = (tmp_path / "out.csv").read_bytes()
        assert run_cli(["run", "run.cfg", "--out", "out.csv"]) == 0
        assert (tmp_path / "out.csv").read_bytes() == first

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        cfgfile = tmp_path / "bad.cfg"
        cfgfile.write_text(SMALL_EVOLVE.replace("dt = 0.05", "dt = 0"))
        assert run_cli(["run", str(cfgfile)]) == 2
        assert "dt must be positive" in capsys.readouterr().err

    def test_mode_mismatch_exits_2(self, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text(SMALL_EVOLVE)
        assert run_cli(["sweep", str(cfgfile)]) == 2

    def test_missing_file_exits_1(self, capsys):
        assert run_cli(["run", "/nonexistent/xx.cfg"]) == 1

    def test_compare_lindblad_passes(self, tmp_path, capsys):
        cfgfile = tmp_path / "cmp.cfg"
        cfgfile.write_text(SMALL_COMPARE)
        out = tmp_path / "cmp.csv"
        assert run_cli(["compare", str(cfgfile), "--out", str(out)]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_compare_failure_exits_2(self, tmp_path, capsys):
        cfgfile = tmp_path / "cmp.cfg"
        cfgfile.write_text(SMALL_COMPARE.replace("gamma = 50", "gamma = 0.5"))
        out = tmp_path / "cmp.csv"
        assert run_cli(["compare", str(cfgfile), "--out", str(out)]) == 2
        assert "FAIL" in capsys.readouterr().out

    def test_console_script_exists(self):
        proc = subprocess.run(["nmqsim", "--help"], capture_output=True,
                              text=True)
        assert proc.returncode == 0
        assert "figure" in proc.stdout
