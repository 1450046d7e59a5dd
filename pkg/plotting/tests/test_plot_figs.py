import subprocess
from importlib.resources import files

import numpy as np
import pytest

from plot_figs import PlotDataError, load_csv, render
from plot_figs.cli import main

SAMPLES = files("plot_figs") / "samples"


def sample(name):
    return str(SAMPLES / name)


class TestLoadCsv:
    def test_reads_columns_and_skips_metadata(self):
        table = load_csv(sample("fig5.csv"))
        assert "ratio" in table and "p4" in table
        assert np.all(np.diff(table["ratio"]) > 0)

    def test_empty_file_diagnostic(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("# only metadata\n")
        with pytest.raises(PlotDataError, match="empty.csv.*no data"):
            load_csv(path)

    def test_header_only_diagnostic(self, tmp_path):
        path = tmp_path / "bare.csv"
        path.write_text("t,p4\n")
        with pytest.raises(PlotDataError, match="no data rows"):
            load_csv(path)

    def test_ragged_row_diagnostic(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("t,p4\n0.0,1.0,2.0\n")
        with pytest.raises(PlotDataError, match="row width"):
            load_csv(path)


class TestRender:
    @pytest.mark.parametrize("fig,csv", [
        ("1", "fig1.csv"), ("3", "fig3.csv"), ("4", "fig4.csv"),
        ("5", "fig5.csv"), ("6", "fig6.csv"),
    ])
    def test_each_figure_renders(self, fig, csv, tmp_path):
        out = tmp_path / f"fig{fig}.png"
        render(fig, [sample(csv)], out)
        assert out.stat().st_size > 0
        assert out.read_bytes()[:4] == b"\x89PNG"

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        render("5", [sample("fig5.csv")], a)
        render("5", [sample("fig5.csv")], b)
        assert a.read_bytes() == b.read_bytes()

    def test_missing_column_names_column_and_file(self, tmp_path):
        path = tmp_path / "sweep.csv"
        path.write_text("ratio,p4\n1.0,0.5\n2.0,0.6\n")
        with pytest.raises(PlotDataError, match="sweep.csv.*'p3'"):
            render("5", [path], tmp_path / "out.png")

    def test_missing_series_names_column_and_file(self, tmp_path):
        path = tmp_path / "series.csv"
        path.write_text("t,p4_g0.5\n0.0,1.0\n1.0,0.5\n")
        with pytest.raises(PlotDataError, match=r"'p1_g<gamma>'.*series.csv"):
            render("3", [path], tmp_path / "out.png")

    def test_unknown_figure_id(self, tmp_path):
        with pytest.raises(PlotDataError, match="unknown figure id"):
            render("2", [sample("fig1.csv")], tmp_path / "out.png")


class TestCli:
    def test_success_exit_0(self, tmp_path):
        out = tmp_path / "fig6.png"
        assert main(["6", "--in", sample("fig6.csv"), "--out", str(out)]) == 0
        assert out.stat().st_size > 0

    def test_missing_file_exit_1(self, tmp_path, capsys):
        code = main(["5", "--in", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o.png")])
        assert code == 1
        assert "nope.csv" in capsys.readouterr().err

    def test_missing_column_exit_2(self, tmp_path, capsys):
        path = tmp_path / "sweep.csv"
        path.write_text("ratio,p4\n1.0,0.5\n")
        code = main(["5", "--in", str(path), "--out", str(tmp_path / "o.png")])
        assert code == 2
        err = capsys.readouterr().err
        assert "p3" in err and "sweep.csv" in err

    def test_console_script(self, tmp_path):
        out = tmp_path / "fig1.png"
        proc = subprocess.run(
            ["plot_figs", "1", "--in", sample("fig1.csv"),
             "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert out.stat().st_size > 0
