"""Figure assembly and the rendering CLI: layout, series fidelity, outputs."""

import numpy as np
import pytest

from icl_plots.cli import main
from icl_plots.figures import FigureSpec, build_figure, render_curves, series_on_axes
from test_reports import ROWS, write_csv, write_json

import matplotlib.pyplot as plt

SYSTEMS = ("poly", "tanh", "logistic", "duffing", "vdp", "lorenz")
ARCHS = ("transformer", "transformer_blockwise", "hyena", "ssm")


@pytest.fixture(autouse=True)
def _close_figures():
    yield
    plt.close("all")


def _dynamics_reports(tmp_path):
    paths = []
    for i, system in enumerate(SYSTEMS):
        rows = [(k, 0.5 / (k + i), 0.01, 1.0, 0.2, 0.5, 0.8) for k in (1, 5, 13, 26)]
        meta = {"family": f"dynamics/{system}", "arch": "transformer",
                "ood_kind": "in-distribution"}
        paths.append(write_json(tmp_path / f"report_{system}.json", rows, metadata=meta))
    return [str(p) for p in paths]


def _linear_reports(tmp_path):
    paths = []
    for i, arch in enumerate(ARCHS):
        rows = [(k, 1.0 / (k + 1 + i), 0.02, 1.0, 0.1, 0.4, 0.7) for k in (1, 3, 7, 11)]
        meta = {"family": "linear", "arch": arch, "ood_kind": "in-distribution"}
        paths.append(write_json(tmp_path / f"report_linear_{arch}.json", rows, metadata=meta))
    return [str(p) for p in paths]


class TestFigureSpec:
    def test_reports_parse_at_construction(self, tmp_path):
        path = write_csv(tmp_path / "r.csv", ROWS)
        spec = FigureSpec(report_paths=(str(path),), rows=1, cols=1)
        assert spec.reports[0].k.tolist() == [1, 5, 11]

    def test_missing_report_fails_construction(self, tmp_path):
        from icl_plots.reports import SchemaError

        with pytest.raises(SchemaError, match="cannot read"):
            FigureSpec(report_paths=(str(tmp_path / "gone.csv"),), rows=1, cols=1)

    def test_layout_must_fit(self, tmp_path):
        paths = tuple(
            str(write_csv(tmp_path / f"r{i}.csv", ROWS)) for i in range(3)
        )
        with pytest.raises(ValueError, match="do not fit"):
            FigureSpec(report_paths=paths, rows=1, cols=2)

    def test_titles_length_checked(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        with pytest.raises(ValueError, match="titles"):
            FigureSpec(report_paths=(path,), rows=1, cols=1, titles=("a", "b"))

    def test_unknown_baseline(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        with pytest.raises(ValueError, match="unknown baseline"):
            FigureSpec(report_paths=(path,), rows=1, cols=1, baselines=("ridge",))

    def test_empty_paths(self):
        with pytest.raises(ValueError, match="at least one"):
            FigureSpec(report_paths=(), rows=1, cols=1)


class TestBuildFigure:
    def test_single_panel_has_model_and_zero_curves(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        spec = FigureSpec(report_paths=(path,), rows=1, cols=1, baselines=("zero",))
        _, axes = build_figure(spec)
        assert len(axes) == 1
        assert len(axes[0].lines) == 2  # model + zero

    def test_plotted_series_equal_file_values(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        spec = FigureSpec(
            report_paths=(path,), rows=1, cols=1,
            baselines=("zero", "least_squares", "knn3", "averaging"),
        )
        _, axes = build_figure(spec)
        got = series_on_axes(axes[0])
        file_rows = np.array(ROWS, dtype=float)
        np.testing.assert_array_equal(got["model"], file_rows[:, 1])
        np.testing.assert_array_equal(got["zero"], file_rows[:, 3])
        np.testing.assert_array_equal(got["least squares"], file_rows[:, 4])
        np.testing.assert_array_equal(got["3-NN"], file_rows[:, 5])
        np.testing.assert_array_equal(got["averaging"], file_rows[:, 6])
        for line in axes[0].lines:
            np.testing.assert_array_equal(line.get_xdata(), file_rows[:, 0])

    def test_stderr_band_present(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        spec = FigureSpec(report_paths=(path,), rows=1, cols=1)
        _, axes = build_figure(spec)
        assert len(axes[0].collections) == 1  # the fill_between band

    def test_logy_switches_scale(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        for logy, scale in ((False, "linear"), (True, "log")):
            spec = FigureSpec(report_paths=(path,), rows=1, cols=1, logy=logy)
            _, axes = build_figure(spec)
            assert axes[0].get_yscale() == scale

    def test_six_panel_dynamics_grid(self, tmp_path):
        spec = FigureSpec(report_paths=tuple(_dynamics_reports(tmp_path)), rows=2, cols=3)
        fig, axes = build_figure(spec)
        assert len(axes) == 6
        assert [ax.get_title() for ax in axes] == [f"dynamics/{s}" for s in SYSTEMS]
        assert len(fig.axes) == 6

    def test_four_architecture_legend_labels(self, tmp_path):
        spec = FigureSpec(
            report_paths=tuple(_linear_reports(tmp_path)), rows=2, cols=2,
            baselines=(),
        )
        _, axes = build_figure(spec)
        labels = [ax.get_legend().get_texts()[0].get_text() for ax in axes]
        assert labels == list(ARCHS)

    def test_unused_panels_are_switched_off(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        spec = FigureSpec(report_paths=(path,), rows=2, cols=2)
        fig, _ = build_figure(spec)
        visible = [ax for ax in fig.axes if ax.axison]
        assert len(visible) == 1


class TestRenderCurves:
    def test_writes_png_and_svg(self, tmp_path):
        path = str(write_csv(tmp_path / "r.csv", ROWS))
        spec = FigureSpec(report_paths=(path,), rows=1, cols=1, name="panel")
        written = render_curves(spec, str(tmp_path))
        assert [p.rsplit(".", 1)[1] for p in written] == ["png", "svg"]
        for p in written:
            assert (tmp_path / p.rsplit("/", 1)[1]).stat().st_size > 0

    def test_rerender_is_deterministic(self, tmp_path):
        paths = tuple(_dynamics_reports(tmp_path))
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        out_a.mkdir()
        out_b.mkdir()
        spec = FigureSpec(report_paths=paths, rows=2, cols=3, name="grid")
        render_curves(spec, str(out_a))
        render_curves(FigureSpec(report_paths=paths, rows=2, cols=3, name="grid"),
                      str(out_b))
        assert (out_a / "grid.png").read_bytes() == (out_b / "grid.png").read_bytes()
        assert (out_a / "grid.svg").read_bytes() == (out_b / "grid.svg").read_bytes()

    def test_empty_k_range_writes_nothing(self, tmp_path):
        from icl_plots.reports import SchemaError

        bad = tmp_path / "empty.csv"
        bad.write_text("k,model_mse,model_stderr,zero_mse,lsq_mse,knn3_mse,avg_mse\n")
        out = tmp_path / "out"
        out.mkdir()
        with pytest.raises(SchemaError, match="no rows"):
            render_curves(
                FigureSpec(report_paths=(str(bad),), rows=1, cols=1), str(out)
            )
        assert list(out.iterdir()) == []


class TestCLI:
    def test_glob_expansion_and_layout(self, tmp_path, capsys):
        _dynamics_reports(tmp_path)
        out = tmp_path / "figs"
        code = main(
            [str(tmp_path / "report_*.json"), "--layout", "2x3",
             "--out-dir", str(out), "--name", "dynamics", "--logy"]
        )
        assert code == 0
        assert (out / "dynamics.png").exists() and (out / "dynamics.svg").exists()
        assert "wrote" in capsys.readouterr().out

    def test_default_layout_caps_columns(self, tmp_path):
        _linear_reports(tmp_path)
        out = tmp_path / "figs"
        code = main([str(tmp_path / "report_linear_*.json"), "--out-dir", str(out)])
        assert code == 0  # 4 reports -> 2x3 grid fits

    def test_unmatched_glob(self, tmp_path, capsys):
        assert main([str(tmp_path / "nothing_*.csv")]) == 2
        assert "no reports match" in capsys.readouterr().err

    def test_schema_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("wrong,header\n")
        assert main([str(bad), "--out-dir", str(tmp_path)]) == 2
        assert "column 1" in capsys.readouterr().err

    def test_bad_layout_string(self, tmp_path, capsys):
        path = write_csv(tmp_path / "r.csv", ROWS)
        assert main([str(path), "--layout", "two-by-three"]) == 2
        assert "ROWSxCOLS" in capsys.readouterr().err

    def test_baseline_toggle_list(self, tmp_path):
        path = write_csv(tmp_path / "r.csv", ROWS)
        out = tmp_path / "figs"
        code = main(
            [str(path), "--baselines", "zero,knn3,averaging", "--out-dir", str(out)]
        )
        assert code == 0
