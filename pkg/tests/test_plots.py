import numpy as np
import pytest

from stun.plots import plot_report, pr_curve_plot, reliability_diagram, removal_curve_plot

REPORT = {
    "method": "stun",
    "label": "STUN",
    "ap": 0.8,
    "pr_curve": {"recall": [0.5, 0.5, 1.0], "precision": [1.0, 0.5, 0.6667]},
    "ece": {"ap": {"confidence": [0.9, 0.5, 0.0], "values": [1.0, 0.7, 0.2], "ece": 0.1}},
    "removal_curve": {"fractions": [0.0, 0.5], "correctness": [0.7, 0.9]},
}


def test_plots_draw_report_arrays(tmp_path):
    drawn = plot_report(REPORT, tmp_path)
    assert sorted(drawn) == ["pr_curve.png", "reliability.png", "removal_curve.png"]
    assert drawn["reliability.png"] == {"x": [0.9, 0.5, 0.0], "y": [1.0, 0.7, 0.2]}
    assert drawn["pr_curve.png"] == {"x": REPORT["pr_curve"]["recall"], "y": REPORT["pr_curve"]["precision"]}
    assert drawn["removal_curve.png"] == {"x": [0.0, 0.5], "y": [0.7, 0.9]}
    for name in drawn:
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert not list(tmp_path.glob("*.tmp*"))


def test_variance_free_report_skips_uncertainty_plots(tmp_path):
    rep = dict(REPORT, ece=None, removal_curve=None)
    assert sorted(plot_report(rep, tmp_path)) == ["pr_curve.png"]
    with pytest.raises(ValueError):
        reliability_diagram(rep, tmp_path / "r.png")
    with pytest.raises(ValueError):
        removal_curve_plot(rep, tmp_path / "c.png")


def test_png_bytes_stable(tmp_path):
    a = pr_curve_plot(REPORT, tmp_path / "a.png")
    b = pr_curve_plot(REPORT, tmp_path / "b.png")
    assert a == b
    assert np.array_equal(np.frombuffer((tmp_path / "a.png").read_bytes(), np.uint8),
                          np.frombuffer((tmp_path / "b.png").read_bytes(), np.uint8))
