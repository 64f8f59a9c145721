from ksprecon.detection import FN, TP, EvaluationReport
from ksprecon.plotting import sensitivity_figure, ssim_group_figure


def _report(method, rate, sens, outcomes):
    slices = [{"slice": i, "outcome": o, "ssim": 0.5 + 0.1 * i} for i, o in enumerate(outcomes)]
    return EvaluationReport(method, rate, 0, 0, 0, sens, slices)


def test_figures_written(tmp_path):
    reps = [_report("zero_fill", 4.0, 0.5, [TP, FN, TP]), _report("cg_sense", 8.0, None, [FN])]
    for path in (ssim_group_figure(reps, tmp_path / "g.png"), sensitivity_figure(reps, tmp_path / "s.png")):
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_figures_with_no_data(tmp_path):
    rep = _report("zero_fill", None, None, [])
    assert ssim_group_figure([rep], tmp_path / "g.png").exists()
    assert sensitivity_figure([rep], tmp_path / "s.png").exists()
