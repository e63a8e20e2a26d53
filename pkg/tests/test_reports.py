import numpy as np
import pytest

from avsel.evaluation import EvalReport
from avsel.reports import comparison_rows, emit_plot_data, read_series, relative_improvement, render_table

# Published frame accuracy (SS, attention) per noise and track count, and WER at 4 tracks.
PUBLISHED_ACCURACY = {
    "clean": {2: (0.99, 0.93), 4: (0.97, 0.85), 8: (0.95, 0.77)},
    "snr20": {2: (0.99, 0.93), 4: (0.97, 0.85), 8: (0.95, 0.77)},
    "snr10": {2: (0.98, 0.91), 4: (0.96, 0.83), 8: (0.94, 0.74)},
    "snr0": {2: (0.95, 0.86), 4: (0.90, 0.75), 8: (0.83, 0.63)},
}
PUBLISHED_WER_4 = {"snr10": (19.8, 17.6), "snr0": (42.8, 29.6)}


def test_relative_improvement_example():
    assert relative_improvement(19.8, 17.6) == pytest.approx(11.1, abs=0.05)


def test_published_relative_improvements():
    # quoted as roughly 12% and 30%
    assert relative_improvement(*PUBLISHED_WER_4["snr10"]) == pytest.approx(12, abs=1)
    assert relative_improvement(*PUBLISHED_WER_4["snr0"]) == pytest.approx(30, abs=1)


def test_published_accuracy_follows_monotone_pattern():
    noises = list(PUBLISHED_ACCURACY)
    for k in (0, 1):
        for n in noises:
            vals = [PUBLISHED_ACCURACY[n][t][k] for t in (2, 4, 8)]
            assert all(b <= a + 0.02 for a, b in zip(vals, vals[1:]))
        for t in (2, 4, 8):
            vals = [PUBLISHED_ACCURACY[n][t][k] for n in noises]
            assert all(b <= a + 0.02 for a, b in zip(vals, vals[1:]))
            assert PUBLISHED_ACCURACY["clean"][t][0] >= PUBLISHED_ACCURACY["clean"][t][1]


def _wer_report():
    rep = EvalReport(metadata={"seed": 0})
    for n, (audio, e2e) in PUBLISHED_WER_4.items():
        rep.add("synthetic", n, 4, "audio", "wer", audio)
        rep.add("synthetic", n, 4, "e2e", "wer", e2e)
    return rep


def test_table2_layout():
    text = render_table(_wer_report(), "table2")
    lines = text.splitlines()
    assert lines[0].split() == ["dataset", "noise", "tracks", "audio", "e2e", "e2e", "rel%"]
    assert "11.1" in lines[2] and "30.8" in lines[3]
    assert len({len(l) for l in lines[:2]}) == 1
    assert render_table(_wer_report(), "table2") == text


def test_single_cell_table():
    rep = EvalReport()
    rep.add("synthetic", "clean", 2, "ss", "accuracy", 0.9876)
    lines = render_table(rep, "table1").splitlines()
    assert len(lines) == 3 and lines[2].split() == ["synthetic", "clean", "2", "0.988"]


def test_incomplete_grid_rejected():
    rep = _wer_report()
    rep.add("synthetic", "clean", 4, "audio", "wer", 10.0)
    with pytest.raises(ValueError, match="missing"):
        render_table(rep, "table2")
    with pytest.raises(ValueError):
        render_table(rep, "table3")


def test_comparison_rows_are_relative_to_audio():
    _, rows = comparison_rows(_wer_report(), "wer")
    assert rows[0].improvement["e2e"] == pytest.approx(relative_improvement(19.8, 17.6))


def test_plot_series_files(tmp_path):
    rep = EvalReport()
    rng = np.random.default_rng(0)
    for n in ("clean", "snr20", "snr10", "snr0"):
        for s in ("ss", "e2e"):
            for t in (8, 2, 4):
                rep.add("synthetic", n, t, s, "accuracy", float(rng.uniform()))
    paths = emit_plot_data(rep, tmp_path)
    assert len(paths) == 8
    for p in paths:
        head = p.read_text().splitlines()[0]
        assert head.startswith("#")
        metric, noise, system = p.stem.split("_")
        pts = read_series(p)
        assert [x for x, _ in pts] == [2, 4, 8]
        assert [y for _, y in pts] == [rep.get(noise, x, system, metric) for x, _ in pts]
