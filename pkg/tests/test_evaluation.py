import numpy as np
import pytest
from hypothesis import given, strategies as st

from avsel import corpus as C
from avsel.evaluation import (EvalReport, GridRunner, SelectionTrace, corpus_wer, merge_reports, run_grid,
                              top1_frame_accuracy, word_error_rate)
from avsel.models import AVModel, ModelConfig


def test_accuracy_examples():
    assert top1_frame_accuracy([SelectionTrace("a", [1, 1, 0], [1, 1, 0])]) == 1.0
    sel = np.r_[np.zeros(93), np.ones(7)]
    assert top1_frame_accuracy([SelectionTrace("a", sel[:40], np.zeros(40)),
                                SelectionTrace("b", sel[40:], np.zeros(60))]) == pytest.approx(0.93)
    with pytest.raises(ValueError):
        SelectionTrace("a", [0, 1], [0])
    with pytest.raises(ValueError):
        top1_frame_accuracy([])


@pytest.mark.parametrize("n", [2, 4, 8])
def test_random_selector_scores_chance(n):
    rng = np.random.default_rng(n)
    traces = [SelectionTrace(str(i), rng.integers(0, n, 100), np.full(100, rng.integers(0, n)))
              for i in range(120)]
    assert abs(top1_frame_accuracy(traces) - 1 / n) < 0.02


def test_wer_examples():
    assert word_error_rate("a b c", "a b c") == 0.0
    assert word_error_rate("a c", "a b c") == pytest.approx(1 / 3)
    assert word_error_rate("x y", "a") == 2.0
    assert word_error_rate("Hello World", "hello world") == 0.0
    with pytest.raises(ValueError):
        word_error_rate("a", "")
    assert corpus_wer([("a b", "a b"), ("x", "a b")]) == pytest.approx(2 / 4)


words = st.lists(st.sampled_from(["a", "b", "it's", "cat"]), min_size=1, max_size=6)


@given(words)
def test_wer_of_identity_is_zero(ref):
    assert word_error_rate(" ".join(ref), " ".join(ref)) == 0.0


@given(words, words)
def test_wer_symmetric_for_pure_substitutions(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    # edit distance is symmetric, so equal lengths share the normalizer
    assert word_error_rate(" ".join(a), " ".join(b)) == word_error_rate(" ".join(b), " ".join(a))


def test_wer_asymmetric_for_length_changes():
    assert word_error_rate("a b c", "a") != word_error_rate("a", "a b c")


def test_report_roundtrip_and_cells():
    rep = EvalReport(metadata={"seed": 1})
    rep.add("synthetic", "clean", 2, "ss", "accuracy", 0.9)
    with pytest.raises(ValueError):
        rep.add("synthetic", "clean", 2, "ss", "accuracy", 0.8)
    back = EvalReport.from_jsonl(rep.to_jsonl())
    assert back.to_jsonl() == rep.to_jsonl()
    assert back.get("clean", 2, "ss", "accuracy") == 0.9
    rep.check_complete([("synthetic", "clean", 2, "ss", "accuracy")])
    with pytest.raises(ValueError, match="missing"):
        rep.check_complete([("synthetic", "snr0", 2, "ss", "accuracy")])


def test_merge_refuses_mixed_digests():
    a = EvalReport(metadata={"digest/e2e": "x"})
    b = EvalReport(metadata={"digest/e2e": "y"})
    with pytest.raises(ValueError, match="digest"):
        merge_reports([a, b])


@pytest.fixture(scope="module")
def tiny_grid():
    cfg = C.SynthConfig(image_size=16)
    base = C.generate_corpus(6, 77, cfg)
    mc = ModelConfig(image_size=16)
    models = {s: AVModel(s, mc, seed=i) for i, s in enumerate(("ss", "av", "audio", "e2e"))}
    return models, base, C.BabbleBank(3, 4.0, cfg)


def test_grid_complete_and_deterministic(tiny_grid):
    models, base, bank = tiny_grid
    conds = [C.ConditionSpec(n, t, 5) for n in ("clean", "snr0") for t in (2, 4)]
    rep = run_grid(models, base, conds, bank, 5, ("ss", "e2e"), ("audio", "oracle", "two-step", "e2e"))
    cells = [("synthetic", c.noise, c.tracks, s, "accuracy") for c in conds for s in ("ss", "e2e")]
    cells += [("synthetic", c.noise, c.tracks, s, "wer") for c in conds for s in ("audio", "oracle", "two-step", "e2e")]
    rep.check_complete(cells)
    assert len(rep.rows) == len(cells)
    again = run_grid(models, base, conds, bank, 5, ("ss", "e2e"), ("audio", "oracle", "two-step", "e2e"))
    assert again.to_jsonl() == rep.to_jsonl()


def test_single_cell_report(tiny_grid):
    models, base, bank = tiny_grid
    rep = run_grid({"ss": models["ss"]}, base, [C.ConditionSpec("clean", 2, 1)], bank, 1, ("ss",))
    assert len(rep.rows) == 1


def test_grid_names_missing_checkpoints(tiny_grid):
    models, base, bank = tiny_grid
    with pytest.raises(ValueError, match="av"):
        run_grid({"ss": models["ss"]}, base, [C.ConditionSpec("clean", 2, 1)], bank, 1, (), ("two-step",))


def test_layout_hides_ground_truth_position(tiny_grid):
    models, base, bank = tiny_grid
    runner = GridRunner(models, base, bank, seed=3)
    positions = []
    for i in range(len(base)):
        sources, gt = runner.layout(i, 4)
        assert sources[gt] == i
        assert sorted(sources) == sorted([i] + C.draw_distractors(len(base), i, 4, 3))
        positions.append(gt)
    assert len(set(positions)) > 1


def test_always_first_selector_scores_chance():
    # a selector that ignores content and always answers 0 lands near 1/N after the layout permutation
    base = [C.SynthUtterance(f"u{i}", 0, "a", np.zeros(1), np.zeros((1, 1, 1, 3)), 25.0, np.zeros(1), np.zeros(1))
            for i in range(400)]
    runner = GridRunner({}, base, None, seed=9)
    traces = [SelectionTrace(str(i), np.zeros(10, int), np.full(10, runner.layout(i, 2)[1])) for i in range(400)]
    assert abs(top1_frame_accuracy(traces) - 0.5) < 0.08


def test_e2e_with_ground_truth_track_matches_e2e_on_one_track(tiny_grid):
    models, base, bank = tiny_grid
    runner = GridRunner({"e2e": models["e2e"]}, base, bank, seed=2)
    one = C.ConditionSpec("snr10", 1, 2)
    assert runner.transcripts("e2e-oracle", one) == runner.transcripts("e2e", one)
    rep = runner.run([C.ConditionSpec("clean", 2, 2)], (), ("e2e-oracle",))
    assert rep.rows[0]["system"] == "e2e-oracle"
