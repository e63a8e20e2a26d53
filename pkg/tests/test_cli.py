import json

import numpy as np
import pytest

from avsel import autodiff as ad
from avsel import training
from avsel.cli import load_config_file, main, parse_conditions
from avsel.evaluation import EvalReport
from avsel.training import ConfigError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["corpus", "gen", "--seed", "3", "--n-utts", "8", "--image-size", "16", "--out", str(root / "base")]) == 0
    for system in ("ss", "av", "audio", "e2e"):
        assert main(["train", system, "--seed", "0", "--steps", "2", "--batch-size", "2",
                     "--manifest", str(root / "base" / "manifest.jsonl"), "--image-size", "16",
                     "--out", str(root / f"{system}.ckpt")]) == 0
    return root


def test_gen_writes_manifest(workspace):
    lines = (workspace / "base" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 8
    rec = json.loads(lines[0])
    assert (workspace / "base" / rec["audio"]).exists() and rec["gt_index"] == 0


def test_train_writes_checkpoint_and_history(workspace):
    assert (workspace / "e2e.ckpt").exists()
    meta = json.loads((workspace / "e2e.ckpt.json").read_text())
    assert meta["system"] == "e2e" and len(meta["digest"]) == 16
    hist = (workspace / "e2e.ckpt.history.jsonl").read_text().splitlines()
    assert len(hist) == 2


def test_augment_and_infer(workspace, capsys):
    base = workspace / "base" / "manifest.jsonl"
    assert main(["corpus", "augment", "--seed", "5", "--manifest", str(base), "--condition", "snr0",
                 "--tracks", "2", "--out", str(workspace / "aug")]) == 0
    aug = workspace / "aug" / "manifest_snr0_2.jsonl"
    rec = json.loads(aug.read_text().splitlines()[0])
    assert len(rec["video"]) == 2 and rec["condition"] == "snr0/2"
    ck = lambda s: str(workspace / f"{s}.ckpt")
    runs = {"e2e": ["--checkpoint", ck("e2e")],
            "two-step": ["--ss-checkpoint", ck("ss"), "--av-checkpoint", ck("av")],
            "oracle": ["--av-checkpoint", ck("av")]}
    for mode, flags in runs.items():
        out = workspace / f"infer_{mode}.jsonl"
        assert main(["infer", mode, "--manifest", str(aug), "--seed", "1", "--out", str(out)] + flags) == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 8
        assert all(sorted(r["permutation"]) == [0, 1] for r in rows)
        if mode == "oracle":
            assert all(set(r["selection"]) == {r["gt_index"]} for r in rows)


def test_eval_and_report(workspace, capsys, tmp_path):
    base = str(workspace / "base" / "manifest.jsonl")
    ck = [f"--checkpoint={s}={workspace / (s + '.ckpt')}" for s in ("ss", "av", "audio", "e2e")]
    out = tmp_path / "wer.jsonl"
    args = ["eval", "wer", "--manifest", base, "--conditions", "clean/2,snr0/2", "--seed", "4", "--out", str(out)]
    assert main(args + ck) == 0
    table = capsys.readouterr().out
    assert "rel%" in table
    first = out.read_bytes()
    assert main(args + ck) == 0
    assert out.read_bytes() == first
    rep = EvalReport.from_jsonl(first.decode())
    assert len(rep.rows) == 8
    assert all(rep.metadata[f"digest/{s}"] for s in ("ss", "av", "audio", "e2e"))
    acc = tmp_path / "acc.jsonl"
    assert main(["eval", "accuracy", "--manifest", base, "--conditions", "clean/2", "--seed", "4",
                 "--out", str(acc)] + ck) == 0
    capsys.readouterr()
    assert main(["report", "table", "--report", str(out), "--layout", "table2"]) == 0
    assert capsys.readouterr().out.splitlines()[0].startswith("dataset")
    assert main(["report", "plot", "--report", str(acc), "--out", str(tmp_path / "plots")]) == 0
    assert len(list((tmp_path / "plots").glob("*.dat"))) == 2


def test_config_file_and_overrides(workspace, tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("steps: 1\nbatch_size: 2\nmodel:\n  image_size: 16\ndata:\n  manifest: %s\n"
                   % (workspace / "base" / "manifest.jsonl"))
    flat = load_config_file(cfg)
    assert flat["model.image_size"] == 16
    out = tmp_path / "m.ckpt"
    assert main(["--config", str(cfg), "train", "ss", "--seed", "1", "--set", "clip_norm=0.2",
                 "--out", str(out)]) == 0
    meta = json.loads((tmp_path / "m.ckpt.json").read_text())
    assert meta["run_config"]["clip_norm"] == 0.2 and meta["run_config"]["steps"] == 1


def test_parse_conditions():
    specs = parse_conditions("clean/2, snr0/8", 3)
    assert [s.tag for s in specs] == ["clean/2", "snr0/8"]
    with pytest.raises(ConfigError):
        parse_conditions("snr5/2", 0)


def test_exit_code_config_errors(tmp_path, capsys):
    assert main(["train", "ss"]) == 2
    assert main(["train", "ss", "--seed", "1", "--set", "nonsense=3"]) == 2
    assert main(["corpus", "gen", "--n-utts", "3"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a\n- b\n")
    assert main(["--config", str(bad), "report", "table", "--report", "x"]) == 2
    assert main(["eval", "wer", "--manifest", "m.jsonl", "--seed", "1"]) == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_data_errors(tmp_path, workspace):
    assert main(["train", "ss", "--seed", "1", "--manifest", str(tmp_path / "missing.jsonl")]) == 3
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{oops\n")
    assert main(["corpus", "augment", "--seed", "1", "--manifest", str(broken)]) == 3
    assert main(["report", "table", "--report", str(tmp_path / "none.jsonl")]) == 3
    assert main(["infer", "e2e", "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--manifest", str(workspace / "base" / "manifest.jsonl")]) == 3


def test_exit_code_numeric_failure(workspace, monkeypatch):
    monkeypatch.setattr(training, "step_loss", lambda m, b, r: (ad.Tensor(np.float32(np.nan)), {}))
    assert main(["train", "audio", "--seed", "1", "--steps", "1", "--batch-size", "2", "--image-size", "16",
                 "--manifest", str(workspace / "base" / "manifest.jsonl"),
                 "--out", str(workspace / "nan.ckpt")]) == 4
