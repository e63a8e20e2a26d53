"""Command line entry point: train, infer, eval, corpus and report commands.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .autodiff import NumericError
from .corpus import (BabbleBank, ConditionSpec, ManifestError, ManifestRecord, SynthConfig, augment_audio,
                     draw_distractors, generate_corpus, item_rng, read_manifest, write_manifest)
from .evaluation import ACCURACY_SYSTEMS, WER_SYSTEMS, EvalReport, GridRunner, SelectionTrace
from .fileio import FormatError, load_video, read_wav, save_video, write_wav
from .models import AVModel, infer_e2e, infer_two_step, utterance_features
from .reports import emit_plot_data, render_table
from .training import ConfigError, DataError, Item, TrainingData, preset, train
from .transducer import VOCAB
from .visual import match_length

log = logging.getLogger("avsel")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_EVAL_BABBLE_SEED = 555


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def load_config_file(path):
    """YAML (or JSON) mapping; nested mappings are flattened to dotted keys."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    flat = {}

    def walk(prefix, d):
        for k, v in d.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict) and key not in ("lr_scale",):
                walk(key + ".", v)
            else:
                flat[key] = v
    walk("", doc)
    return flat


def _nest(flat):
    out = {}
    for key, v in flat.items():
        d = out
        parts = key.split(".")
        for p in parts[:-1]:
            d = d.setdefault(p, {})
        d[parts[-1]] = v
    return out


def _parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def parse_conditions(text, seed):
    """``clean/2,snr0/4`` -> ConditionSpecs."""
    specs = []
    for part in filter(None, (p.strip() for p in str(text).split(","))):
        noise, _, tracks = part.partition("/")
        try:
            specs.append(ConditionSpec(noise, int(tracks or 1), seed))
        except ValueError as e:
            raise ConfigError(f"bad condition {part!r}: {e}") from None
    if not specs:
        raise ConfigError("no conditions given")
    return specs


# --------------------------------------------------------------------------
# data helpers
# --------------------------------------------------------------------------

def load_base_items(manifest):
    """Single-track items (ground-truth audio and video) from a manifest."""
    records = read_manifest(manifest)
    root = Path(manifest).parent
    items = []
    for r in records:
        try:
            samples, _ = read_wav(root / r.audio)
            video = load_video(root / r.video[r.gt_index])
        except OSError as e:
            raise DataError(f"{r.id}: {e.strerror}: {e.filename}") from None
        if video.shape[0] == 0:
            raise DataError(f"{r.id}: empty video track")
        items.append(Item(r.id, samples, video, r.transcript))
    if not items:
        raise DataError(f"{manifest}: no records")
    return records, items


def _write_jsonl(path, rows):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_model(path, system):
    if not path:
        raise ConfigError(f"a {system} checkpoint path is required")
    try:
        return AVModel.load(path, expect=system)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: incompatible checkpoint ({e})") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

_TRAIN_FLAGS = {"steps": "steps", "manifest": "data.manifest", "n_utts": "data.n_utts",
                "corpus_seed": "data.corpus_seed", "image_size": "model.image_size",
                "warm_start": "warm_start", "seed": "seed", "batch_size": "batch_size"}


def cmd_train(args, cfg):
    flat = {k: v for k, v in cfg.items()}
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            flat[key] = value
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        flat[key] = _parse_value(value)
    flat.pop("system", None)
    flat.pop("out", None)
    nested = _nest(flat)
    seed = nested.pop("seed")
    steps = nested.pop("steps", None)
    run = preset(args.system, seed, steps, **nested)
    try:
        data = TrainingData.from_config(run.data, run.model.image_size)
    except (ManifestError, FormatError, OSError) as e:
        raise DataError(str(e)) from None
    out = args.out or cfg.get("out") or f"{run.system}.ckpt"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    result = train(run, data, checkpoint=out, checkpoint_every=args.checkpoint_every or 0)
    _write_jsonl(str(out) + ".history.jsonl", result.history)
    print(json.dumps({"checkpoint": str(out), "digest": result.digest, "steps": run.steps,
                      "final_loss": result.history[-1]["loss"] if result.history else None}))


def _permuted(rec, video_paths, root, T, seed):
    tracks = [match_length(load_video(root / p), T) for p in video_paths]
    perm = item_rng(seed, f"perm:{rec.id}:{len(tracks)}").permutation(len(tracks))
    return np.stack([tracks[p] for p in perm]).astype(np.float32), int(np.flatnonzero(perm == rec.gt_index)[0]), perm


def cmd_infer(args, cfg):
    mode = args.mode
    if mode == "e2e":
        e2e = _load_model(args.checkpoint or cfg.get("checkpoint"), "e2e")
        digest = e2e.meta.get("digest")
    else:
        av = _load_model(args.av_checkpoint or cfg.get("av_checkpoint"), "av")
        ss = _load_model(args.ss_checkpoint or cfg.get("ss_checkpoint"), "ss") if mode == "two-step" else None
        digest = av.meta.get("digest")
    manifest = args.manifest or cfg.get("manifest")
    if not manifest:
        raise ConfigError("--manifest is required")
    records = read_manifest(manifest)
    root = Path(manifest).parent
    rows = []
    for rec in records:
        try:
            samples, _ = read_wav(root / rec.audio)
        except OSError as e:
            raise DataError(f"{rec.id}: {e.strerror}: {e.filename}") from None
        if not rec.video:
            raise DataError(f"{rec.id}: no video tracks")
        if mode == "e2e":
            f = utterance_features(e2e, samples)
            tracks, gt, perm = _permuted(rec, rec.video, root, f.shape[0], args.seed)
            ids, sel, _ = infer_e2e(e2e, f, tracks)
        else:
            f = utterance_features(av, samples)
            tracks, gt, perm = _permuted(rec, rec.video, root, f.shape[0], args.seed)
            if mode == "oracle":
                ids, sel = infer_two_step(None, av, None, f, tracks, oracle_index=gt)
            else:
                ids, sel = infer_two_step(ss, av, utterance_features(ss, samples), f, tracks)
        rows.append({"id": rec.id, "hypothesis": VOCAB.decode(ids), "reference": rec.transcript,
                     "selection": [int(s) for s in sel], "gt_index": gt, "permutation": [int(p) for p in perm],
                     "mode": mode, "digest": digest})
    _write_jsonl(args.out or cfg.get("out"), rows)


def cmd_eval(args, cfg):
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("--seed is required")
    manifest = args.manifest or cfg.get("manifest")
    if not manifest:
        raise ConfigError("--manifest is required")
    conditions = parse_conditions(args.conditions or cfg.get("conditions", "clean/2"), int(seed))
    ckpts = dict(cfg.get("checkpoints", {}) or {})
    for item in args.checkpoint or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--checkpoint expects system=path, got {item!r}")
        ckpts[name] = path
    valid = {"ss", "av", "audio", "e2e"}
    if not ckpts or set(ckpts) - valid:
        raise ConfigError(f"--checkpoint names must be among {sorted(valid)}")
    _, base = load_base_items(manifest)
    models = {name: _load_model(path, name) for name, path in sorted(ckpts.items())}
    babble = BabbleBank(args.babble_seed, 30.0)
    runner = GridRunner(models, base, babble, int(seed), dataset=Path(manifest).stem)
    if args.metric == "accuracy":
        systems = [s for s in ACCURACY_SYSTEMS if s in models]
        if not systems:
            raise ConfigError("accuracy needs an ss or e2e checkpoint")
        report = runner.run(conditions, accuracy_systems=systems)
    else:
        have = {"audio": {"audio"}, "oracle": {"av"}, "two-step": {"ss", "av"}, "e2e": {"e2e"}}
        systems = [s for s in WER_SYSTEMS if have[s] <= set(models)]
        if not systems:
            raise ConfigError("wer needs an audio, av or e2e checkpoint")
        report = runner.run(conditions, wer_systems=systems)
    text = report.to_jsonl()
    out = args.out or cfg.get("out")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(render_table(report, "table1" if args.metric == "accuracy" else "table2"))


def cmd_corpus(args, cfg):
    seed = args.seed
    out = Path(args.out or cfg.get("out") or ".")
    if args.action == "gen":
        n = args.n_utts if args.n_utts is not None else cfg.get("n_utts")
        if not n or int(n) < 1:
            raise ConfigError("--n-utts must be a positive integer")
        size = int(args.image_size or cfg.get("image_size", 32))
        (out / "audio").mkdir(parents=True, exist_ok=True)
        (out / "video").mkdir(parents=True, exist_ok=True)
        records = []
        for u in generate_corpus(int(n), seed, SynthConfig(image_size=size)):
            write_wav(out / "audio" / f"{u.id}.wav", u.samples)
            save_video(out / "video" / f"{u.id}.avtv", u.synced)
            records.append(ManifestRecord(u.id, f"audio/{u.id}.wav", [f"video/{u.id}.avtv"], u.text, 0, "base",
                                          u.seed, {"fps": u.fps, "frames": int(u.num_frames)}))
        write_manifest(out / "manifest.jsonl", records)
        print(json.dumps({"manifest": str(out / "manifest.jsonl"), "utterances": len(records)}))
        return
    manifest = args.manifest or cfg.get("manifest")
    if not manifest:
        raise ConfigError("--manifest (base set) is required")
    spec = ConditionSpec(args.condition or cfg.get("condition", "clean"), int(args.tracks or cfg.get("tracks", 1)), seed)
    records, base = load_base_items(manifest)
    if len(base) < spec.tracks:
        raise DataError(f"base set of {len(base)} utterances cannot supply {spec.tracks} tracks")
    audio = augment_audio(base, spec.noise, seed, BabbleBank(args.babble_seed, 30.0))
    (out / "audio").mkdir(parents=True, exist_ok=True)
    src_root = Path(manifest).parent
    rel = lambda p: os.path.relpath(src_root / p, out)
    new = []
    for i, (rec, wave) in enumerate(zip(records, audio)):
        name = f"audio/{rec.id}_{spec.noise}.wav"
        write_wav(out / name, wave)
        videos = [rel(rec.video[rec.gt_index])] + [rel(records[j].video[records[j].gt_index])
                                                   for j in draw_distractors(len(base), i, spec.tracks, seed)]
        new.append(ManifestRecord(rec.id, name, videos, rec.transcript, 0, spec.tag, seed, dict(rec.extra)))
    path = out / f"manifest_{spec.noise}_{spec.tracks}.jsonl"
    write_manifest(path, new)
    print(json.dumps({"manifest": str(path), "utterances": len(new), "condition": spec.tag}))


def cmd_report(args, cfg):
    path = args.report or cfg.get("report")
    if not path:
        raise ConfigError("--report is required")
    try:
        report = EvalReport.from_jsonl(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read report {path}: {e.strerror}") from None
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None
    try:
        if args.action == "table":
            sys.stdout.write(render_table(report, args.layout))
        else:
            for p in emit_plot_data(report, args.out or cfg.get("out") or "."):
                print(p)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="avsel", description="Audio-visual speaker selection and speech recognition.")
    p.add_argument("--config", help="YAML/JSON key-value file; explicit flags override its keys")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train ss, av, audio or e2e")
    t.add_argument("system", choices=["ss", "av", "audio", "e2e"])
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--manifest", help="training manifest (default: synthesize in memory)")
    t.add_argument("--n-utts", type=int)
    t.add_argument("--corpus-seed", type=int)
    t.add_argument("--image-size", type=int)
    t.add_argument("--warm-start", help="copy visual frontend parameters from this checkpoint")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any run-config key")

    i = sub.add_parser("infer", help="transcribe a multi-track manifest")
    i.add_argument("mode", choices=["two-step", "e2e", "oracle"])
    i.add_argument("--manifest")
    i.add_argument("--checkpoint", help="e2e checkpoint")
    i.add_argument("--ss-checkpoint")
    i.add_argument("--av-checkpoint")
    i.add_argument("--seed", type=int, default=0, help="track presentation order")
    i.add_argument("--out")

    e = sub.add_parser("eval", help="grid evaluation over conditions")
    e.add_argument("metric", choices=["accuracy", "wer"])
    e.add_argument("--manifest", help="base (single-track) manifest")
    e.add_argument("--checkpoint", action="append", metavar="SYSTEM=PATH")
    e.add_argument("--conditions", help="e.g. clean/2,snr0/4")
    e.add_argument("--seed", type=int)
    e.add_argument("--babble-seed", type=int, default=DEFAULT_EVAL_BABBLE_SEED)
    e.add_argument("--out")

    c = sub.add_parser("corpus", help="generate or augment a synthetic corpus")
    c.add_argument("action", choices=["gen", "augment"])
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out")
    c.add_argument("--n-utts", type=int)
    c.add_argument("--image-size", type=int)
    c.add_argument("--manifest")
    c.add_argument("--condition", choices=["clean", "snr20", "snr10", "snr0", "overlap"])
    c.add_argument("--tracks", type=int, choices=[1, 2, 4, 8])
    c.add_argument("--babble-seed", type=int, default=DEFAULT_EVAL_BABBLE_SEED)

    r = sub.add_parser("report", help="render tables or plot series from an eval report")
    r.add_argument("action", choices=["table", "plot"])
    r.add_argument("--report")
    r.add_argument("--layout", choices=["table1", "table2"], default="table1")
    r.add_argument("--out")
    return p


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "corpus": cmd_corpus, "report": cmd_report}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config_file(args.config) if args.config else {}
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
