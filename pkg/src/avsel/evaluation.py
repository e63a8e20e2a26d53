"""Frame-level selection accuracy, word error rate and grid evaluation."""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .acoustic import features
from .corpus import ConditionSpec, augment_audio, draw_distractors, item_rng
from .attention import hard_visual
from .models import infer_audio, infer_e2e, infer_two_step
from .transducer import VOCAB
from .visual import match_length

ACCURACY_SYSTEMS = ("ss", "e2e")
WER_SYSTEMS = ("audio", "oracle", "two-step", "e2e")


@dataclass
class SelectionTrace:
    utt_id: str
    selected: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.selected = np.asarray(self.selected)
        self.truth = np.asarray(self.truth)
        if self.selected.shape != self.truth.shape:
            raise ValueError(f"{self.utt_id}: {self.selected.shape[0]} selections for {self.truth.shape[0]} frames")


def top1_frame_accuracy(traces):
    """Correct frames over all frames, pooled across utterances."""
    if not traces:
        raise ValueError("no traces")
    hits = total = 0
    for tr in traces:
        hits += int(np.sum(tr.selected == tr.truth))
        total += tr.truth.shape[0]
    if total == 0:
        raise ValueError("traces contain no frames")
    return hits / total


def _words(x):
    return x.lower().split() if isinstance(x, str) else [str(w).lower() for w in x]


def word_errors(hyp, ref):
    """(edit distance, reference length) over case-folded whitespace tokens."""
    h, r = _words(hyp), _words(ref)
    vocab = {w: i for i, w in enumerate(sorted(set(h) | set(r)))}
    d = kernels.edit_distance(np.array([vocab[w] for w in h], np.int64), np.array([vocab[w] for w in r], np.int64))
    return int(d), len(r)


def word_error_rate(hyp, ref):
    errors, n = word_errors(hyp, ref)
    if n == 0:
        raise ValueError("reference is empty")
    return errors / n


def corpus_wer(pairs):
    """Pooled WER (total edits / total reference words) over (hyp, ref) pairs."""
    errors = words = 0
    for hyp, ref in pairs:
        e, n = word_errors(hyp, ref)
        errors += e
        words += n
    if words == 0:
        raise ValueError("references are empty")
    return errors / words


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, dataset, noise, tracks, system, metric, value):
        key = (dataset, noise, int(tracks), system, metric)
        if any(self.key(r) == key for r in self.rows):
            raise ValueError(f"duplicate grid cell {key}")
        self.rows.append({"dataset": dataset, "noise": noise, "tracks": int(tracks), "system": system,
                          "metric": metric, "value": float(value)})

    @staticmethod
    def key(row):
        return (row["dataset"], row["noise"], row["tracks"], row["system"], row["metric"])

    def get(self, noise, tracks, system, metric, dataset=None):
        for r in self.rows:
            if (r["noise"], r["tracks"], r["system"], r["metric"]) == (noise, tracks, system, metric) and (
                    dataset is None or r["dataset"] == dataset):
                return r["value"]
        raise KeyError(f"no cell {noise}/{tracks}/{system}/{metric}")

    def to_jsonl(self):
        lines = [json.dumps({"metadata": self.metadata}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        rep = cls()
        for i, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {i}: {e.msg}") from None
            if "metadata" in d:
                rep.metadata = d["metadata"]
            else:
                rep.add(d["dataset"], d["noise"], d["tracks"], d["system"], d["metric"], d["value"])
        return rep

    def check_complete(self, cells):
        missing = [c for c in cells if not any(self.key(r) == c for r in self.rows)]
        if missing:
            raise ValueError(f"report is missing {len(missing)} cells: {missing[:8]}")


def merge_reports(reports):
    """Concatenate reports produced from the same checkpoints; mixed digests are refused."""
    out = EvalReport()
    for rep in reports:
        for k, v in rep.metadata.items():
            if k in out.metadata and out.metadata[k] != v:
                raise ValueError(f"cannot merge reports with different {k}: {out.metadata[k]!r} vs {v!r}")
            out.metadata[k] = v
        for r in rep.rows:
            out.add(r["dataset"], r["noise"], r["tracks"], r["system"], r["metric"], r["value"])
    return out


def model_fingerprint(model):
    h = hashlib.sha256()
    for name, arr in model.store.arrays().items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# grid evaluation
# --------------------------------------------------------------------------

class _VisualCache:
    """Per-model visual features for (utterance, source track), clamped to the utterance's length."""

    def __init__(self, model, base):
        self.model = model
        self.base = base
        self.store = {}

    def get(self, i, sources):
        T = self.base[i].num_frames
        missing = [j for j in dict.fromkeys(sources) if (i, j) not in self.store]
        if missing:
            clips = np.stack([match_length(self.base[j].synced, T) for j in missing]).astype(np.float32)
            feats = self.model.visual_features(clips).data
            for j, f in zip(missing, feats):
                self.store[(i, j)] = f
        return np.stack([self.store[(i, j)] for j in sources])


class GridRunner:
    """Evaluates systems over (noise, tracks) cells of one held-out base set.

    ``models`` maps component names to loaded models: ``ss``, ``av``, ``audio``, ``e2e``.
    Tracks reach each system in a seeded random order; the ground truth is
    tracked through the permutation.
    """

    def __init__(self, models, base, babble, seed, dataset="synthetic"):
        if not base:
            raise ValueError("empty evaluation set")
        self.models = models
        self.base = base
        self.babble = babble
        self.seed = seed
        self.dataset = dataset
        self._audio = {}
        self._vis = {name: _VisualCache(m, base) for name, m in models.items() if m.visual is not None}

    def _require(self, *names):
        absent = [n for n in names if n not in self.models]
        if absent:
            raise ValueError(f"missing checkpoints for: {', '.join(absent)}")

    def audio(self, noise):
        if noise not in self._audio:
            self._audio[noise] = augment_audio(self.base, noise, self.seed, self.babble)
        return self._audio[noise]

    def layout(self, i, tracks):
        """(sources in presented order, ground-truth position)."""
        sources = [i] + draw_distractors(len(self.base), i, tracks, self.seed)
        perm = item_rng(self.seed, f"perm:{self.base[i].id}:{tracks}").permutation(tracks)
        return [sources[p] for p in perm], int(np.flatnonzero(perm == 0)[0])

    def feats(self, name, noise, i):
        return self.models[name].normalize(features(self.audio(noise)[i]))

    def selection_traces(self, system, spec):
        self._require(system)
        traces = []
        for i, u in enumerate(self.base):
            sources, gt = self.layout(i, spec.tracks)
            keys = self._vis[system].get(i, sources)
            f = self.feats(system, spec.noise, i)
            if system == "e2e":
                _, sel, _ = infer_e2e(self.models["e2e"], f, None, visual_cache=keys)
            else:
                sel = np.argmax(self.models["ss"].track_scores(f, keys), axis=-1)
            traces.append(SelectionTrace(u.id, sel, np.full(sel.shape[0], gt)))
        return traces

    def transcripts(self, system, spec):
        need = {"audio": ("audio",), "oracle": ("av",), "two-step": ("ss", "av"), "e2e": ("e2e",),
                "e2e-oracle": ("e2e",)}[system]
        self._require(*need)
        out = []
        for i, u in enumerate(self.base):
            sources, gt = self.layout(i, spec.tracks)
            if system == "audio":
                ids = infer_audio(self.models["audio"], self.feats("audio", spec.noise, i))
            elif system == "e2e":
                keys = self._vis["e2e"].get(i, sources)
                ids, _, _ = infer_e2e(self.models["e2e"], self.feats("e2e", spec.noise, i), None, visual_cache=keys)
            elif system == "e2e-oracle":
                # e2e weights with attention replaced by the ground-truth track
                keys = self._vis["e2e"].get(i, sources)
                ids = self.models["e2e"].decode(self.feats("e2e", spec.noise, i),
                                                hard_visual(np.full(keys.shape[1], gt), keys))
            else:
                av_cache = self._vis["av"].get(i, sources)
                if system == "oracle":
                    ids, _ = infer_two_step(None, self.models["av"], None, self.feats("av", spec.noise, i),
                                            None, oracle_index=gt, av_cache=av_cache)
                else:
                    ids, _ = infer_two_step(self.models["ss"], self.models["av"], self.feats("ss", spec.noise, i),
                                            self.feats("av", spec.noise, i), None,
                                            ss_cache=self._vis["ss"].get(i, sources), av_cache=av_cache)
            out.append((VOCAB.decode(ids), u.text))
        return out

    def run(self, conditions, accuracy_systems=(), wer_systems=()):
        report = EvalReport(metadata={"seed": self.seed, "dataset": self.dataset, "utterances": len(self.base)})
        for name, m in sorted(self.models.items()):
            report.metadata[f"checkpoint/{name}"] = model_fingerprint(m)
            digest = getattr(m, "meta", {}).get("digest")
            if digest:
                report.metadata[f"digest/{name}"] = digest
        for spec in conditions:
            if not isinstance(spec, ConditionSpec):
                raise TypeError("conditions must be ConditionSpec instances")
            for system in accuracy_systems:
                acc = top1_frame_accuracy(self.selection_traces(system, spec))
                report.add(self.dataset, spec.noise, spec.tracks, system, "accuracy", acc)
            for system in wer_systems:
                report.add(self.dataset, spec.noise, spec.tracks, system, "wer",
                           100.0 * corpus_wer(self.transcripts(system, spec)))
        return report


def run_grid(models, base, conditions, babble, seed, accuracy_systems=(), wer_systems=(), dataset="synthetic"):
    runner = GridRunner(models, base, babble, seed, dataset)
    return runner.run(conditions, accuracy_systems, wer_systems)
