"""Dataset splits, window aggregation, surrogate-task metrics and timing.

Evaluation is multi-class single-label: each 5-second frame gets one label
and one prediction. ROC-AUC is the one-vs-rest Mann-Whitney rank statistic
with average ranks for ties; classes with no positives (or no negatives,
where AUC is equally undefined) are skipped and counted. F1 treats 0/0 as 0.

The timing benchmark measures wall-clock seconds per file after one excluded
warm-up pass and projects onto a hypothetical test set against a fixed
inference budget (5400 s by default).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import codebook as cb
from . import dsp, reduce, sgns
from .errors import ConfigError, DataError, UndefinedMetricError
from .nn import ClassifierHead, head_forward, softmax

DEFAULT_BUDGET_SECONDS = 5400.0
DEFAULT_FRAME_SECONDS = 5.0


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    label: str
    split: str = "unassigned"   # train | val | unassigned


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest clip_ids are not unique")

    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries})

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({"clip_id": e.clip_id, "path": e.path,
                                     "label": e.label, "split": e.split}) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["clip_id"], rec["path"],
                                             rec["label"], rec.get("split", "unassigned")))
        return cls(entries)


def stratified_split(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Per-class train/val split; classes with fewer than 2 clips are dropped.

    Every surviving class keeps at least one clip on each side, with the
    train count otherwise rounded to ratio * n.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    by_label: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        by_label.setdefault(e.label, []).append(e)

    rng = np.random.default_rng(seed)
    out: list[ManifestEntry] = []
    for label in sorted(by_label):
        clips = by_label[label]
        if len(clips) < 2:
            continue
        order = rng.permutation(len(clips))
        n_train = int(np.clip(round(ratio * len(clips)), 1, len(clips) - 1))
        for rank, idx in enumerate(order):
            e = clips[idx]
            out.append(ManifestEntry(e.clip_id, e.path, e.label,
                                     "train" if rank < n_train else "val"))
    if not out:
        raise DataError("no class has 2 or more clips; nothing to split")
    out.sort(key=lambda e: e.clip_id)
    return DatasetManifest(out)


# ---------------------------------------------------------------------------
# Window aggregation
# ---------------------------------------------------------------------------


@dataclass
class FrameEmbedding:
    clip_id: str
    frame_index: int
    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.frame_index < 0 or not np.all(np.isfinite(self.vector)):
            raise DataError("frame embedding must be finite with frame_index >= 0")


def frame_embed_stsg(
    table: sgns.EmbeddingTable,
    seq: cb.TokenSequence,
    frame_seconds: float = DEFAULT_FRAME_SECONDS,
) -> list[FrameEmbedding]:
    """Average token embeddings over non-overlapping prediction frames.

    At the default 8 tokens/s each 5-second frame spans 40 tokens; a trailing
    partial frame is averaged over the tokens it actually has.
    """
    per_frame = seq.frames_per_second * frame_seconds
    if per_frame <= 0 or abs(per_frame - round(per_frame)) > 1e-9:
        raise ConfigError(
            f"frames_per_second * frame_seconds must be a positive integer, got {per_frame}"
        )
    per_frame = int(round(per_frame))
    vectors = sgns.embed_tokens(table, seq)
    out = []
    for i in range(0, vectors.shape[0], per_frame):
        out.append(FrameEmbedding(
            clip_id=seq.clip_id,
            frame_index=i // per_frame,
            vector=vectors[i : i + per_frame].mean(axis=0),
        ))
    return out


def window_assign(window_starts, window_len: float, frame_len: float) -> dict[int, int]:
    """Map analysis windows onto prediction frames by the half-overlap rule.

    Window w lands on frame f iff their overlap is at least window_len / 2;
    with non-overlapping frames this pins each window to at most one frame
    (the exact 50/50 straddle resolves to the earlier frame). Windows meeting
    no frame's threshold are left out of the mapping.
    """
    if window_len <= 0 or frame_len <= 0:
        raise ConfigError("window_len and frame_len must be positive")
    assignment: dict[int, int] = {}
    for w, start in enumerate(window_starts):
        end = start + window_len
        first = int(np.floor(start / frame_len))
        last = int(np.floor((end - 1e-12) / frame_len))
        for f in range(max(0, first), last + 1):
            overlap = min(end, (f + 1) * frame_len) - max(start, f * frame_len)
            if overlap >= window_len / 2:
                assignment[w] = f
                break
    return assignment


def mean_pool_windows(assignment: dict[int, int], window_embeddings: np.ndarray) -> dict[int, np.ndarray]:
    """Per-frame arithmetic mean of assigned window embeddings.

    Frames that received no window are simply absent from the result.
    """
    window_embeddings = np.asarray(window_embeddings, dtype=np.float64)
    buckets: dict[int, list[int]] = {}
    for w, f in assignment.items():
        if w < 0 or w >= window_embeddings.shape[0]:
            raise DataError(f"assignment references window {w} with no embedding")
        buckets.setdefault(f, []).append(w)
    return {f: window_embeddings[rows].mean(axis=0) for f, rows in sorted(buckets.items())}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class ClassStats:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    auc: float | None = None   # None when the skip rule applied


@dataclass
class EvalReport:
    macro_f1: float
    micro_f1: float
    accuracy: float
    roc_auc_macro: float | None
    per_class: list[ClassStats]
    n_skipped_classes: int = 0

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "accuracy": self.accuracy,
            "roc_auc_macro": self.roc_auc_macro,
            "n_skipped_classes": self.n_skipped_classes,
            "per_class": [
                {"label": c.label, "precision": c.precision, "recall": c.recall,
                 "f1": c.f1, "support": c.support, "auc": c.auc}
                for c in self.per_class
            ],
        }

    def to_text(self) -> str:
        lines = [
            f"{'class':<16}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}{'auc':>10}",
        ]
        for c in self.per_class:
            auc = f"{c.auc:.4f}" if c.auc is not None else "skipped"
            lines.append(
                f"{c.label:<16}{c.precision:>10.4f}{c.recall:>10.4f}{c.f1:>10.4f}"
                f"{c.support:>9d}{auc:>10}"
            )
        auc = f"{self.roc_auc_macro:.4f}" if self.roc_auc_macro is not None else "n/a"
        lines.append("")
        lines.append(
            f"macro_f1={self.macro_f1:.4f} micro_f1={self.micro_f1:.4f} "
            f"accuracy={self.accuracy:.4f} roc_auc_macro={auc} "
            f"skipped_classes={self.n_skipped_classes}"
        )
        return "\n".join(lines)

    def per_class_csv(self) -> str:
        rows = ["label,precision,recall,f1,support,auc"]
        for c in self.per_class:
            auc = "" if c.auc is None else f"{c.auc!r}"
            rows.append(f"{c.label},{c.precision!r},{c.recall!r},{c.f1!r},{c.support},{auc}")
        return "\n".join(rows) + "\n"


def f1_scores(pred, truth, n_classes: int, labels: list[str] | None = None):
    """Per-class precision/recall/F1 plus macro/micro aggregates.

    0/0 ratios are defined as 0. Macro averages over all n_classes; micro F1
    equals accuracy in this single-label setting.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise DataError(f"pred {pred.shape} and truth {truth.shape} differ in length")
    per_class = []
    f1_sum = 0.0
    tp_total = fp_total = fn_total = 0
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        f1_sum += f1
        tp_total += tp
        fp_total += fp
        fn_total += fn
        per_class.append(ClassStats(
            label=labels[c] if labels else str(c),
            precision=precision, recall=recall, f1=f1,
            support=int(np.sum(truth == c)),
        ))
    macro = f1_sum / n_classes if n_classes else 0.0
    denom = tp_total + 0.5 * (fp_total + fn_total)
    micro = tp_total / denom if denom else 0.0
    accuracy = float(np.mean(pred == truth)) if pred.size else 0.0
    return macro, micro, accuracy, per_class


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for tied scores."""
    ranks = rankdata(scores, method="average")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def roc_auc_macro(scores: np.ndarray, truth, n_classes: int):
    """One-vs-rest macro AUC with the skip rule.

    Classes with zero positives or zero negatives have no defined AUC; they
    are skipped and counted. Returns (macro_auc, per_class_auc, n_skipped)
    where skipped entries are None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != truth.shape[0]:
        raise DataError(f"scores {scores.shape} and truth {truth.shape} do not align")
    if scores.shape[0] < 1:
        raise DataError("need at least one sample")
    per_class: list[float | None] = []
    kept = []
    for c in range(n_classes):
        positive = truth == c
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == truth.size:
            per_class.append(None)
            continue
        auc = _binary_auc(scores[:, c], positive)
        per_class.append(auc)
        kept.append(auc)
    n_skipped = n_classes - len(kept)
    if not kept:
        raise UndefinedMetricError("every class was skipped; macro AUC undefined")
    return float(np.mean(kept)), per_class, n_skipped


def evaluate(scores: np.ndarray, truth, n_classes: int, labels: list[str] | None = None) -> EvalReport:
    """Full report from per-sample class scores: F1s, accuracy, macro AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    pred = scores.argmax(axis=1)
    macro, micro, accuracy, per_class = f1_scores(pred, truth, n_classes, labels)
    try:
        auc_macro, per_auc, n_skipped = roc_auc_macro(scores, truth, n_classes)
    except UndefinedMetricError:
        auc_macro, per_auc, n_skipped = None, [None] * n_classes, n_classes
    for stats, auc in zip(per_class, per_auc):
        stats.auc = auc
    return EvalReport(macro_f1=macro, micro_f1=micro, accuracy=accuracy,
                      roc_auc_macro=auc_macro, per_class=per_class,
                      n_skipped_classes=n_skipped)


# ---------------------------------------------------------------------------
# Inference chain and timing benchmark
# ---------------------------------------------------------------------------


@dataclass
class InferenceChain:
    """tokenize -> embed -> pool -> classify, as deployed per file."""

    spectrogram: dsp.SpectrogramConfig
    pca: reduce.PcaModel
    book: cb.Codebook
    table: sgns.EmbeddingTable
    head: ClassifierHead
    frame_seconds: float = DEFAULT_FRAME_SECONDS

    def tokenize(self, clip: dsp.AudioClip) -> cb.TokenSequence:
        mel = dsp.normalize_frames(dsp.mel_spectrogram(clip, self.spectrogram))
        reduced = reduce.pca_transform(self.pca, mel.frames)
        return cb.assign(self.book, reduced, clip_id=clip.id,
                         frames_per_second=mel.frames_per_second)

    def frame_vectors(self, clip: dsp.AudioClip) -> list[FrameEmbedding]:
        return frame_embed_stsg(self.table, self.tokenize(clip), self.frame_seconds)

    def __call__(self, clip: dsp.AudioClip) -> np.ndarray:
        """Per-frame class probabilities, one row per 5-second frame."""
        frames = self.frame_vectors(clip)
        features = np.stack([f.vector for f in frames])
        return softmax(head_forward(self.head, features))


@dataclass
class TimingReport:
    per_file_seconds: list[float]
    avg_seconds_per_file: float
    n_projection: int
    projected_total_seconds: float
    budget_seconds: float
    within_budget: bool

    def to_dict(self) -> dict:
        return {
            "per_file_seconds": self.per_file_seconds,
            "avg_seconds_per_file": self.avg_seconds_per_file,
            "n_projection": self.n_projection,
            "projected_total_seconds": self.projected_total_seconds,
            "budget_seconds": self.budget_seconds,
            "within_budget": self.within_budget,
        }

    def to_text(self) -> str:
        return (
            f"files_timed={len(self.per_file_seconds)} "
            f"avg_s_per_file={self.avg_seconds_per_file:.4f} "
            f"projected={self.projected_total_seconds:.1f}s for {self.n_projection} files "
            f"budget={self.budget_seconds:.0f}s within_budget={self.within_budget}"
        )


def project_timing(avg_seconds_per_file: float, n_projection: int,
                   budget_s: float = DEFAULT_BUDGET_SECONDS,
                   per_file: list[float] | None = None) -> TimingReport:
    """Projected total = average seconds per file x file count."""
    projected = avg_seconds_per_file * n_projection
    return TimingReport(
        per_file_seconds=per_file if per_file is not None else [],
        avg_seconds_per_file=avg_seconds_per_file,
        n_projection=n_projection,
        projected_total_seconds=projected,
        budget_seconds=budget_s,
        within_budget=projected <= budget_s,
    )


def bench_inference(pipeline, clips, n_projection: int,
                    budget_s: float = DEFAULT_BUDGET_SECONDS) -> TimingReport:
    """Time the per-file chain on each clip (single process, monotonic clock).

    The first clip is run once extra as an untimed warm-up.
    """
    clips = list(clips)
    if not clips:
        raise DataError("need at least one clip to benchmark")
    pipeline(clips[0])
    times = []
    for clip in clips:
        t0 = time.perf_counter()
        pipeline(clip)
        times.append(time.perf_counter() - t0)
    avg = float(np.mean(times))
    return project_timing(avg, n_projection, budget_s, per_file=times)
