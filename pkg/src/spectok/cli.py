"""Command-line surface wiring the pipeline stages together.

Stages are decoupled through files so sweeps can reuse expensive upstream
artifacts: featurize -> fit-pca -> fit-codebook -> tokenize ->
train-embeddings -> train-head (and distill), then predict / eval / bench /
sweep. Every run writes its resolved configuration as a JSON sidecar next to
its outputs, which makes any artifact reproducible from the sidecar alone.

Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 budget/resource error. Failures also emit one machine-readable JSON line
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import codebook as cb
from . import dsp, evalpipe, nn, reduce, sgns, store
from .errors import (
    BudgetError,
    ConfigError,
    DataError,
    SpectokError,
)


class UsageError(SpectokError):
    """Bad command line (mapped to exit code 1)."""


@dataclasses.dataclass
class PipelineConfig:
    """Resolved configuration for a full pipeline run."""

    spectrogram: dsp.SpectrogramConfig = dataclasses.field(default_factory=dsp.SpectrogramConfig)
    pca_k: int = 128
    vocab_size: int = 16_384
    kmeans_max_iters: int = 25
    sgns: sgns.SgnsConfig = dataclasses.field(default_factory=sgns.SgnsConfig)
    head: nn.TrainConfig = dataclasses.field(default_factory=nn.TrainConfig)
    student: nn.TrainConfig = dataclasses.field(default_factory=nn.TrainConfig)
    student_temperature: float = 3.0
    frame_seconds: float = 5.0
    head_hidden: int = 512
    split_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pca_k > self.spectrogram.n_mels:
            raise ConfigError(
                f"pca_k={self.pca_k} exceeds n_mels={self.spectrogram.n_mels}"
            )
        if not 1 <= self.vocab_size <= cb.MAX_VOCAB:
            raise ConfigError(f"vocab_size must be in [1, {cb.MAX_VOCAB}], got {self.vocab_size}")
        if self.student_temperature <= 0:
            raise ConfigError("student_temperature must be positive")
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.split_ratio}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        for key, typ in (("spectrogram", dsp.SpectrogramConfig), ("sgns", sgns.SgnsConfig),
                         ("head", nn.TrainConfig), ("student", nn.TrainConfig)):
            if key in data and isinstance(data[key], dict):
                data[key] = typ(**data[key])
        return cls(**data)


def load_config(path: str | None, overrides: dict | None = None) -> PipelineConfig:
    data: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    cfg = PipelineConfig.from_dict(data)
    for dotted, value in (overrides or {}).items():
        _apply_override(cfg, dotted, value)
    return cfg


def _apply_override(cfg, dotted: str, value) -> None:
    obj = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        obj = getattr(obj, part)
    if not hasattr(obj, parts[-1]):
        raise UsageError(f"unknown config field {dotted!r}")
    setattr(obj, parts[-1], value)


def write_sidecar(out_path, cfg: PipelineConfig, extra: dict | None = None) -> None:
    """Persist the resolved config next to an output artifact."""
    out_path = Path(out_path)
    sidecar = out_path.with_name(out_path.name + ".config.json")
    payload = cfg.to_dict()
    if extra:
        payload["run"] = extra
    sidecar.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def _gather(paths: list[str], suffix: str) -> list[Path]:
    out: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out.extend(sorted(p.glob(f"*{suffix}")))
        elif p.exists():
            out.append(p)
        else:
            raise DataError(f"no such input: {p}")
    if not out:
        raise DataError(f"no {suffix} inputs found under {paths}")
    return out


def _load_token_corpus(paths: list[str]) -> tuple[list[cb.TokenSequence], int]:
    seqs = []
    vocab = 0
    for p in _gather(paths, ".stsk"):
        seq, v = store.load_tokens(p)
        seqs.append(seq)
        vocab = max(vocab, v)
    return seqs, vocab


def _frame_dataset(manifest: evalpipe.DatasetManifest, table: sgns.EmbeddingTable,
                   tokens_dir: str, frame_seconds: float):
    """Per-frame features/labels for each manifest split: label index follows clip label."""
    labels = manifest.labels()
    index = {label: i for i, label in enumerate(labels)}
    data = {"train": ([], []), "val": ([], [])}
    for entry in manifest.entries:
        if entry.split not in data:
            continue
        seq, _ = store.load_tokens(Path(tokens_dir) / f"{entry.clip_id}.stsk")
        for fe in evalpipe.frame_embed_stsg(table, seq, frame_seconds):
            data[entry.split][0].append(fe.vector)
            data[entry.split][1].append(index[entry.label])
    out = {}
    for split, (feats, labs) in data.items():
        if feats:
            out[split] = (np.stack(feats), np.asarray(labs, dtype=np.int64))
        else:
            out[split] = (np.zeros((0, table.d)), np.zeros(0, dtype=np.int64))
    return out["train"], out["val"], labels


def _build_chain(args, cfg: PipelineConfig) -> evalpipe.InferenceChain:
    return evalpipe.InferenceChain(
        spectrogram=cfg.spectrogram,
        pca=store.load_object(args.pca, expected_kind="pca"),
        book=store.load_object(args.codebook, expected_kind="codebook"),
        table=store.load_object(args.embeddings, expected_kind="embedding"),
        head=store.load_object(args.head, expected_kind="classifier_head"),
        frame_seconds=cfg.frame_seconds,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_featurize(args, cfg: PipelineConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for wav in _gather(args.audio, ".wav"):
        clip = dsp.load_audio(wav, cfg.spectrogram.sample_rate)
        mel = dsp.mel_spectrogram(clip, cfg.spectrogram)
        if not args.raw:
            mel = dsp.normalize_frames(mel)
        store.save_object(mel, out_dir / f"{clip.id}.mel.stsg")
    write_sidecar(out_dir / "features", cfg, {"command": "featurize", "count": len(args.audio)})
    return 0


def _load_feature_matrix(paths: list[str]) -> np.ndarray:
    frames = [store.load_object(p, expected_kind="mel_frames").frames
              for p in _gather(paths, ".mel.stsg")]
    return np.concatenate(frames, axis=0)


def cmd_fit_pca(args, cfg: PipelineConfig) -> int:
    frames = _load_feature_matrix(args.features)
    model = reduce.fit_pca(frames, k=cfg.pca_k, seed=cfg.seed, subsample=args.subsample)
    store.save_object(model, args.out)
    write_sidecar(args.out, cfg, {"command": "fit-pca", "n_frames": int(frames.shape[0])})
    cum = float(model.explained_variance_ratio.sum())
    print(f"pca: k={model.k} cumulative_variance={cum:.4f}")
    return 0


def cmd_fit_codebook(args, cfg: PipelineConfig) -> int:
    frames = _load_feature_matrix(args.features)
    pca = store.load_object(args.pca, expected_kind="pca")
    reduced = reduce.pca_transform(pca, frames)
    book = cb.fit_kmeans(reduced, V=cfg.vocab_size, max_iters=cfg.kmeans_max_iters, seed=cfg.seed)
    store.save_object(book, args.out)
    write_sidecar(args.out, cfg, {"command": "fit-codebook", "n_frames": int(frames.shape[0])})
    print(f"codebook: V={book.V} iterations={book.iterations_run} "
          f"objective={book.final_objective:.6f}")
    return 0


def cmd_tokenize(args, cfg: PipelineConfig) -> int:
    pca = store.load_object(args.pca, expected_kind="pca")
    book = store.load_object(args.codebook, expected_kind="codebook")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for wav in _gather(args.audio, ".wav"):
        clip = dsp.load_audio(wav, cfg.spectrogram.sample_rate)
        mel = dsp.normalize_frames(dsp.mel_spectrogram(clip, cfg.spectrogram))
        reduced = reduce.pca_transform(pca, mel.frames)
        seq = cb.assign(book, reduced, clip_id=clip.id, frames_per_second=mel.frames_per_second)
        store.save_tokens(seq, out_dir / f"{clip.id}.stsk", vocab_size=book.V)
        print(f"{clip.id}: {len(seq)} tokens")
    write_sidecar(out_dir / "tokens", cfg, {"command": "tokenize"})
    return 0


def cmd_train_embeddings(args, cfg: PipelineConfig) -> int:
    corpus, vocab = _load_token_corpus(args.tokens)
    stats = sgns.build_vocab(corpus, min_count=cfg.sgns.min_count,
                             sample=cfg.sgns.sample, vocab_size=vocab)
    sampler = sgns.build_negative_sampler(stats, alpha=cfg.sgns.ns_exponent, seed=cfg.sgns.seed)
    table = sgns.train_sgns(corpus, stats, sampler, cfg.sgns,
                            mode=args.mode, workers=args.workers)
    store.save_object(table, args.out)
    write_sidecar(args.out, cfg, {"command": "train-embeddings", "mode": args.mode,
                                  "n_sequences": len(corpus)})
    if table.epoch_losses.size:
        print(f"embeddings: d={table.d} epochs={table.epoch_losses.size} "
              f"final_epoch_loss={table.epoch_losses[-1]:.4f}")
    return 0


def _split_manifest(args, cfg: PipelineConfig) -> evalpipe.DatasetManifest:
    manifest = evalpipe.DatasetManifest.load(args.manifest)
    if not manifest.subset("train") or not manifest.subset("val"):
        manifest = evalpipe.stratified_split(manifest, cfg.split_ratio, cfg.seed)
    return manifest


def cmd_train_head(args, cfg: PipelineConfig) -> int:
    manifest = _split_manifest(args, cfg)
    table = store.load_object(args.embeddings, expected_kind="embedding")
    (x_train, y_train), (x_val, y_val), labels = _frame_dataset(
        manifest, table, args.tokens, cfg.frame_seconds)
    head = nn.train_head(x_train, y_train, cfg.head, x_val, y_val, hidden=cfg.head_hidden)
    head.labels = labels
    store.save_object(head, args.out)
    manifest.save(Path(args.out).with_suffix(".split.jsonl"))
    write_sidecar(args.out, cfg, {"command": "train-head", "classes": len(labels)})
    report = evalpipe.evaluate(nn.head_forward(head, x_val), y_val, len(labels), labels)
    print(report.to_text())
    return 0


def cmd_distill(args, cfg: PipelineConfig) -> int:
    corpus, vocab = _load_token_corpus(args.tokens)
    teacher = store.load_object(args.teacher, expected_kind="teacher_logits")
    by_id = {seq.clip_id: seq for seq in corpus}
    missing = [cid for cid in teacher.clip_ids if cid not in by_id]
    if missing:
        raise DataError(f"no token sequences for teacher clips: {missing[:5]}")
    seqs = [by_id[cid] for cid in teacher.clip_ids]
    student = nn.train_student(
        seqs, teacher.logits, cfg.student, T=cfg.student_temperature,
        vocab_size=vocab, embed_dim=args.embed_dim, channels=args.channels,
        embedding=(store.load_object(args.init_embeddings, expected_kind="embedding").input_vectors
                   if args.init_embeddings else None),
    )
    store.save_object(student, args.out)
    write_sidecar(args.out, cfg, {"command": "distill", "n_sequences": len(seqs)})
    return 0


def cmd_predict(args, cfg: PipelineConfig) -> int:
    chain = _build_chain(args, cfg)
    labels = chain.head.labels or [str(i) for i in range(chain.head.n_classes)]
    top_k = min(args.top_k, len(labels))
    rows = []
    for wav in _gather(args.audio, ".wav"):
        clip = dsp.load_audio(wav, cfg.spectrogram.sample_rate)
        probs = chain(clip)
        for frame_index in range(probs.shape[0]):
            order = np.argsort(probs[frame_index])[::-1][:top_k]
            rows.append({
                "clip_id": clip.id,
                "frame_index": frame_index,
                "scores": {labels[i]: float(probs[frame_index, i]) for i in order},
            })
    text = "\n".join(json.dumps(r) for r in rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_sidecar(args.out, cfg, {"command": "predict"})
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    manifest = _split_manifest(args, cfg)
    table = store.load_object(args.embeddings, expected_kind="embedding")
    head = store.load_object(args.head, expected_kind="classifier_head")
    _, (x_val, y_val), labels = _frame_dataset(manifest, table, args.tokens, cfg.frame_seconds)
    if x_val.shape[0] == 0:
        raise DataError("validation split is empty")
    report = evalpipe.evaluate(nn.head_forward(head, x_val), y_val, len(labels), labels)
    print(report.to_text())
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                                       encoding="utf-8")
    if args.csv_out:
        Path(args.csv_out).write_text(report.per_class_csv(), encoding="utf-8")
    return 0


def cmd_bench(args, cfg: PipelineConfig) -> int:
    chain = _build_chain(args, cfg)
    clips = [dsp.load_audio(p, cfg.spectrogram.sample_rate) for p in _gather(args.audio, ".wav")]
    report = evalpipe.bench_inference(chain, clips, n_projection=args.n_projection,
                                      budget_s=args.budget)
    print(report.to_text())
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                                       encoding="utf-8")
    if args.strict_budget and not report.within_budget:
        raise BudgetError(
            f"projected {report.projected_total_seconds:.0f}s exceeds budget {report.budget_seconds:.0f}s"
        )
    return 0


SWEEP_AXES = ("vector_size", "window", "ns_exponent", "sample", "vocab_size")


def _parse_axis(raw: str):
    name, _, values = raw.partition("=")
    if name not in SWEEP_AXES or not values:
        raise UsageError(f"bad axis {raw!r}; use one of {SWEEP_AXES} as name=v1,v2,...")
    cast = float if name in ("ns_exponent", "sample") else int
    return name, [cast(v) for v in values.split(",")]


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    axes = [_parse_axis(a) for a in args.axis]
    names = [n for n, _ in axes]
    if "vocab_size" in names and not (args.features and args.pca):
        raise UsageError("a vocab_size axis needs --features and --pca to refit codebooks")

    manifest = _split_manifest(args, cfg)
    base_corpus = base_vocab = None
    if args.tokens:
        base_corpus, base_vocab = _load_token_corpus(args.tokens)

    rows = []
    for combo in itertools.product(*[v for _, v in axes]):
        cell = dict(zip(names, combo))
        t0 = time.perf_counter()
        cell_cfg = PipelineConfig.from_dict(cfg.to_dict())
        for key, value in cell.items():
            if key == "vocab_size":
                cell_cfg.vocab_size = int(value)
            else:
                setattr(cell_cfg.sgns, key, value)

        if "vocab_size" in cell:
            frames = _load_feature_matrix(args.features)
            pca = store.load_object(args.pca, expected_kind="pca")
            reduced = reduce.pca_transform(pca, frames)
            book = cb.fit_kmeans(reduced, V=cell_cfg.vocab_size,
                                 max_iters=cell_cfg.kmeans_max_iters, seed=cell_cfg.seed)
            corpus = _retokenize(manifest, pca, book, cell_cfg)
            vocab = book.V
        else:
            if base_corpus is None:
                raise UsageError("sweep needs --tokens (or --features/--pca for vocab_size)")
            corpus, vocab = base_corpus, base_vocab

        stats = sgns.build_vocab(corpus, min_count=cell_cfg.sgns.min_count,
                                 sample=cell_cfg.sgns.sample, vocab_size=vocab)
        sampler = sgns.build_negative_sampler(stats, alpha=cell_cfg.sgns.ns_exponent,
                                              seed=cell_cfg.sgns.seed)
        table = sgns.train_sgns(corpus, stats, sampler, cell_cfg.sgns)

        by_id = {seq.clip_id: seq for seq in corpus}
        x, y = {"train": [], "val": []}, {"train": [], "val": []}
        labels = manifest.labels()
        index = {label: i for i, label in enumerate(labels)}
        for entry in manifest.entries:
            if entry.split not in x or entry.clip_id not in by_id:
                continue
            for fe in evalpipe.frame_embed_stsg(table, by_id[entry.clip_id], cell_cfg.frame_seconds):
                x[entry.split].append(fe.vector)
                y[entry.split].append(index[entry.label])
        head = nn.train_head(np.stack(x["train"]), np.asarray(y["train"]), cell_cfg.head,
                             np.stack(x["val"]), np.asarray(y["val"]), hidden=cell_cfg.head_hidden)
        report = evalpipe.evaluate(nn.head_forward(head, np.stack(x["val"])),
                                   np.asarray(y["val"]), len(labels), labels)
        wall = time.perf_counter() - t0
        auc = report.roc_auc_macro if report.roc_auc_macro is not None else ""
        rows.append({**{n: c for n, c in cell.items()},
                     "f1_macro": report.macro_f1, "roc_auc_macro": auc,
                     "wall_time_s": round(wall, 3)})
        print(f"sweep {cell}: f1_macro={report.macro_f1:.4f} wall={wall:.1f}s")

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    write_sidecar(args.out, cfg, {"command": "sweep", "axes": dict(axes), "cells": len(rows)})
    return 0


def _retokenize(manifest, pca, book, cfg: PipelineConfig) -> list[cb.TokenSequence]:
    corpus = []
    for entry in manifest.entries:
        clip = dsp.load_audio(entry.path, cfg.spectrogram.sample_rate)
        mel = dsp.normalize_frames(dsp.mel_spectrogram(clip, cfg.spectrogram))
        reduced = reduce.pca_transform(pca, mel.frames)
        corpus.append(cb.assign(book, reduced, clip_id=entry.clip_id,
                                frames_per_second=mel.frames_per_second))
    return corpus


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spectok", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="pipeline config JSON file")
    parser.add_argument("--seed", type=int, help="override every stage seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="WAV -> normalized Mel frame files")
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true", help="skip row normalization")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("fit-pca", help="fit the low-rank projection")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--subsample", type=int, help="fit on this many seed-chosen frames")
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("fit-codebook", help="fit the K-means vocabulary")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--max-iters", type=int)
    p.set_defaults(func=cmd_fit_codebook)

    p = sub.add_parser("tokenize", help="WAV -> token files")
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train-embeddings", help="skip-gram training over token files")
    p.add_argument("--tokens", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("deterministic", "parallel"), default="deterministic")
    p.add_argument("--workers", type=int, default=2)
    for flag, typ in (("--vector-size", int), ("--window", int), ("--negative", int),
                      ("--ns-exponent", float), ("--sample", float), ("--min-count", int),
                      ("--epochs", int), ("--initial-lr", float), ("--final-lr", float)):
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_train_embeddings)

    p = sub.add_parser("train-head", help="train the surrogate-task classifier")
    p.add_argument("--tokens", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("distill", help="train the student against teacher logits")
    p.add_argument("--tokens", nargs="+", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=int, default=768)
    p.add_argument("--channels", type=int, default=512)
    p.add_argument("--init-embeddings", help="start the student embedding from this table")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("predict", help="per-frame class scores for WAV input")
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="surrogate-task metrics on the validation split")
    p.add_argument("--tokens", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--json-out")
    p.add_argument("--csv-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the per-file inference chain")
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--n-projection", type=int, default=700)
    p.add_argument("--budget", type=float, default=evalpipe.DEFAULT_BUDGET_SECONDS)
    p.add_argument("--strict-budget", action="store_true",
                   help="exit 3 when the projection exceeds the budget")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="grid over embedding/vocabulary axes, one CSV row per cell")
    p.add_argument("--axis", action="append", required=True,
                   help="name=v1,v2,... over " + ", ".join(SWEEP_AXES))
    p.add_argument("--tokens", nargs="+")
    p.add_argument("--features", nargs="+")
    p.add_argument("--pca")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


_CFG_FLAGS = {
    "k": "pca_k",
    "vocab_size": "vocab_size",
    "max_iters": "kmeans_max_iters",
    "vector_size": "sgns.vector_size",
    "window": "sgns.window",
    "negative": "sgns.negative",
    "ns_exponent": "sgns.ns_exponent",
    "sample": "sgns.sample",
    "min_count": "sgns.min_count",
    "epochs": "sgns.epochs",
    "initial_lr": "sgns.initial_lr",
    "final_lr": "sgns.final_lr",
}


def _resolve_config(args) -> PipelineConfig:
    overrides = {}
    for flag, dotted in _CFG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[dotted] = value
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.sgns.seed = args.seed
        cfg.head.seed = args.seed
        cfg.student.seed = args.seed
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        _emit_error(exc)
        return 1
    except BudgetError as exc:
        _emit_error(exc)
        return 3
    except SpectokError as exc:
        _emit_error(exc)
        return 2
    except OSError as exc:
        _emit_error(exc)
        return 2


def _emit_error(exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
