"""Bit-exact binary persistence for trained objects and token sequences.

Every trained object goes into one self-describing container:

    magic "STSG" | version u8 | metadata_len u32 LE | metadata JSON | payload

The JSON metadata names the object kind, its array manifest (name, dtype,
shape, in payload order) and the scalar config; the payload is the raw
little-endian row-major array bytes, concatenated. Token sequences use the
dedicated compact format:

    magic "STSK" | version u8 | id_len u16 | clip_id UTF-8 |
    frames_per_second f64 | vocab_size u32 | length u64 | tokens u16[length]

Writes are atomic (temp file + rename); files are immutable afterwards, so
concurrent readers are safe.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile

import numpy as np

from .codebook import MAX_VOCAB, Codebook, TokenSequence
from .dsp import MelFrameMatrix
from .errors import (
    BadMagicError,
    BadVersionError,
    FormatError,
    InvariantError,
    KindError,
    PayloadSizeError,
)
from .nn import ClassifierHead, StudentModel
from .reduce import PcaModel
from .sgns import EmbeddingTable, SgnsConfig

CONTAINER_MAGIC = b"STSG"
TOKENS_MAGIC = b"STSK"
VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8", "u16": "<u2", "u32": "<u4"}


@dataclasses.dataclass
class TeacherLogits:
    """Per-sequence teacher logit rows keyed by clip id (ingestion input)."""

    clip_ids: list[str]
    logits: np.ndarray   # n_sequences x C_teacher

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.logits.shape[0] != len(self.clip_ids):
            raise InvariantError(
                f"{len(self.clip_ids)} clip ids vs logits shape {self.logits.shape}"
            )


def _atomic_write(path, data: bytes) -> None:
    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".spectok-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_container(kind: str, arrays: list[tuple[str, np.ndarray, str]], config: dict) -> bytes:
    manifest = []
    payload = bytearray()
    for name, arr, dtype in arrays:
        arr = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False)
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload += arr.tobytes()
    meta = json.dumps({"kind": kind, "arrays": manifest, "config": config}).encode("utf-8")
    return CONTAINER_MAGIC + struct.pack("<BI", VERSION, len(meta)) + meta + bytes(payload)


def _unpack_container(path) -> tuple[str, dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if len(blob) < 9 or blob[:4] != CONTAINER_MAGIC:
        raise BadMagicError(f"{path}: not a container file (bad magic)")
    version, meta_len = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise BadVersionError(f"{path}: unknown container version {version}")
    if len(blob) < 9 + meta_len:
        raise PayloadSizeError(f"{path}: truncated metadata")
    try:
        meta = json.loads(blob[9 : 9 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata ({exc})") from exc

    payload = blob[9 + meta_len :]
    expected = sum(
        int(np.prod(a["shape"], dtype=np.int64)) * np.dtype(_DTYPES[a["dtype"]]).itemsize
        for a in meta["arrays"]
    )
    if expected != len(payload):
        raise PayloadSizeError(
            f"{path}: payload holds {len(payload)} bytes, manifest declares {expected}"
        )
    arrays = {}
    offset = 0
    for a in meta["arrays"]:
        dt = np.dtype(_DTYPES[a["dtype"]])
        count = int(np.prod(a["shape"], dtype=np.int64))
        arrays[a["name"]] = np.frombuffer(
            payload, dtype=dt, count=count, offset=offset
        ).reshape(a["shape"]).copy()
        offset += count * dt.itemsize
    return meta["kind"], arrays, meta["config"]


# --- per-kind encode/decode -------------------------------------------------


def _encode(obj):
    if isinstance(obj, PcaModel):
        return "pca", [
            ("mean", obj.mean, "f64"),
            ("components", obj.components, "f64"),
            ("explained_variance_ratio", obj.explained_variance_ratio, "f64"),
            ("degenerate", obj.degenerate.astype(np.uint16), "u16"),
        ], {"input_dim": obj.input_dim, "k": obj.k, "seed": obj.seed}
    if isinstance(obj, Codebook):
        return "codebook", [
            ("centroids", obj.centroids, "f64"),
            ("objective_history", obj.objective_history, "f64"),
        ], {"seed": obj.seed, "iterations_run": obj.iterations_run,
            "final_objective": obj.final_objective}
    if isinstance(obj, EmbeddingTable):
        return "embedding", [
            ("input_vectors", obj.input_vectors, "f64"),
            ("output_vectors", obj.output_vectors, "f64"),
            ("epoch_losses", obj.epoch_losses, "f64"),
        ], {"d": obj.d, "sgns": dataclasses.asdict(obj.config)}
    if isinstance(obj, ClassifierHead):
        return "classifier_head", [
            ("W1", obj.W1, "f64"), ("b1", obj.b1, "f64"),
            ("W2", obj.W2, "f64"), ("b2", obj.b2, "f64"),
        ], {"labels": obj.labels}
    if isinstance(obj, StudentModel):
        return "student", [(name, getattr(obj, name), "f64") for name in obj.array_fields()], {
            "temperature": obj.temperature,
        }
    if isinstance(obj, MelFrameMatrix):
        return "mel_frames", [("frames", obj.frames, "f64")], {
            "frames_per_second": obj.frames_per_second,
            "normalized": obj.normalized,
            "clip_id": obj.clip_id,
        }
    if isinstance(obj, TeacherLogits):
        return "teacher_logits", [("logits", obj.logits, "f64")], {"clip_ids": obj.clip_ids}
    raise TypeError(f"no persistence mapping for {type(obj).__name__}")


def _decode(kind: str, arrays: dict, config: dict):
    if kind == "pca":
        model = PcaModel(
            mean=arrays["mean"], components=arrays["components"],
            explained_variance_ratio=arrays["explained_variance_ratio"],
            input_dim=config["input_dim"], k=config["k"], seed=config["seed"],
            degenerate=arrays["degenerate"].astype(bool),
        )
        model.validate()
        return model
    if kind == "codebook":
        return Codebook(
            centroids=arrays["centroids"], seed=config["seed"],
            iterations_run=config["iterations_run"],
            final_objective=config["final_objective"],
            objective_history=arrays["objective_history"],
        )
    if kind == "embedding":
        return EmbeddingTable(
            input_vectors=arrays["input_vectors"],
            output_vectors=arrays["output_vectors"],
            d=config["d"], config=SgnsConfig(**config["sgns"]),
            epoch_losses=arrays["epoch_losses"],
        )
    if kind == "classifier_head":
        return ClassifierHead(W1=arrays["W1"], b1=arrays["b1"], W2=arrays["W2"], b2=arrays["b2"],
                              labels=config.get("labels"))
    if kind == "student":
        return StudentModel(**arrays, temperature=config["temperature"])
    if kind == "mel_frames":
        return MelFrameMatrix(
            frames=arrays["frames"], frames_per_second=config["frames_per_second"],
            normalized=config["normalized"], clip_id=config.get("clip_id", ""),
        )
    if kind == "teacher_logits":
        return TeacherLogits(clip_ids=list(config["clip_ids"]), logits=arrays["logits"])
    raise KindError(f"unknown object kind {kind!r}")


def save_object(obj, path) -> None:
    """Persist any registered domain object; the write is atomic."""
    kind, arrays, config = _encode(obj)
    _atomic_write(path, _pack_container(kind, arrays, config))


def load_object(path, expected_kind: str | None = None):
    """Load a container file back into its domain object.

    Validates magic, version and byte counts, then the object's own
    invariants. ``expected_kind`` turns a kind mismatch into a KindError
    instead of returning a surprise type.
    """
    kind, arrays, config = _unpack_container(path)
    if expected_kind is not None and kind != expected_kind:
        raise KindError(f"{path}: holds {kind!r}, expected {expected_kind!r}")
    try:
        return _decode(kind, arrays, config)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed {kind!r} container ({exc})") from exc


# --- token files --------------------------------------------------------------


def save_tokens(seq: TokenSequence, path, vocab_size: int) -> None:
    """Write a token sequence in the compact little-endian token format."""
    if not 1 <= vocab_size <= MAX_VOCAB:
        raise InvariantError(f"vocab_size {vocab_size} exceeds the 2-byte token space")
    if len(seq) and int(seq.tokens.max()) >= vocab_size:
        raise InvariantError(f"token {int(seq.tokens.max())} >= declared vocab {vocab_size}")
    clip_id = seq.clip_id.encode("utf-8")
    if len(clip_id) > 0xFFFF:
        raise InvariantError("clip_id longer than 65535 bytes")
    header = TOKENS_MAGIC + struct.pack(
        "<BH", VERSION, len(clip_id)
    ) + clip_id + struct.pack("<dIQ", seq.frames_per_second, vocab_size, len(seq))
    _atomic_write(path, header + seq.tokens.astype("<u2").tobytes())


def load_tokens(path) -> tuple[TokenSequence, int]:
    """Read a token file; returns (sequence, declared vocab size)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if len(blob) < 7 or blob[:4] != TOKENS_MAGIC:
        raise BadMagicError(f"{path}: not a token file (bad magic)")
    version, id_len = struct.unpack_from("<BH", blob, 4)
    if version != VERSION:
        raise BadVersionError(f"{path}: unknown token file version {version}")
    offset = 7
    if len(blob) < offset + id_len + 20:
        raise PayloadSizeError(f"{path}: truncated header")
    clip_id = blob[offset : offset + id_len].decode("utf-8")
    offset += id_len
    fps, vocab_size, length = struct.unpack_from("<dIQ", blob, offset)
    offset += 20
    if vocab_size > MAX_VOCAB:
        raise InvariantError(f"{path}: vocab {vocab_size} exceeds the 2-byte token space")
    if len(blob) - offset != 2 * length:
        raise PayloadSizeError(
            f"{path}: {len(blob) - offset} payload bytes for {length} declared tokens"
        )
    tokens = np.frombuffer(blob, dtype="<u2", count=length, offset=offset).copy()
    if tokens.size and int(tokens.max()) >= vocab_size:
        raise InvariantError(f"{path}: token {int(tokens.max())} >= declared vocab {vocab_size}")
    return TokenSequence(clip_id=clip_id, tokens=tokens, frames_per_second=fps), int(vocab_size)
