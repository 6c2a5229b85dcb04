"""Embedding-level samples, their on-disk formats, image-disjoint splits and checkpoints.

Two sample formats are supported:

* ``jsonl`` -- one JSON object per line, vectors written as shortest
  float32 decimals. Meant for inspection.
* ``packed`` -- ``CQE1`` binary file with little-endian float32 vectors and a
  sidecar ``<path>.idx.json`` mapping ``sample_id`` to byte offset.

Checkpoints are single files: magic, JSON metadata header, float64 parameter
block and a trailing SHA-256 of everything before it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CorruptCheckpoint, DimensionMismatch, NonFiniteValue, ParseError,
                     StorageError, TooFewImages, VersionMismatch)
from .model import IMAGE_DIM, LABEL_DIM, SENTENCE_DIM, ModelConfig, ModelParams

DEFAULT_MAX_LABELS = 20

PACKED_MAGIC = b"CQE1"
_PACKED_HEADER = struct.Struct("<4sIIIII")  # magic, n_samples, k_max, d_img, d_lbl, d_sen
_RECORD_HEAD = struct.Struct("<HBd")         # n_labels, has_target, target

CKPT_MAGIC = b"CQEK"
CKPT_VERSION = 1


@dataclass
class Sample:
    sample_id: str
    image_id: str
    image: np.ndarray                 # (64,) float32
    labels: np.ndarray                # (n_labels, 256) float32, rank order
    sentence: np.ndarray              # (512,) float32
    target: float | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.sentence = np.asarray(self.sentence, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.float32)
        if labels.size == 0:
            labels = labels.reshape(0, LABEL_DIM)
        self.labels = labels
        if self.target is not None:
            self.target = float(self.target)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.image_id == other.image_id
                and self.target == other.target
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.sentence, other.sentence))


def validate_sample(s: Sample, max_labels: int = DEFAULT_MAX_LABELS) -> Sample:
    if s.image.shape != (IMAGE_DIM,):
        raise DimensionMismatch("image", IMAGE_DIM, s.image.shape[-1] if s.image.ndim else 0,
                                s.sample_id)
    if s.sentence.shape != (SENTENCE_DIM,):
        raise DimensionMismatch("sentence", SENTENCE_DIM,
                                s.sentence.shape[-1] if s.sentence.ndim else 0, s.sample_id)
    if s.labels.ndim != 2 or s.labels.shape[1] != LABEL_DIM:
        got = s.labels.shape[-1] if s.labels.ndim else 0
        raise DimensionMismatch("labels", LABEL_DIM, got, s.sample_id)
    if s.labels.shape[0] > max_labels:
        raise DimensionMismatch("labels (count)", f"<= {max_labels}", s.labels.shape[0], s.sample_id)
    for name in ("image", "labels", "sentence"):
        if not np.all(np.isfinite(getattr(s, name))):
            raise NonFiniteValue(f"sample {s.sample_id!r}: non-finite value in {name}")
    if s.target is not None and not math.isfinite(s.target):
        raise NonFiniteValue(f"sample {s.sample_id!r}: non-finite target")
    return s


def _detect_format(path, fmt):
    if fmt is not None:
        if fmt not in ("jsonl", "packed"):
            raise ValueError(f"unknown sample format {fmt!r}")
        return fmt
    return "jsonl" if str(path).endswith((".jsonl", ".json")) else "packed"


def _index_path(path) -> Path:
    return Path(str(path) + ".idx.json")


# -- jsonl ------------------------------------------------------------------

def _f32_list(arr):
    # str() of a numpy float32 is its shortest round-tripping decimal
    return [float(str(x)) for x in arr]


def sample_to_json(s: Sample) -> dict:
    obj = {
        "sample_id": s.sample_id,
        "image_id": s.image_id,
        "image": _f32_list(s.image),
        "labels": [_f32_list(row) for row in s.labels],
        "sentence": _f32_list(s.sentence),
    }
    if s.target is not None:
        obj["target"] = s.target
    return obj


def sample_from_json(obj, lineno=None, path=None) -> Sample:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno, path)
    try:
        labels = obj.get("labels", [])
        s = Sample(
            sample_id=str(obj["sample_id"]),
            image_id=str(obj["image_id"]),
            image=np.asarray(obj["image"], dtype=np.float64).astype(np.float32),
            labels=np.asarray(labels, dtype=np.float64).astype(np.float32)
            if labels else np.zeros((0, LABEL_DIM), np.float32),
            sentence=np.asarray(obj["sentence"], dtype=np.float64).astype(np.float32),
            target=obj.get("target"),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", lineno, path) from None
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad value: {exc}", lineno, path) from None
    return s


def _load_jsonl(path, max_labels):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno, path) from None
            out.append(validate_sample(sample_from_json(obj, lineno, path), max_labels))
    return out


def _save_jsonl(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s)))
            fh.write("\n")


# -- packed -----------------------------------------------------------------

def _encode_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError("identifier longer than 65535 bytes")
    return struct.pack("<H", len(b)) + b


def _save_packed(samples, path, max_labels):
    index = {}
    with open(path, "wb") as fh:
        fh.write(_PACKED_HEADER.pack(PACKED_MAGIC, len(samples), max_labels,
                                     IMAGE_DIM, LABEL_DIM, SENTENCE_DIM))
        for s in samples:
            index[s.sample_id] = fh.tell()
            fh.write(_encode_str(s.sample_id))
            fh.write(_encode_str(s.image_id))
            has_target = s.target is not None
            fh.write(_RECORD_HEAD.pack(len(s.labels), has_target,
                                       s.target if has_target else 0.0))
            fh.write(s.image.astype("<f4").tobytes())
            fh.write(s.labels.astype("<f4").tobytes())
            fh.write(s.sentence.astype("<f4").tobytes())
    with open(_index_path(path), "w", encoding="utf-8") as fh:
        json.dump(index, fh)


def _load_packed(path, max_labels):
    data = Path(path).read_bytes()
    if len(data) < _PACKED_HEADER.size:
        raise ParseError("file too short for packed header", path=path)
    magic, n, k_max, d_img, d_lbl, d_sen = _PACKED_HEADER.unpack_from(data, 0)
    if magic != PACKED_MAGIC:
        raise ParseError(f"bad magic {magic!r}", path=path)
    if (d_img, d_lbl, d_sen) != (IMAGE_DIM, LABEL_DIM, SENTENCE_DIM):
        raise DimensionMismatch("header dims", (IMAGE_DIM, LABEL_DIM, SENTENCE_DIM),
                                (d_img, d_lbl, d_sen))
    off = _PACKED_HEADER.size
    out = []

    def read_str():
        nonlocal off
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        s = data[off:off + ln].decode("utf-8")
        off += ln
        return s

    def read_vec(count):
        nonlocal off
        nbytes = 4 * count
        if off + nbytes > len(data):
            raise ParseError("truncated record", path=path)
        v = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += nbytes
        return v

    try:
        for i in range(n):
            sid, iid = read_str(), read_str()
            n_labels, has_target, target = _RECORD_HEAD.unpack_from(data, off)
            off += _RECORD_HEAD.size
            image = read_vec(IMAGE_DIM)
            labels = read_vec(n_labels * LABEL_DIM).reshape(n_labels, LABEL_DIM)
            sentence = read_vec(SENTENCE_DIM)
            s = Sample(sid, iid, image, labels, sentence, target if has_target else None)
            out.append(validate_sample(s, max(max_labels, k_max)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"corrupt packed record {len(out)}: {exc}", path=path) from None
    if off != len(data):
        raise ParseError("trailing bytes after last record", path=path)
    return out


def load_samples(path, format: str | None = None, max_labels: int = DEFAULT_MAX_LABELS) -> list:
    """Read and validate samples; order follows the file."""
    fmt = _detect_format(path, format)
    if fmt == "jsonl":
        return _load_jsonl(path, max_labels)
    return _load_packed(path, max_labels)


def save_samples(samples, path, format: str | None = None, force: bool = False,
                 max_labels: int = DEFAULT_MAX_LABELS) -> None:
    """Write samples. Refuses to replace an existing file unless ``force``.

    Writers need exclusive access to ``path``; nothing here locks it.
    """
    fmt = _detect_format(path, format)
    if os.path.exists(path) and not force:
        raise StorageError(f"{path} exists (pass force=True to overwrite)")
    for s in samples:
        validate_sample(s, max_labels)
    try:
        if fmt == "jsonl":
            _save_jsonl(samples, path)
        else:
            _save_packed(samples, path, max_labels)
    except OSError as exc:
        raise StorageError(str(exc)) from exc


# -- splitting --------------------------------------------------------------

def _fold_sizes(n, fractions):
    """Largest-remainder apportionment of ``n`` items."""
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_image_disjoint(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition samples into train/dev/test so that no image spans two folds.

    Unique image ids (in first-appearance order) are shuffled with ``seed``
    and dealt into folds of sizes proportional to ``fractions``.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("need three positive fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    images = list(dict.fromkeys(s.image_id for s in samples))
    sizes = _fold_sizes(len(images), fractions)
    if min(sizes) == 0:
        raise TooFewImages(f"{len(images)} images cannot fill folds {fractions}")
    perm = np.random.default_rng(seed).permutation(len(images))
    fold_of = {}
    start = 0
    for fold, size in enumerate(sizes):
        for j in perm[start:start + size]:
            fold_of[images[j]] = fold
        start += size
    folds = ([], [], [])
    for s in samples:
        folds[fold_of[s.image_id]].append(s)
    return folds


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    step: int = 0
    dev_spearman: float | None = None
    provenance: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.params.check(ckpt.config)
    blocks = ckpt.params.blocks()
    header = {
        "format_version": CKPT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "dev_spearman": ckpt.dev_spearman,
        "provenance": ckpt.provenance,
        "extra": ckpt.extra,
        "blocks": [[name, list(arr.shape)] for name, arr in blocks.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in blocks.values())
    payload = CKPT_MAGIC + struct.pack("<I", len(head)) + head + body
    with open(path, "wb") as fh:
        fh.write(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint; with ``expect``, refuse one built for other dimensions."""
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 4 + 32 or data[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint or truncated")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack_from("<I", payload, 4)
    header = json.loads(payload[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('format_version')}, "
                              f"expected {CKPT_VERSION}")
    config = ModelConfig.from_dict(header["config"])
    if expect is not None and (expect.proj_dim, expect.num_labels) != (config.proj_dim, config.num_labels):
        raise VersionMismatch(
            f"{path}: checkpoint has proj_dim={config.proj_dim}, num_labels={config.num_labels}; "
            f"requested proj_dim={expect.proj_dim}, num_labels={expect.num_labels}")
    off = 8 + hlen
    blocks = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape))
        blocks[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=off) \
            .astype(np.float64).reshape(shape)
        off += 8 * count
    if off != len(payload):
        raise CorruptCheckpoint(f"{path}: parameter block size mismatch")
    params = ModelParams.from_blocks(blocks)
    params.check(config)
    return Checkpoint(params, config, header["step"], header["dev_spearman"],
                      header["provenance"], header.get("extra", {}))
