"""Binary interchange container for labeled embedding sets.

Every pipeline stage communicates through ``FeatureSet`` values and their
on-disk form, the FSET1 container:

    offset  size            field
    ------  ----            -----
    0       5               magic ``FSET1``
    5       4               row count, little-endian uint32
    9       4               feature dim, little-endian uint32
    13      4*count*dim     features, row-major little-endian IEEE-754 float32
    ...     trailer_len     UTF-8 JSON trailer
    end-8   8               trailer_len, little-endian uint64

The trailer holds ``ids``, ``labels``, ``class_names`` and ``source_tag``.
Writes are deterministic (sorted JSON keys, fixed separators), so equal
sets serialize to equal bytes and round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"FSET1"

_HEADER = struct.Struct("<5sII")
_TRAILER_LEN = struct.Struct("<Q")


class FormatError(ValueError):
    """Byte stream is not an FSET1 container."""


class CorruptionError(ValueError):
    """Container is structurally FSET1 but internally inconsistent."""


class ValidationError(ValueError):
    """Decoded content violates a FeatureSet invariant."""


class ShapeMismatchError(ValueError):
    """Feature dimensions of two sets disagree."""


class VocabularyError(ValueError):
    """Class vocabularies of two sets disagree."""


class SinkWriteError(OSError):
    """Write to the destination failed; ``bytes_written`` is the offset."""

    def __init__(self, bytes_written: int, cause: OSError):
        super().__init__(f"sink write failed at byte offset {bytes_written}: {cause}")
        self.bytes_written = bytes_written


@dataclass(eq=False)
class FeatureSet:
    """An immutable labeled set of embedding rows.

    Invariants, enforced at construction: ids unique and non-empty,
    features finite float32 of shape (len(ids), dim), every label a
    valid index into class_names.
    """

    dim: int
    ids: list[str]
    labels: np.ndarray
    features: np.ndarray
    class_names: list[str]
    source_tag: str

    def __post_init__(self):
        self.ids = list(self.ids)
        self.class_names = list(self.class_names)
        # Private copies so the read-only flag below never leaks to callers.
        self.labels = np.array(self.labels, dtype=np.int64, copy=True)
        self.features = np.array(self.features, dtype=np.float32, copy=True)
        self._validate()
        # Shared-read safety: rows never mutate after construction.
        self.labels.setflags(write=False)
        self.features.setflags(write=False)

    def _validate(self):
        if int(self.dim) < 1:
            raise ValidationError(f"dim must be a positive integer, got {self.dim}")
        self.dim = int(self.dim)
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape != (n, self.dim):
            raise ValidationError(
                f"features shape {self.features.shape} does not match "
                f"{n} rows of dim {self.dim}"
            )
        if self.labels.shape != (n,):
            raise ValidationError(
                f"labels shape {self.labels.shape} does not match {n} rows"
            )
        if not self.class_names:
            raise ValidationError("class_names must be non-empty")
        if n:
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < 0 or hi >= len(self.class_names):
                bad = int(np.argmax((self.labels < 0) | (self.labels >= len(self.class_names))))
                raise ValidationError(
                    f"label {int(self.labels[bad])} of row {self.ids[bad]!r} is outside "
                    f"the {len(self.class_names)}-class vocabulary"
                )
            finite = np.isfinite(self.features).all(axis=1)
            if not finite.all():
                bad = int(np.argmin(finite))
                raise ValidationError(f"non-finite feature value in row {self.ids[bad]!r}")
        seen: set[str] = set()
        for row_id in self.ids:
            if not isinstance(row_id, str) or not row_id:
                raise ValidationError(f"row id {row_id!r} must be a non-empty string")
            if row_id in seen:
                raise ValidationError(f"duplicate row id {row_id!r}")
            seen.add(row_id)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and self.class_names == other.class_names
            and self.source_tag == other.source_tag
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(
                self.features.view(np.uint32), other.features.view(np.uint32)
            )
        )

    def index_of(self, row_id: str) -> int:
        index = self._id_index().get(row_id)
        if index is None:
            raise KeyError(row_id)
        return index

    def _id_index(self) -> dict[str, int]:
        cached = getattr(self, "_index_cache", None)
        if cached is None:
            cached = {row_id: i for i, row_id in enumerate(self.ids)}
            self._index_cache = cached
        return cached

    def select_ids(self, row_ids: Iterable[str]) -> "FeatureSet":
        """Subset preserving the given id order; unknown ids raise KeyError."""
        rows = [self.index_of(r) for r in row_ids]
        return FeatureSet(
            dim=self.dim,
            ids=[self.ids[i] for i in rows],
            labels=self.labels[rows] if rows else np.zeros(0, dtype=np.int64),
            features=self.features[rows] if rows else np.zeros((0, self.dim), dtype=np.float32),
            class_names=self.class_names,
            source_tag=self.source_tag,
        )


def _trailer_bytes(fs: FeatureSet) -> bytes:
    trailer = {
        "ids": fs.ids,
        "labels": [int(v) for v in fs.labels],
        "class_names": fs.class_names,
        "source_tag": fs.source_tag,
    }
    return json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8")


def container_size(count: int, dim: int, trailer_len: int) -> int:
    # header (5+4+4) + float block + trailer + trailing length word
    return 13 + 4 * count * dim + trailer_len + 8


def write_feature_set(fs: FeatureSet, dest: BinaryIO | str | os.PathLike) -> int:
    """Serialize ``fs`` to ``dest``; returns the byte count written."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as sink:
            return write_feature_set(fs, sink)

    written = 0

    def put(chunk: bytes):
        nonlocal written
        try:
            dest.write(chunk)
        except OSError as exc:
            raise SinkWriteError(written, exc) from exc
        written += len(chunk)

    trailer = _trailer_bytes(fs)
    put(_HEADER.pack(MAGIC, len(fs), fs.dim))
    put(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())
    put(trailer)
    put(_TRAILER_LEN.pack(len(trailer)))
    return written


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise CorruptionError(f"truncated container: expected {n} bytes of {what}, got {len(data)}")
    return data


def read_feature_set(source: BinaryIO | str | os.PathLike | bytes) -> FeatureSet:
    """Decode an FSET1 container, validating structure and content."""
    if isinstance(source, bytes):
        return read_feature_set(io.BytesIO(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as stream:
            return read_feature_set(stream)

    magic = source.read(5)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    count, dim = struct.unpack("<II", _read_exact(source, 8, "header"))
    floats = _read_exact(source, 4 * count * dim, "feature block")
    rest = source.read()
    if len(rest) < 8:
        raise CorruptionError("truncated container: missing trailer length word")
    (trailer_len,) = _TRAILER_LEN.unpack(rest[-8:])
    if trailer_len != len(rest) - 8:
        raise CorruptionError(
            f"trailer length word says {trailer_len} bytes, found {len(rest) - 8}"
        )
    try:
        trailer = json.loads(rest[:-8].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"trailer is not valid JSON: {exc}") from exc
    for key in ("ids", "labels", "class_names", "source_tag"):
        if key not in trailer:
            raise CorruptionError(f"trailer missing {key!r}")
    if len(trailer["ids"]) != count or len(trailer["labels"]) != count:
        raise CorruptionError(
            f"trailer rows ({len(trailer['ids'])} ids, {len(trailer['labels'])} labels) "
            f"do not match header row count {count}"
        )
    if dim < 1:
        raise CorruptionError(f"header dim {dim} is not a positive integer")
    features = np.frombuffer(floats, dtype="<f4").reshape(count, dim)
    return FeatureSet(
        dim=dim,
        ids=trailer["ids"],
        labels=np.asarray(trailer["labels"], dtype=np.int64),
        features=features.astype(np.float32, copy=True),
        class_names=trailer["class_names"],
        source_tag=trailer["source_tag"],
    )


def merge_feature_sets(a: FeatureSet, b: FeatureSet) -> FeatureSet:
    """Concatenate two sets over one class vocabulary.

    Colliding row ids are de-collided by prefixing each side's ids with
    its source_tag. Merging with an empty set returns the other side.
    """
    if a.dim != b.dim:
        raise ShapeMismatchError(f"cannot merge dim {a.dim} with dim {b.dim}")
    if a.class_names != b.class_names:
        raise VocabularyError(
            f"class vocabularies differ: {a.class_names} vs {b.class_names}"
        )
    if len(b) == 0:
        return a
    if len(a) == 0:
        return b
    ids_a, ids_b = a.ids, b.ids
    if set(ids_a) & set(ids_b):
        ids_a = [f"{a.source_tag}:{r}" for r in ids_a]
        ids_b = [f"{b.source_tag}:{r}" for r in ids_b]
    tag = a.source_tag if a.source_tag == b.source_tag else f"{a.source_tag}+{b.source_tag}"
    return FeatureSet(
        dim=a.dim,
        ids=ids_a + ids_b,
        labels=np.concatenate([a.labels, b.labels]),
        features=np.vstack([a.features, b.features]),
        class_names=a.class_names,
        source_tag=tag,
    )
