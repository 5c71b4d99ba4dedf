"""Writer for the FSET1 embedding container.

Layout, all little-endian: the 5-byte magic ``FSET1``, a u32 row count,
a u32 dimension, ``count * dim`` float32 values row-major, a UTF-8 JSON
trailer holding ``ids``/``labels``/``class_names``/``source_tag``, and
the trailer's byte length as a trailing u64. Files are written to a
temporary name in the destination directory and renamed into place, so
a reader never sees a half-written container.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FSET1"


class ExportError(ValueError):
    """A job or its content violates the export contract."""


def _validated_rows(
    ids: Sequence[str],
    labels: Sequence[int],
    features: np.ndarray,
    class_names: Sequence[str],
) -> tuple[list[str], np.ndarray, np.ndarray, list[str]]:
    ids = list(ids)
    class_names = list(class_names)
    if not class_names:
        raise ExportError("class_names must be non-empty")
    seen: set[str] = set()
    for row_id in ids:
        if not isinstance(row_id, str) or not row_id:
            raise ExportError(f"row id {row_id!r} must be a non-empty string")
        if row_id in seen:
            raise ExportError(f"duplicate row id {row_id!r}")
        seen.add(row_id)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(ids),):
        raise ExportError(f"{len(labels)} labels for {len(ids)} ids")
    if len(ids) and (labels.min() < 0 or labels.max() >= len(class_names)):
        raise ExportError("label outside the class vocabulary")
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] != len(ids) or features.shape[1] < 1:
        raise ExportError(
            f"features shape {features.shape} does not match {len(ids)} rows"
        )
    if len(ids) and not np.isfinite(features).all():
        raise ExportError("non-finite feature value")
    return ids, labels, features, class_names


def build_fset_bytes(
    ids: Sequence[str],
    labels: Sequence[int],
    features: np.ndarray,
    class_names: Sequence[str],
    source_tag: str = "export",
) -> bytes:
    """Serialize one container to bytes; validates every invariant."""
    ids, labels, features, class_names = _validated_rows(
        ids, labels, features, class_names
    )
    count, dim = features.shape
    trailer = json.dumps(
        {
            "ids": ids,
            "labels": labels.tolist(),
            "class_names": class_names,
            "source_tag": source_tag,
        },
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return b"".join(
        [
            struct.pack("<5sII", MAGIC, count, dim),
            features.astype("<f4").tobytes(order="C"),
            trailer,
            struct.pack("<Q", len(trailer)),
        ]
    )


def feature_hash(features: np.ndarray) -> str:
    """sha256 of the row-major float32 little-endian feature block."""
    return hashlib.sha256(
        np.asarray(features, dtype="<f4").tobytes(order="C")
    ).hexdigest()


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as stream:
            stream.write(payload)
            stream.flush()
            os.fsync(stream.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_fset(
    path: str | os.PathLike,
    ids: Sequence[str],
    labels: Sequence[int],
    features: np.ndarray,
    class_names: Sequence[str],
    source_tag: str = "export",
) -> str:
    """Write one container atomically; returns the feature hash."""
    payload = build_fset_bytes(ids, labels, features, class_names, source_tag)
    atomic_write_bytes(path, payload)
    return feature_hash(features)


def write_manifest(path: str | os.PathLike, manifest: dict) -> Path:
    payload = (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8")
    return atomic_write_bytes(path, payload)
