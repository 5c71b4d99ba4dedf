"""Image-directory export: one container row per decodable image."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .format import ExportError, write_fset, write_manifest
from .models import build_extractor, feature_dim


@dataclass
class ImageJob:
    """One export: a model, a labeled image directory, an output path.

    entries keep the label map's order; ids are the relative paths as
    listed. The list form of the label map can name a path twice, which
    is rejected up front (row ids must be unique).
    """

    model: str
    directory: str
    output: str
    entries: list[tuple[str, str]] = field(default_factory=list)
    weights: str = "pretrained"
    batch_size: int = 16
    device: str = "cpu"

    def __post_init__(self):
        if not self.entries:
            raise ExportError("label map lists no images")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")
        seen: set[str] = set()
        for path, _ in self.entries:
            if path in seen:
                raise ExportError(f"image {path!r} listed twice in one job")
            seen.add(path)

    @classmethod
    def from_mapping(cls, job: Mapping) -> "ImageJob":
        for key in ("model", "directory", "output", "label_map"):
            if key not in job:
                raise ExportError(f"job is missing {key!r}")
        label_map = job["label_map"]
        if isinstance(label_map, Mapping):
            entries = [(str(p), str(c)) for p, c in label_map.items()]
        elif isinstance(label_map, Sequence):
            try:
                entries = [(str(e["path"]), str(e["class"])) for e in label_map]
            except (TypeError, KeyError):
                raise ExportError(
                    "list-form label_map needs {'path': ..., 'class': ...} entries"
                ) from None
        else:
            raise ExportError("label_map must be a mapping or a list of entries")
        return cls(
            model=str(job["model"]),
            directory=str(job["directory"]),
            output=str(job["output"]),
            entries=entries,
            weights=str(job.get("weights", "pretrained")),
            batch_size=int(job.get("batch_size", 16)),
            device=str(job.get("device", "cpu")),
        )


def export_image_features(job: ImageJob) -> dict:
    """Run the extractor over the job's images and write FSET1 + manifest.

    Undecodable images are skipped with a warning and recorded in the
    manifest; a feature width differing from the registry is a hard error.
    """
    import torch
    from PIL import Image, UnidentifiedImageError

    model, transform, meta = build_extractor(job.model, job.weights, job.device)
    expected = feature_dim(job.model)
    root = Path(job.directory)

    # class vocabulary comes from the full label map, skipped rows included,
    # so reruns with a transient decode failure keep their label space
    class_names = sorted({cls for _, cls in job.entries})
    label_of = {name: i for i, name in enumerate(class_names)}

    ids: list[str] = []
    labels: list[int] = []
    tensors = []
    skipped: list[dict] = []
    for rel_path, cls in job.entries:
        try:
            with Image.open(root / rel_path) as img:
                tensors.append(transform(img.convert("RGB")))
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping undecodable image {rel_path!r}: {exc}")
            skipped.append({"path": rel_path, "reason": str(exc)})
            continue
        ids.append(rel_path)
        labels.append(label_of[cls])

    rows = []
    with torch.no_grad():  # batches are internally parallel via torch threads
        for start in range(0, len(tensors), job.batch_size):
            batch = torch.stack(tensors[start : start + job.batch_size])
            rows.append(model(batch.to(torch.device(job.device))).cpu().numpy())
    features = (
        np.concatenate(rows, axis=0)
        if rows
        else np.empty((0, expected), dtype=np.float32)
    )
    if features.shape[1] != expected:
        raise ExportError(
            f"{job.model} produced dim {features.shape[1]}, registry says {expected}"
        )

    digest = write_fset(
        job.output, ids, labels, features, class_names,
        source_tag=f"export:{job.model}",
    )
    manifest = dict(meta)
    manifest.update(
        {
            "rows": len(ids),
            "skipped": skipped,
            "class_names": class_names,
            "feature_sha256": digest,
            "output": Path(job.output).name,
        }
    )
    write_manifest(Path(job.output).with_suffix(".manifest.json"), manifest)
    return manifest
