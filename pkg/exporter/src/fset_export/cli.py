"""export-images / export-texts entry points.

Each command takes one JSON job file and prints the manifest path on
success. Exit codes: 0 on success, 2 on any job or validation error.

Image job: {"model", "weights", "directory", "label_map", "output",
"batch_size", "device"}; label_map is {relative_path: class_name} or a
list of {"path", "class"} entries.
Text job: {"model", "prompts", "output"}.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .format import ExportError
from .images import ImageJob, export_image_features
from .texts import export_text_embeddings


def _load_job(path: str) -> dict:
    try:
        job = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ExportError(f"job file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ExportError(f"job file {path} is not valid JSON: {exc}") from None
    if not isinstance(job, dict):
        raise ExportError(f"job file {path} must hold a JSON object")
    return job


def main_images(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-images", description="Export image features to FSET1"
    )
    parser.add_argument("job", help="JSON job file")
    args = parser.parse_args(argv)
    try:
        job = ImageJob.from_mapping(_load_job(args.job))
        export_image_features(job)
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 2
    print(Path(job.output).with_suffix(".manifest.json"))
    return 0


def main_texts(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-texts", description="Export text-prompt embeddings to FSET1"
    )
    parser.add_argument("job", help="JSON job file")
    args = parser.parse_args(argv)
    try:
        job = _load_job(args.job)
        for key in ("model", "prompts", "output"):
            if key not in job:
                raise ExportError(f"job is missing {key!r}")
        export_text_embeddings(job["model"], job["prompts"], job["output"])
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 2
    print(Path(job["output"]).with_suffix(".manifest.json"))
    return 0


if __name__ == "__main__":
    sys.exit(main_images())
