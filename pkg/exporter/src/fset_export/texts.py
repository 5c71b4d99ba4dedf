"""Text-prompt export. Every row is L2-normalized; id = the prompt.

Two encoder families:

- ``hashed-bow[:dim[:seed]]``: a seeded hashed bag-of-words. Fully
  offline and deterministic, the default for tests and plumbing.
- ``st:<name>``: a sentence-transformers checkpoint (e.g.
  ``st:clip-ViT-B-32``). Needs the checkpoint on disk; loading failures
  surface as ExportError so offline runs fail early and clearly.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .format import ExportError, write_fset, write_manifest

_TOKEN = re.compile(r"[a-z0-9]+")


class HashedBagOfWords:
    def __init__(self, dim: int = 512, seed: int = 0):
        if dim < 1:
            raise ExportError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed
        self.identity = f"hashed-bow:{dim}:{seed}"

    def _bucket(self, token: str) -> tuple[int, float]:
        h = hashlib.sha256(f"{self.seed}|{token}".encode()).digest()
        return int.from_bytes(h[:8], "little") % self.dim, 1.0 if h[8] & 1 else -1.0

    def encode(self, prompts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(prompts), self.dim))
        for i, prompt in enumerate(prompts):
            for token in _TOKEN.findall(prompt.lower()):
                idx, sign = self._bucket(token)
                out[i, idx] += sign
            if not out[i].any():
                # all tokens cancelled (or none parsed): one whole-string bucket
                idx, _ = self._bucket(f"|{prompt}")
                out[i, idx] = 1.0
        return out


def _build_encoder(identifier: str):
    if identifier == "hashed-bow":
        return HashedBagOfWords()
    if identifier.startswith("hashed-bow:"):
        parts = identifier.split(":")
        try:
            dim = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (ValueError, IndexError):
            raise ExportError(f"bad encoder identifier {identifier!r}") from None
        return HashedBagOfWords(dim, seed)
    if identifier.startswith("st:"):
        name = identifier[3:]
        try:
            from sentence_transformers import SentenceTransformer

            model = SentenceTransformer(name)
        except Exception as exc:
            raise ExportError(
                f"text checkpoint {name!r} is not available: {exc}"
            ) from exc

        class _StEncoder:
            identity = identifier

            def encode(self, prompts):
                return np.asarray(model.encode(list(prompts)), dtype=np.float64)

        return _StEncoder()
    raise ExportError(f"unknown text model {identifier!r}")


def export_text_embeddings(
    model: str, prompts: Sequence[str], output: str
) -> dict:
    """Encode the prompts and write FSET1 + manifest."""
    prompts = list(prompts)
    if not prompts:
        raise ExportError("prompt list is empty")
    seen: set[str] = set()
    for prompt in prompts:
        if not isinstance(prompt, str) or not prompt.strip():
            raise ExportError(f"empty prompt {prompt!r}")
        if prompt in seen:
            raise ExportError(f"duplicate prompt {prompt!r}")
        seen.add(prompt)

    encoder = _build_encoder(model)
    rows = np.asarray(encoder.encode(prompts), dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ExportError("encoder produced a zero vector")
    rows = rows / norms

    digest = write_fset(
        output,
        prompts,
        np.zeros(len(prompts), dtype=np.int64),
        rows,
        class_names=["text"],
        source_tag=f"export:{encoder.identity}",
    )
    manifest = {
        "model": encoder.identity,
        "rows": len(prompts),
        "feature_dim": rows.shape[1],
        "feature_sha256": digest,
        "output": Path(output).name,
        "normalization": "l2, unit rows",
    }
    write_manifest(Path(output).with_suffix(".manifest.json"), manifest)
    return manifest
