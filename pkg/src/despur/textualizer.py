"""Turning failure rows into named (class, background) failure modes.

A language-model client proposes uncommon backgrounds per class; the
candidates are deduplicated, embedded through a prompt template, and each
failing image embedding is attributed to the candidate background whose
prompt embedding it is closest to in cosine. Per-class frequency counts of
those attributions yield the top-k failure modes that drive synthesis.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .interchange import FeatureSet

# Prompt used both for attribution candidates and generation.
PAIR_TEMPLATE_DEFAULT = "A photo of {class_name} {background}"
# Plainer pairing, selectable through config.
PAIR_TEMPLATE_ALT = "{class_name} in {background}"
# Background-free prompt for the random-debugging baseline.
CLASS_ONLY_TEMPLATE = "A photo of {class_name}"
# Vocabulary query sent to the language model.
VOCAB_QUERY_TEMPLATE = "What are the uncommon backgrounds that a {class_name} can appear in?"

PAIR_TEMPLATES = {"default": PAIR_TEMPLATE_DEFAULT, "alt": PAIR_TEMPLATE_ALT}

DEFAULT_DEDUP_THRESHOLD = 0.9
DEFAULT_TOP_K = 5


class ClientError(RuntimeError):
    """A client call failed."""


class RetrievalError(RuntimeError):
    """No cached response and the client call failed."""


class ResponseParseError(ValueError):
    """Raw response yielded no background phrases."""

    def __init__(self, raw: str):
        super().__init__(f"could not parse any background phrase from response: {raw!r}")
        self.raw = raw


class EmbedderError(RuntimeError):
    """Text embedding lookup or call failed."""


class LanguageModelClient(Protocol):
    identity: str

    def complete(self, prompt: str) -> str: ...


class TextEmbedder(Protocol):
    identity: str

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...


class FixtureLanguageModel:
    """Replays recorded prompt -> response pairs from a JSON file."""

    def __init__(self, path: str | os.PathLike):
        with open(path, "r", encoding="utf-8") as stream:
            data = json.load(stream)
        self.responses: dict[str, str] = dict(data["responses"])
        self.identity = f"fixture:{Path(path).name}"

    def complete(self, prompt: str) -> str:
        if prompt not in self.responses:
            raise ClientError(f"fixture has no recorded response for prompt {prompt!r}")
        return self.responses[prompt]


class HttpLanguageModel:
    """POSTs {"prompt": ...} to a JSON endpoint returning {"text": ...}."""

    def __init__(self, url: str, api_key_env: str = "DESPUR_API_KEY", timeout: float = 60.0):
        self.url = url
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.identity = f"http:{url}"

    def complete(self, prompt: str) -> str:
        import requests

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                self.url, json={"prompt": prompt}, headers=headers, timeout=self.timeout
            )
            resp.raise_for_status()
            return resp.json()["text"]
        except Exception as exc:
            raise ClientError(f"language model call to {self.url} failed: {exc}") from exc


class ResponseCache:
    """One JSON file per (client, prompt) pair under a cache directory."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, identity: str, prompt: str) -> Path:
        digest = hashlib.sha256(f"{identity}\x00{prompt}".encode("utf-8")).hexdigest()[:24]
        return self.directory / f"{digest}.json"

    def get(self, identity: str, prompt: str) -> str | None:
        path = self._path(identity, prompt)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as stream:
            return json.load(stream)["response"]

    def put(self, identity: str, prompt: str, response: str):
        payload = json.dumps(
            {"client": identity, "prompt": prompt, "response": response},
            sort_keys=True,
            indent=2,
        )
        self._path(identity, prompt).write_text(payload, encoding="utf-8")


class FsetLookupEmbedder:
    """Serves text embeddings from a feature file whose row ids are the texts.

    Lets a pipeline run against pre-exported prompt embeddings instead of a
    live encoder; every prompt the run renders must already be a row id.
    """

    def __init__(self, path: str | os.PathLike):
        from .interchange import read_feature_set

        self._table = read_feature_set(path)
        self.identity = f"fset:{Path(path).name}"

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self._table.dim))
        for i, text in enumerate(texts):
            try:
                row = self._table.index_of(text)
            except KeyError as exc:
                raise EmbedderError(f"no stored embedding for text {text!r}") from exc
            out[i] = self._table.features[row].astype(np.float64)
        return out


_ENUMERATION = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_background_response(raw: str) -> list[str]:
    """Split a raw response into background phrases.

    Handles bullet or numbered lists and comma/semicolon separated lines.
    Duplicates are preserved; deduplication is a separate stage.
    """
    phrases: list[str] = []
    for line in raw.splitlines():
        line = _ENUMERATION.sub("", line.strip())
        for piece in re.split(r"[,;]", line):
            piece = piece.strip().rstrip(".").strip()
            if piece:
                phrases.append(piece)
    if not phrases:
        raise ResponseParseError(raw)
    return phrases


def fetch_uncommon_backgrounds(
    class_name: str,
    client: LanguageModelClient,
    query_template: str = VOCAB_QUERY_TEMPLATE,
    cache: ResponseCache | None = None,
) -> list[str]:
    """Ask (or replay) the vocabulary query for one class.

    The cache is consulted first, keyed by (client identity, prompt), so a
    cached class needs no live client at all. A live response is written
    back to the cache before parsing.
    """
    prompt = query_template.format(class_name=class_name)
    raw = cache.get(client.identity, prompt) if cache is not None else None
    if raw is None:
        try:
            raw = client.complete(prompt)
        except Exception as exc:
            raise RetrievalError(
                f"no cached response for class {class_name!r} and the client call failed: {exc}"
            ) from exc
        if cache is not None:
            cache.put(client.identity, prompt, raw)
    return parse_background_response(raw)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return matrix / safe


def dedup_backgrounds(
    candidates: Sequence[str],
    embedder: TextEmbedder,
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
) -> list[str]:
    """Exact then greedy semantic dedup, keeping first occurrences.

    Exact: casefolded, whitespace-collapsed equality. Semantic: a candidate
    is dropped when its embedding's cosine with any already-kept candidate
    exceeds the threshold.
    """
    exact: list[str] = []
    seen: set[str] = set()
    for cand in candidates:
        key = " ".join(cand.split()).casefold()
        if key and key not in seen:
            seen.add(key)
            exact.append(cand)
    if len(exact) <= 1:
        return exact
    vectors = _normalize_rows(embedder.embed_texts(exact))
    kept_idx: list[int] = []
    for i in range(len(exact)):
        if kept_idx:
            sims = vectors[kept_idx] @ vectors[i]
            if float(sims.max()) > threshold:
                continue
        kept_idx.append(i)
    return [exact[i] for i in kept_idx]


@dataclass
class CatalogEntry:
    background: str
    embedding: np.ndarray  # unit norm


@dataclass
class BackgroundCatalog:
    """Per-class candidate backgrounds with prompt embeddings."""

    class_names: list[str]
    entries: list[list[CatalogEntry]]  # indexed by class
    prompt_template: str = PAIR_TEMPLATE_DEFAULT

    def __post_init__(self):
        if len(self.entries) != len(self.class_names):
            raise ValueError("one entry list per class required")
        for class_idx, rows in enumerate(self.entries):
            seen = set()
            for entry in rows:
                if not entry.background:
                    raise ValueError(f"empty background string in class {class_idx}")
                if entry.background in seen:
                    raise ValueError(
                        f"duplicate background {entry.background!r} in class {class_idx}"
                    )
                seen.add(entry.background)
                entry.embedding = np.asarray(entry.embedding, dtype=np.float64)
                norm = np.linalg.norm(entry.embedding)
                if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
                    raise ValueError(
                        f"embedding of {entry.background!r} is not unit norm (|v|={norm})"
                    )

    def candidates(self, class_index: int) -> list[CatalogEntry]:
        return self.entries[class_index]

    def backgrounds(self, class_index: int) -> list[str]:
        return [e.background for e in self.entries[class_index]]

    def save(self, json_path: str | os.PathLike, fset_path: str | os.PathLike):
        """JSON for the names and template, FSET1 block for embeddings."""
        from .interchange import write_feature_set

        meta = {
            "prompt_template": self.prompt_template,
            "classes": [
                {"index": i, "name": name, "backgrounds": self.backgrounds(i)}
                for i, name in enumerate(self.class_names)
            ],
            "embeddings_file": str(Path(fset_path).name),
        }
        Path(json_path).write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
        ids, labels, rows = [], [], []
        for i, per_class in enumerate(self.entries):
            for entry in per_class:
                ids.append(f"{i}|{entry.background}")
                labels.append(i)
                rows.append(entry.embedding)
        dim = rows[0].shape[0] if rows else 1
        fs = FeatureSet(
            dim=dim,
            ids=ids,
            labels=np.asarray(labels, dtype=np.int64),
            features=np.asarray(rows, dtype=np.float32).reshape(len(rows), dim),
            class_names=self.class_names,
            source_tag="background_prompts",
        )
        write_feature_set(fs, fset_path)

    @classmethod
    def load(cls, json_path: str | os.PathLike, fset_path: str | os.PathLike | None = None):
        from .interchange import read_feature_set

        meta = json.loads(Path(json_path).read_text(encoding="utf-8"))
        if fset_path is None:
            fset_path = Path(json_path).parent / meta["embeddings_file"]
        fs = read_feature_set(fset_path)
        class_names = [c["name"] for c in sorted(meta["classes"], key=lambda c: c["index"])]
        entries: list[list[CatalogEntry]] = [[] for _ in class_names]
        index = {row_id: i for i, row_id in enumerate(fs.ids)}
        for c in meta["classes"]:
            for background in c["backgrounds"]:
                row = index[f"{c['index']}|{background}"]
                vec = fs.features[row].astype(np.float64)
                vec = vec / np.linalg.norm(vec)
                entries[c["index"]].append(CatalogEntry(background, vec))
        return cls(
            class_names=class_names, entries=entries, prompt_template=meta["prompt_template"]
        )


def build_catalog(
    class_names: Sequence[str],
    lm_client: LanguageModelClient,
    embedder: TextEmbedder,
    prompt_template: str = PAIR_TEMPLATE_DEFAULT,
    query_template: str = VOCAB_QUERY_TEMPLATE,
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD,
    cache: ResponseCache | None = None,
) -> BackgroundCatalog:
    """Fetch, dedup and embed candidate backgrounds for every class."""
    entries: list[list[CatalogEntry]] = []
    for class_name in class_names:
        raw = fetch_uncommon_backgrounds(class_name, lm_client, query_template, cache)
        backgrounds = dedup_backgrounds(raw, embedder, dedup_threshold)
        prompts = [
            prompt_template.format(class_name=class_name, background=b) for b in backgrounds
        ]
        vectors = _normalize_rows(embedder.embed_texts(prompts))
        entries.append(
            [CatalogEntry(b, v) for b, v in zip(backgrounds, vectors)]
        )
    return BackgroundCatalog(
        class_names=list(class_names), entries=entries, prompt_template=prompt_template
    )


def attribute_background(
    image_embedding: np.ndarray, class_index: int, catalog: BackgroundCatalog
) -> tuple[str, float]:
    """Nearest candidate of the row's true class by cosine.

    Ties resolve to the earliest catalog entry. Only the true class's
    candidate list is ever consulted.
    """
    entries = catalog.candidates(class_index)
    if not entries:
        raise ValueError(f"class {class_index} has no candidate backgrounds")
    x = np.asarray(image_embedding, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm > 0:
        x = x / norm
    scores = np.stack([e.embedding for e in entries]) @ x
    best = int(np.argmax(scores))
    return entries[best].background, float(scores[best])


@dataclass
class AttributionRow:
    row_id: str
    class_index: int
    background: str
    score: float


@dataclass
class AttributionReport:
    rows: list[AttributionRow]
    frequencies: dict[int, dict[str, int]]
    top_k: dict[int, list[str]]
    k: int = DEFAULT_TOP_K

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "rows": [
                    {
                        "row_id": r.row_id,
                        "class_index": r.class_index,
                        "background": r.background,
                        "score": r.score,
                    }
                    for r in self.rows
                ],
                "frequencies": {str(c): f for c, f in sorted(self.frequencies.items())},
                "top_k": {str(c): b for c, b in sorted(self.top_k.items())},
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AttributionReport":
        data = json.loads(text)
        return cls(
            rows=[AttributionRow(**r) for r in data["rows"]],
            frequencies={int(c): dict(f) for c, f in data["frequencies"].items()},
            top_k={int(c): list(b) for c, b in data["top_k"].items()},
            k=data["k"],
        )


def attribute_failures(
    pool: FeatureSet, row_ids: Iterable[str], catalog: BackgroundCatalog
) -> list[AttributionRow]:
    """Attribute each failure row (by id) against its true class's candidates."""
    rows = []
    for row_id in row_ids:
        idx = pool.index_of(row_id)
        class_index = int(pool.labels[idx])
        background, score = attribute_background(pool.features[idx], class_index, catalog)
        rows.append(AttributionRow(row_id, class_index, background, score))
    return rows


def top_k_backgrounds(
    attributions: Sequence[AttributionRow],
    catalog: BackgroundCatalog,
    k: int = DEFAULT_TOP_K,
) -> dict[int, list[str]]:
    """Most frequent attributed backgrounds per class; ties by catalog order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    result: dict[int, list[str]] = {}
    by_class: dict[int, Counter] = {}
    for row in attributions:
        by_class.setdefault(row.class_index, Counter())[row.background] += 1
    for class_index, counts in by_class.items():
        order = {b: i for i, b in enumerate(catalog.backgrounds(class_index))}
        ranked = sorted(counts, key=lambda b: (-counts[b], order.get(b, len(order))))
        result[class_index] = ranked[:k]
    return result


def build_attribution_report(
    pool: FeatureSet,
    row_ids: Iterable[str],
    catalog: BackgroundCatalog,
    k: int = DEFAULT_TOP_K,
) -> AttributionReport:
    rows = attribute_failures(pool, row_ids, catalog)
    frequencies: dict[int, dict[str, int]] = {}
    for row in rows:
        frequencies.setdefault(row.class_index, {}).setdefault(row.background, 0)
        frequencies[row.class_index][row.background] += 1
    return AttributionReport(
        rows=rows,
        frequencies=frequencies,
        top_k=top_k_backgrounds(rows, catalog, k),
        k=k,
    )
