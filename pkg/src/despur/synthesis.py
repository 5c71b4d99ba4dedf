"""Synthesizing targeted training data for named failure modes.

Each (class, background) failure mode becomes a GenerationRequest whose
prompt is rendered from the same template the attribution stage used. A
generator client answers a request with exactly n_samples embedding rows;
the rows are assembled into a FeatureSet tagged ``debug_train`` whose ids
encode (class, background, sample index).

Every client call can be journaled to disk and replayed later, so a
recorded experiment is reproducible without the original generator:

    journal_dir/
      journal.json          client identity, dim, one entry per call
      call_0000.fset        FSET1 block with that call's rows
      call_0001.fset        ...

Replay matches calls by (prompt, n_samples, rng_seed) and returns the
recorded rows bit-exactly.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .interchange import FeatureSet, read_feature_set, write_feature_set
from .seeds import derive_seed
from .textualizer import CLASS_ONLY_TEMPLATE, PAIR_TEMPLATE_DEFAULT, ClientError

DEFAULT_SAMPLES_PER_MODE = 5
DEBUG_TRAIN_TAG = "debug_train"


class ClientContractError(RuntimeError):
    """Generator returned the wrong row count, dim, or non-finite values."""


class ReplayMissError(KeyError):
    """Replay journal holds no recording for the requested call."""


@dataclass
class GenerationRequest:
    """One failure mode to synthesize data for.

    background None marks a background-free baseline request; the prompt
    must then name only the class.
    """

    class_index: int
    class_name: str
    prompt: str
    background: str | None = None
    n_samples: int = DEFAULT_SAMPLES_PER_MODE
    rng_seed: int = 0

    def __post_init__(self):
        if self.class_index < 0:
            raise ValueError("class_index must be >= 0")
        if not self.class_name:
            raise ValueError("class_name must be non-empty")
        if self.background is not None and not self.background:
            raise ValueError("background must be None or a non-empty string")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


class GeneratorClient(Protocol):
    identity: str

    def generate(self, request: GenerationRequest) -> np.ndarray: ...


def build_generation_prompts(
    class_name: str, backgrounds: Sequence[str], template: str = PAIR_TEMPLATE_DEFAULT
) -> list[str]:
    return [template.format(class_name=class_name, background=b) for b in backgrounds]


def build_requests(
    class_names: Sequence[str],
    per_class_backgrounds: dict[int, Sequence[str]],
    rng_seed: int,
    n_samples: int = DEFAULT_SAMPLES_PER_MODE,
    template: str = PAIR_TEMPLATE_DEFAULT,
) -> list[GenerationRequest]:
    """Targeted requests for every (class, background) failure mode.

    Request seeds derive from (rng_seed, "gen", class_index, background)
    alone, so the same mode always receives the same synthetic rows no
    matter which run or arm asks for it.
    """
    requests = []
    for class_index in sorted(per_class_backgrounds):
        class_name = class_names[class_index]
        for background in per_class_backgrounds[class_index]:
            requests.append(
                GenerationRequest(
                    class_index=class_index,
                    class_name=class_name,
                    background=background,
                    prompt=template.format(class_name=class_name, background=background),
                    n_samples=n_samples,
                    rng_seed=derive_seed(rng_seed, "gen", class_index, background),
                )
            )
    return requests


def _id_for(request: GenerationRequest, sample: int) -> str:
    background = request.background if request.background is not None else ""
    return f"gen|{request.class_name}|{background}|{sample:03d}"


def generate_debug_train(
    requests: Sequence[GenerationRequest],
    client: GeneratorClient,
    class_names: Sequence[str],
    expected_dim: int | None = None,
    source_tag: str = DEBUG_TRAIN_TAG,
) -> FeatureSet:
    """Run every request through the client and assemble one FeatureSet.

    Enforces the client contract: exactly n_samples rows per request, one
    consistent dim (matching expected_dim when given), all values finite.
    """
    if not requests:
        raise ValueError("no generation requests")
    seen_modes = set()
    for request in requests:
        mode = (request.class_index, request.background)
        if mode in seen_modes:
            raise ValueError(f"duplicate generation request for mode {mode}")
        seen_modes.add(mode)
        if not 0 <= request.class_index < len(class_names):
            raise ValueError(f"class_index {request.class_index} outside vocabulary")

    ids: list[str] = []
    labels: list[int] = []
    blocks: list[np.ndarray] = []
    dim = expected_dim
    for request in requests:
        rows = np.asarray(client.generate(request), dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != request.n_samples:
            raise ClientContractError(
                f"client {client.identity} returned shape {rows.shape} for "
                f"{request.n_samples} samples of {request.prompt!r}"
            )
        if dim is None:
            dim = rows.shape[1]
        if rows.shape[1] != dim:
            raise ClientContractError(
                f"client {client.identity} returned dim {rows.shape[1]}, expected {dim}"
            )
        if not np.isfinite(rows).all():
            raise ClientContractError(
                f"client {client.identity} returned non-finite values for {request.prompt!r}"
            )
        blocks.append(rows.astype(np.float32))
        ids.extend(_id_for(request, j) for j in range(request.n_samples))
        labels.extend([request.class_index] * request.n_samples)
    return FeatureSet(
        dim=int(dim),
        ids=ids,
        labels=np.asarray(labels, dtype=np.int64),
        features=np.vstack(blocks),
        class_names=list(class_names),
        source_tag=source_tag,
    )


def random_debug_train(
    class_names: Sequence[str],
    n_per_class: int,
    client: GeneratorClient,
    rng_seed: int,
    expected_dim: int | None = None,
    template: str = CLASS_ONLY_TEMPLATE,
) -> FeatureSet:
    """Background-free baseline set: n_per_class rows for every class."""
    requests = [
        GenerationRequest(
            class_index=i,
            class_name=name,
            background=None,
            prompt=template.format(class_name=name),
            n_samples=n_per_class,
            rng_seed=derive_seed(rng_seed, "gen-random", i),
        )
        for i, name in enumerate(class_names)
    ]
    return generate_debug_train(requests, client, class_names, expected_dim)


class JournalingGenerator:
    """Wraps a client, recording every call for later replay."""

    def __init__(self, client: GeneratorClient, directory: str | os.PathLike,
                 class_names: Sequence[str]):
        self.client = client
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.class_names = list(class_names)
        self.identity = client.identity
        self.calls: list[dict] = []
        self._dim: int | None = None

    def generate(self, request: GenerationRequest) -> np.ndarray:
        rows = np.asarray(self.client.generate(request), dtype=np.float64)
        file_name = f"call_{len(self.calls):04d}.fset"
        if rows.ndim == 2 and np.isfinite(rows).all():
            block = FeatureSet(
                dim=rows.shape[1],
                ids=[f"sample{j:03d}" for j in range(rows.shape[0])],
                labels=np.full(rows.shape[0], request.class_index, dtype=np.int64),
                features=rows.astype(np.float32),
                class_names=self.class_names,
                source_tag="journal",
            )
            write_feature_set(block, self.directory / file_name)
            self._dim = rows.shape[1]
            self.calls.append(
                {
                    "prompt": request.prompt,
                    "n_samples": request.n_samples,
                    "rng_seed": request.rng_seed,
                    "class_index": request.class_index,
                    "class_name": request.class_name,
                    "background": request.background,
                    "file": file_name,
                }
            )
            self._flush()
        return rows

    def _flush(self):
        payload = {
            "client": self.client.identity,
            "dim": self._dim,
            "calls": self.calls,
        }
        (self.directory / "journal.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8"
        )


class ReplayGenerator:
    """Serves recorded calls from a journal directory, bit-exactly."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        payload = json.loads((self.directory / "journal.json").read_text(encoding="utf-8"))
        self.identity = f"replay:{payload['client']}"
        self._by_key: dict[tuple, str] = {}
        for call in payload["calls"]:
            key = (call["prompt"], call["n_samples"], call["rng_seed"])
            self._by_key[key] = call["file"]

    def generate(self, request: GenerationRequest) -> np.ndarray:
        key = (request.prompt, request.n_samples, request.rng_seed)
        file_name = self._by_key.get(key)
        if file_name is None:
            raise ReplayMissError(
                f"journal has no recording for prompt={request.prompt!r} "
                f"n={request.n_samples} seed={request.rng_seed}"
            )
        block = read_feature_set(self.directory / file_name)
        return block.features.astype(np.float64)


class HttpGenerator:
    """POSTs {"prompt", "n", "seed"} and expects FSET1 bytes back."""

    def __init__(self, url: str, api_key_env: str = "DESPUR_API_KEY", timeout: float = 120.0):
        self.url = url
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.identity = f"http:{url}"

    def generate(self, request: GenerationRequest) -> np.ndarray:
        import requests

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                self.url,
                json={
                    "prompt": request.prompt,
                    "n": request.n_samples,
                    "seed": request.rng_seed,
                },
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
        except Exception as exc:
            raise ClientError(f"generator call to {self.url} failed: {exc}") from exc
        block = read_feature_set(io.BytesIO(resp.content))
        return block.features.astype(np.float64)
