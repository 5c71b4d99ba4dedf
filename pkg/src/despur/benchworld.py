"""A fully synthetic embedding world with planted background failure modes.

The world draws near-orthogonal unit direction vectors, one per class and
one per background. An image embedding is the normalized sum

    (1 - mix) * class_dir + mix * background_dir + sigma * gaussian

and the matching text embedding is the same sum without noise, so cosine
attribution against prompt embeddings is exact at sigma = 0. Backgrounds
co-occur with classes through a per-class probability row whose mass sits
on a small designated "common" subset; the evaluation split boosts the
rare remainder, which is what plants background failures in a head trained
on the biased training split.

Row ids of sampled datasets encode the drawn (class, background) pair.
They exist for oracle scoring only; the pipeline under test treats ids as
opaque strings.

All sampling is keyed per row: row i of class c in split s draws through a
seed sequence (seed, s, c, i, stream), so samples are independent of
iteration order and any subset can be regenerated in isolation.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .interchange import FeatureSet, read_feature_set, write_feature_set
from .textualizer import ClientError, EmbedderError

MAX_PAIRWISE_COSINE = 0.1

_STREAM_BACKGROUND = 0
_STREAM_NOISE = 1

TRAIN_SPLIT = 0
EVAL_SPLIT = 1
_SPLIT_TAGS = {TRAIN_SPLIT: "train", EVAL_SPLIT: "eval"}


@dataclass
class WorldParams:
    """Structure and geometry knobs; defaults are the desk-scale setup."""

    dim: int = 64
    n_classes: int = 8
    n_backgrounds: int = 12
    n_common_per_class: int = 1
    p_common: float = 1.0
    mix: float = 0.55
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.n_backgrounds < 2:
            raise ValueError("need at least two backgrounds")
        if self.dim < self.n_classes + self.n_backgrounds:
            raise ValueError(
                f"dim {self.dim} cannot hold {self.n_classes + self.n_backgrounds} "
                "near-orthogonal directions"
            )
        if not 1 <= self.n_common_per_class <= self.n_backgrounds:
            raise ValueError("n_common_per_class out of range")
        if not 0.0 < self.p_common <= 1.0:
            raise ValueError("p_common must be in (0, 1]")
        if not 0.0 <= self.mix < 1.0:
            raise ValueError("mix must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class WorldSpec:
    params: WorldParams
    class_names: list[str]
    background_names: list[str]
    class_dirs: np.ndarray  # (n_classes, dim) unit rows
    bg_dirs: np.ndarray  # (n_backgrounds, dim) unit rows
    cooccurrence: np.ndarray  # (n_classes, n_backgrounds), rows sum to 1
    common_mask: np.ndarray  # (n_classes, n_backgrounds) bool
    rng_seed: int

    def __post_init__(self):
        rows = self.cooccurrence.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-9:
            raise ValueError("cooccurrence rows must sum to 1 within 1e-9")
        dirs = np.vstack([self.class_dirs, self.bg_dirs])
        gram = dirs @ dirs.T
        off = gram - np.diag(np.diag(gram))
        if np.abs(np.diag(gram) - 1.0).max() > 1e-6:
            raise ValueError("direction rows must be unit norm")
        if np.abs(off).max() > MAX_PAIRWISE_COSINE:
            raise ValueError(
                f"pairwise |cosine| {np.abs(off).max():.4f} exceeds {MAX_PAIRWISE_COSINE}"
            )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.params), sort_keys=True).encode())
        h.update(self.class_dirs.astype("<f4").tobytes())
        h.update(self.bg_dirs.astype("<f4").tobytes())
        h.update(str(self.rng_seed).encode())
        return h.hexdigest()[:12]

    def rare_backgrounds(self, class_index: int) -> list[int]:
        return [b for b in range(self.params.n_backgrounds) if not self.common_mask[class_index, b]]


def _cooccurrence_layout(params: WorldParams) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic cyclic assignment of common backgrounds to classes."""
    c, b, k = params.n_classes, params.n_backgrounds, params.n_common_per_class
    mask = np.zeros((c, b), dtype=bool)
    for ci in range(c):
        offset = (ci * b) // c
        for j in range(k):
            mask[ci, (offset + j) % b] = True
    rows = np.zeros((c, b))
    for ci in range(c):
        common = mask[ci]
        rows[ci, common] = params.p_common / k
        n_rare = b - k
        if n_rare:
            rows[ci, ~common] = (1.0 - params.p_common) / n_rare
        rows[ci] /= rows[ci].sum()
    return rows, mask


def sample_world(params: WorldParams, rng_seed: int) -> WorldSpec:
    """Draw direction vectors and assemble the world.

    Directions come from orthonormalized seeded Gaussian draws, quantized
    to float32 so that a world survives serialization bit-exactly; the
    pairwise-cosine bound is checked after quantization and the draw is
    retried on violation.
    """
    rng = np.random.default_rng(rng_seed)
    total = params.n_classes + params.n_backgrounds
    for _ in range(100):
        raw = rng.standard_normal((params.dim, total))
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))  # canonical sign, deterministic
        # Quantize to float32 so the serialized world is bitwise the live one.
        dirs = q.T.astype(np.float32).astype(np.float64)
        gram = np.abs(dirs @ dirs.T - np.eye(total))
        if gram.max() <= MAX_PAIRWISE_COSINE:
            cooccurrence, mask = _cooccurrence_layout(params)
            return WorldSpec(
                params=params,
                class_names=[f"cls{i:02d}" for i in range(params.n_classes)],
                background_names=[f"bg{i:02d}" for i in range(params.n_backgrounds)],
                class_dirs=dirs[: params.n_classes],
                bg_dirs=dirs[params.n_classes :],
                cooccurrence=cooccurrence,
                common_mask=mask,
                rng_seed=rng_seed,
            )
    raise RuntimeError("could not draw a near-orthogonal direction set")


def world_image_embedding(
    world: WorldSpec, class_index: int, background_index: int, rng: np.random.Generator
) -> np.ndarray:
    """Unit-norm image embedding for (class, background) with world noise."""
    p = world.params
    v = (1.0 - p.mix) * world.class_dirs[class_index] + p.mix * world.bg_dirs[background_index]
    if p.noise_sigma > 0:
        v = v + p.noise_sigma * rng.standard_normal(p.dim)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("degenerate zero embedding")
    return v / norm


def world_text_embedding(
    world: WorldSpec, class_index: int, background_index: int | None = None
) -> np.ndarray:
    """Noise-free text embedding; background-free gives the bare class direction."""
    if background_index is None:
        return world.class_dirs[class_index].copy()
    p = world.params
    v = (1.0 - p.mix) * world.class_dirs[class_index] + p.mix * world.bg_dirs[background_index]
    return v / np.linalg.norm(v)


class RowPlan(NamedTuple):
    row_id: str
    class_index: int
    background_index: int
    split_code: int
    ordinal: int


@dataclass
class SplitPlan:
    train_rows_per_class: int = 200
    eval_rows_per_class: int = 200
    eval_rare_boost: float = 0.3

    def __post_init__(self):
        if self.train_rows_per_class < 1 or self.eval_rows_per_class < 1:
            raise ValueError("rows per class must be >= 1")
        if self.eval_rare_boost < 0:
            raise ValueError("eval_rare_boost must be >= 0")


def eval_cooccurrence(world: WorldSpec, rare_boost: float) -> np.ndarray:
    """Training co-occurrence with `rare_boost` extra mass moved to rare backgrounds.

    A boost of zero reproduces the training distribution exactly.
    """
    p = world.params
    if rare_boost > p.p_common:
        raise ValueError(f"rare boost {rare_boost} exceeds common mass {p.p_common}")
    if rare_boost == 0.0:
        return world.cooccurrence.copy()
    rows = np.zeros_like(world.cooccurrence)
    for c in range(p.n_classes):
        common = world.common_mask[c]
        train_row = world.cooccurrence[c]
        common_mass = p.p_common - rare_boost
        rare_mass = 1.0 - common_mass
        rows[c, common] = train_row[common] / train_row[common].sum() * common_mass
        rare = ~common
        if rare.any():
            train_rare = train_row[rare]
            weights = (
                train_rare / train_rare.sum()
                if train_rare.sum() > 0
                else np.full(rare.sum(), 1.0 / rare.sum())
            )
            rows[c, rare] = weights * rare_mass
        rows[c] /= rows[c].sum()
    return rows


def _row_rng(seed: int, split_code: int, class_index: int, ordinal: int, stream: int):
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), split_code, class_index, ordinal, stream])
    )


def sample_row_plan(
    world: WorldSpec, plan: SplitPlan, rng_seed: int
) -> tuple[list[RowPlan], list[RowPlan]]:
    """Draw (class, background) assignments for both splits, feature-free."""
    distributions = {
        TRAIN_SPLIT: world.cooccurrence,
        EVAL_SPLIT: eval_cooccurrence(world, plan.eval_rare_boost),
    }
    counts = {
        TRAIN_SPLIT: plan.train_rows_per_class,
        EVAL_SPLIT: plan.eval_rows_per_class,
    }
    out: dict[int, list[RowPlan]] = {TRAIN_SPLIT: [], EVAL_SPLIT: []}
    n_bg = world.params.n_backgrounds
    for split_code, tag in _SPLIT_TAGS.items():
        dist = distributions[split_code]
        for c in range(world.params.n_classes):
            for i in range(counts[split_code]):
                rng = _row_rng(rng_seed, split_code, c, i, _STREAM_BACKGROUND)
                b = int(rng.choice(n_bg, p=dist[c]))
                out[split_code].append(
                    RowPlan(f"{tag}:c{c:03d}:b{b:03d}:r{i:05d}", c, b, split_code, i)
                )
    return out[TRAIN_SPLIT], out[EVAL_SPLIT]


def realize_features(
    world: WorldSpec, rows: Sequence[RowPlan], noise_seed: int, source_tag: str
) -> FeatureSet:
    """Render a row plan to embeddings using this world's directions."""
    features = np.empty((len(rows), world.params.dim), dtype=np.float32)
    for j, row in enumerate(rows):
        rng = _row_rng(noise_seed, row.split_code, row.class_index, row.ordinal, _STREAM_NOISE)
        features[j] = world_image_embedding(world, row.class_index, row.background_index, rng)
    return FeatureSet(
        dim=world.params.dim,
        ids=[r.row_id for r in rows],
        labels=np.asarray([r.class_index for r in rows], dtype=np.int64),
        features=features,
        class_names=world.class_names,
        source_tag=source_tag,
    )


def sample_dataset(
    world: WorldSpec, plan: SplitPlan, rng_seed: int
) -> tuple[FeatureSet, FeatureSet]:
    """Biased training split plus rare-boosted evaluation pool."""
    train_rows, eval_rows = sample_row_plan(world, plan, rng_seed)
    train = realize_features(world, train_rows, rng_seed, "original_train")
    eval_pool = realize_features(world, eval_rows, rng_seed, "eval_pool")
    return train, eval_pool


_ID_PATTERN = re.compile(r"^(train|eval):c(\d+):b(\d+):r(\d+)$")


def ground_truth_from_id(row_id: str) -> tuple[int, int]:
    """(class, background) planted in a sampled row id. Scoring only."""
    m = _ID_PATTERN.match(row_id)
    if not m:
        raise ValueError(f"row id {row_id!r} carries no ground truth")
    return int(m.group(2)), int(m.group(3))


def bayes_accuracy(world: WorldSpec, pool: FeatureSet) -> float:
    """Accuracy of the likelihood-optimal classifier that knows the world.

    Brute force: every (class, background) hypothesis is scored by cosine
    against the row; the per-row noise is isotropic, so the hypothesis
    with the largest cosine is the maximum-likelihood one.
    """
    if len(pool) == 0:
        raise ValueError("empty pool")
    p = world.params
    hyp = np.empty((p.n_classes * p.n_backgrounds, p.dim))
    for c in range(p.n_classes):
        for b in range(p.n_backgrounds):
            hyp[c * p.n_backgrounds + b] = world_text_embedding(world, c, b)
    scores = pool.features.astype(np.float64) @ hyp.T
    best_class = scores.argmax(axis=1) // p.n_backgrounds
    return float(np.mean(best_class == pool.labels))


def _token_pattern(name: str) -> re.Pattern:
    return re.compile(rf"(?<![A-Za-z0-9]){re.escape(name)}(?![A-Za-z0-9])")


class BenchLanguageModel:
    """Answers the vocabulary query with the class's rare background names."""

    def __init__(self, world: WorldSpec):
        self.world = world
        self.identity = f"bench-lm:{world.fingerprint()}"

    def complete(self, prompt: str) -> str:
        matches = [
            c for c, name in enumerate(self.world.class_names)
            if _token_pattern(name).search(prompt)
        ]
        if len(matches) != 1:
            raise ClientError(f"prompt names {len(matches)} known classes: {prompt!r}")
        rare = self.world.rare_backgrounds(matches[0])
        return "\n".join(f"- {self.world.background_names[b]}" for b in rare)


class BenchTextEmbedder:
    """Embeds any text naming a known class and/or background."""

    def __init__(self, world: WorldSpec):
        self.world = world
        self.identity = f"bench-embedder:{world.fingerprint()}"

    def _find(self, names: list[str], text: str) -> list[int]:
        return [i for i, name in enumerate(names) if _token_pattern(name).search(text)]

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.world.params.dim))
        for i, text in enumerate(texts):
            classes = self._find(self.world.class_names, text)
            backgrounds = self._find(self.world.background_names, text)
            if len(classes) == 1 and len(backgrounds) <= 1:
                out[i] = world_text_embedding(
                    self.world, classes[0], backgrounds[0] if backgrounds else None
                )
            elif not classes and len(backgrounds) == 1:
                out[i] = self.world.bg_dirs[backgrounds[0]]
            else:
                raise EmbedderError(
                    f"text names {len(classes)} classes and {len(backgrounds)} "
                    f"backgrounds: {text!r}"
                )
        return out


class BenchGenerator:
    """Synthesizes image embeddings for generation requests.

    Background-free requests draw the background from the class's training
    co-occurrence row, mirroring what a generator knowing only the class
    name would produce. Sample j of a request is keyed by (request seed, j).
    """

    def __init__(self, world: WorldSpec):
        self.world = world
        self.identity = f"bench-gen:{world.fingerprint()}"

    def generate(self, request) -> np.ndarray:
        world = self.world
        if request.class_name not in world.class_names:
            raise ClientError(f"unknown class {request.class_name!r}")
        c = world.class_names.index(request.class_name)
        if request.background is not None:
            if request.background not in world.background_names:
                raise ClientError(f"unknown background {request.background!r}")
            b_fixed = world.background_names.index(request.background)
        out = np.empty((request.n_samples, world.params.dim))
        for j in range(request.n_samples):
            rng = np.random.default_rng(np.random.SeedSequence([int(request.rng_seed), j]))
            if request.background is None:
                b = int(rng.choice(world.params.n_backgrounds, p=world.cooccurrence[c]))
            else:
                b = b_fixed
            out[j] = world_image_embedding(world, c, b, rng)
        return out


def save_world(world: WorldSpec, directory: str | os.PathLike) -> Path:
    """world.json plus an FSET1 block holding the direction rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dirs_file = "directions.fset"
    meta = {
        "params": asdict(world.params),
        "class_names": world.class_names,
        "background_names": world.background_names,
        "cooccurrence": world.cooccurrence.tolist(),
        "common_mask": world.common_mask.astype(int).tolist(),
        "rng_seed": world.rng_seed,
        "directions_file": dirs_file,
    }
    (directory / "world.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8"
    )
    names = [f"class:{n}" for n in world.class_names] + [
        f"background:{n}" for n in world.background_names
    ]
    labels = [0] * len(world.class_names) + [1] * len(world.background_names)
    block = FeatureSet(
        dim=world.params.dim,
        ids=names,
        labels=np.asarray(labels, dtype=np.int64),
        features=np.vstack([world.class_dirs, world.bg_dirs]).astype(np.float32),
        class_names=["class_direction", "background_direction"],
        source_tag="world_directions",
    )
    write_feature_set(block, directory / dirs_file)
    return directory / "world.json"


def load_world(directory: str | os.PathLike) -> WorldSpec:
    directory = Path(directory)
    meta = json.loads((directory / "world.json").read_text(encoding="utf-8"))
    block = read_feature_set(directory / meta["directions_file"])
    dirs = block.features.astype(np.float64)
    n_classes = len(meta["class_names"])
    return WorldSpec(
        params=WorldParams(**meta["params"]),
        class_names=meta["class_names"],
        background_names=meta["background_names"],
        class_dirs=dirs[:n_classes],
        bg_dirs=dirs[n_classes:],
        cooccurrence=np.asarray(meta["cooccurrence"], dtype=np.float64),
        common_mask=np.asarray(meta["common_mask"], dtype=bool),
        rng_seed=meta["rng_seed"],
    )
