"""Mining misclassified rows and comparing failure sets across models."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .interchange import FeatureSet
from .linear_head import LinearHead, evaluate


class Failure(NamedTuple):
    row_id: str
    true_label: int
    predicted_label: int


@dataclass
class DebugPartition:
    """Seeded class-stratified halving of a failure list.

    seed_ids and heldout_ids are disjoint and together cover failures;
    odd per-class counts send the extra row to the seed half.
    """

    failures: list[str]
    seed_ids: list[str]
    heldout_ids: list[str]
    rng_seed: int

    def __post_init__(self):
        seed, heldout, everything = set(self.seed_ids), set(self.heldout_ids), set(self.failures)
        if seed & heldout:
            raise ValueError("seed and heldout halves overlap")
        if seed | heldout != everything or len(self.seed_ids) + len(self.heldout_ids) != len(
            self.failures
        ):
            raise ValueError("partition halves do not cover the failure list exactly")


def mine_failures(head: LinearHead, pool: FeatureSet) -> list[Failure]:
    """Rows of pool the head misclassifies, in pool order."""
    result = evaluate(head, pool)
    wrong = np.flatnonzero(result.predicted_labels != pool.labels)
    return [
        Failure(pool.ids[i], int(pool.labels[i]), int(result.predicted_labels[i]))
        for i in wrong
    ]


def split_seed_heldout(failures: Iterable[Failure], rng_seed: int) -> DebugPartition:
    """Randomly halve failures per class; extra rows land in the seed half."""
    failures = list(failures)
    by_class: dict[int, list[str]] = {}
    for f in failures:
        by_class.setdefault(f.true_label, []).append(f.row_id)
    rng = np.random.default_rng(rng_seed)
    seed_ids: list[str] = []
    heldout_ids: list[str] = []
    for label in sorted(by_class):
        rows = by_class[label]
        order = rng.permutation(len(rows))
        cut = (len(rows) + 1) // 2
        seed_ids.extend(rows[i] for i in order[:cut])
        heldout_ids.extend(rows[i] for i in order[cut:])
    return DebugPartition(
        failures=[f.row_id for f in failures],
        seed_ids=seed_ids,
        heldout_ids=heldout_ids,
        rng_seed=rng_seed,
    )


def failure_iou(a: Iterable[str], b: Iterable[str]) -> float:
    """Intersection over union of two failure id sets; both empty -> 1.0."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class SimilarityMatrix:
    model_names: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        m = len(self.model_names)
        if self.values.shape != (m, m):
            raise ValueError(f"values shape {self.values.shape} does not match {m} models")
        if not np.allclose(self.values, self.values.T):
            raise ValueError("similarity matrix must be symmetric")

    def to_json(self) -> str:
        return json.dumps(
            {"model_names": self.model_names, "iou": self.values.tolist()},
            sort_keys=True,
            indent=2,
        )

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["model"] + self.model_names)
        for name, row in zip(self.model_names, self.values):
            writer.writerow([name] + [f"{v:.6f}" for v in row])
        return out.getvalue()


def similarity_matrix(failure_sets: Mapping[str, Iterable[str]]) -> SimilarityMatrix:
    """Pairwise failure IoU over named models (insertion order kept)."""
    names = list(failure_sets)
    if len(names) < 2:
        raise ValueError(f"need at least two models, got {len(names)}")
    sets = [set(failure_sets[n]) for n in names]
    m = len(names)
    values = np.ones((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            values[i, j] = values[j, i] = failure_iou(sets[i], sets[j])
    return SimilarityMatrix(model_names=names, values=values)
