"""Debugging a family of models together instead of one at a time.

A category groups members that share a class vocabulary and an evaluation
pool id space (for example, several training runs of the same extractor).
Two strategies build one shared debug set for the whole category:

  type 1  pool every member's per-class background failure frequencies and
          sample k distinct backgrounds per class, proportional to the
          summed frequency;
  type 2  take the top-k backgrounds of a single reference member as-is.

Either way the shared set is generated once and attached to every member's
retraining run, so all members see identical debug rows. relative_accuracy
compares that against each member's own individual run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .linear_head import LinearHead

__all__ = [
    "CategoryMember",
    "ModelCategory",
    "NoFailuresError",
    "SharedDebugSpec",
    "pool_failures_type1",
    "collective_debug_type2",
    "relative_accuracy",
]


class NoFailuresError(ValueError):
    """Pooling was asked for but no member recorded any failure."""


@dataclass
class CategoryMember:
    """One model in a category.

    frequencies maps class index -> {background: failure count} as produced
    by background attribution on that member's seed failures. top_k holds
    the member's own selected backgrounds per class, needed when the member
    serves as a type-2 reference.
    """

    name: str
    frequencies: Mapping[int, Mapping[str, int]] = field(default_factory=dict)
    top_k: Mapping[int, Sequence[str]] | None = None
    head: LinearHead | None = None
    train_seed: int | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("member name must be non-empty")
        for class_index, counts in self.frequencies.items():
            for background, count in counts.items():
                if count < 0:
                    raise ValueError(
                        f"member {self.name!r}: negative frequency for "
                        f"class {class_index} background {background!r}"
                    )


@dataclass
class ModelCategory:
    name: str
    members: list[CategoryMember]

    def __post_init__(self):
        if not self.members:
            raise ValueError("category needs at least one member")
        names = [m.name for m in self.members]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate member names in category {self.name!r}")

    def member(self, name: str) -> CategoryMember:
        for member in self.members:
            if member.name == name:
                return member
        raise KeyError(f"category {self.name!r} has no member {name!r}")


def _pooled_frequencies(category: ModelCategory) -> dict[int, dict[str, int]]:
    totals: dict[int, dict[str, int]] = {}
    for member in category.members:
        for class_index, counts in member.frequencies.items():
            bucket = totals.setdefault(int(class_index), {})
            for background, count in counts.items():
                if count > 0:
                    bucket[background] = bucket.get(background, 0) + int(count)
    return {c: counts for c, counts in totals.items() if counts}


def _weighted_sample_without_replacement(
    backgrounds: Sequence[str], weights: np.ndarray, k: int, rng: np.random.Generator
) -> list[str]:
    # Exponent trick: key u**(1/w) ranks items so that the top draw lands on
    # item i with probability w_i / sum(w), and taking the k largest keys
    # samples without replacement.
    u = rng.random(len(backgrounds))
    keys = u ** (1.0 / weights)
    order = np.argsort(-keys, kind="stable")
    return [backgrounds[i] for i in order[: min(k, len(backgrounds))]]


def pool_failures_type1(
    category: ModelCategory, k: int, rng_seed: int
) -> dict[int, list[str]]:
    """Per class, sample up to k distinct backgrounds from the pooled counts.

    Selection probability is proportional to the frequency summed across
    members; zero-frequency backgrounds are never chosen. Each class draws
    from its own seeded stream, so adding or removing other classes leaves
    a class's selection unchanged.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    totals = _pooled_frequencies(category)
    if not totals:
        raise NoFailuresError(f"category {category.name!r} has no recorded failures")
    selected: dict[int, list[str]] = {}
    for class_index in sorted(totals):
        counts = totals[class_index]
        backgrounds = sorted(counts)
        weights = np.asarray([counts[b] for b in backgrounds], dtype=np.float64)
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, class_index]))
        selected[class_index] = _weighted_sample_without_replacement(
            backgrounds, weights, k, rng
        )
    return selected


@dataclass(frozen=True)
class SharedDebugSpec:
    """Backgrounds one shared debug set will cover, and where they came from."""

    category: str
    source: str
    per_class_backgrounds: Mapping[int, tuple[str, ...]]

    def __post_init__(self):
        for class_index, backgrounds in self.per_class_backgrounds.items():
            if len(set(backgrounds)) != len(backgrounds):
                raise ValueError(f"duplicate backgrounds for class {class_index}")


def collective_debug_type2(
    category: ModelCategory, reference_model_name: str
) -> SharedDebugSpec:
    """Build the shared spec from one reference member's own top-k."""
    reference = category.member(reference_model_name)
    if reference.top_k is None:
        raise ValueError(
            f"member {reference_model_name!r} has no selected backgrounds to share"
        )
    return SharedDebugSpec(
        category=category.name,
        source=f"type2:{reference_model_name}",
        per_class_backgrounds={
            int(c): tuple(backgrounds) for c, backgrounds in reference.top_k.items()
        },
    )


def shared_spec_type1(category: ModelCategory, k: int, rng_seed: int) -> SharedDebugSpec:
    """Wrap a type-1 pooling result in the same spec shape type 2 uses."""
    return SharedDebugSpec(
        category=category.name,
        source=f"type1:k={k}",
        per_class_backgrounds={
            c: tuple(backgrounds)
            for c, backgrounds in pool_failures_type1(category, k, rng_seed).items()
        },
    )


def relative_accuracy(collective_heldout_acc: float, individual_heldout_acc: float) -> float:
    """Ratio of collective over individual heldout accuracy; may exceed 1."""
    for label, value in (
        ("collective", collective_heldout_acc),
        ("individual", individual_heldout_acc),
    ):
        if not np.isfinite(value) or value < 0:
            raise ValueError(f"{label} accuracy must be finite and >= 0, got {value}")
    if individual_heldout_acc == 0:
        raise ZeroDivisionError(
            "individual heldout accuracy is zero; relative accuracy is undefined"
        )
    return float(collective_heldout_acc) / float(individual_heldout_acc)
