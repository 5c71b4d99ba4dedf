"""Orchestrates full debugging runs and writes their reports.

A run directory is self-describing: run_manifest.json holds the resolved
config, every derived seed, and a sha256 per artifact, so a run can be
re-executed bit-identically. Reports (report.json + report.csv) contain no
timestamps and no absolute paths; rerunning with the same config and seeds
reproduces them byte for byte. Accuracy cells that cannot be computed are
explicit nulls with a reason code under "nulls", never NaN.

Seed derivation from the config's rng_seed (the root):

    world g      derive_seed(root, "world", g)
    data         derive_seed(root, "data")          shared across geometries
    train        derive_seed(root, "train")         single-model runs
    member m     derive_seed(root, "member", g, t)  bench category members
    split        derive_seed(root, "split"[, member])
    pooling      derive_seed(root, "pool")          collective type 1
    generation   root itself; per-request seeds are derived inside
                 build_requests from (root, "gen", class, background), so
                 any run that asks for the same mode gets the same rows.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .benchworld import (
    BenchGenerator,
    BenchLanguageModel,
    BenchTextEmbedder,
    SplitPlan,
    WorldParams,
    WorldSpec,
    bayes_accuracy,
    load_world,
    sample_dataset,
    sample_world,
    save_world,
)
from .collective import (
    CategoryMember,
    ModelCategory,
    SharedDebugSpec,
    collective_debug_type2,
    relative_accuracy,
    shared_spec_type1,
)
from .failure_mining import (
    DebugPartition,
    mine_failures,
    similarity_matrix,
    split_seed_heldout,
)
from .interchange import FeatureSet, read_feature_set, write_feature_set
from .linear_head import TrainConfig, WeightedSets, evaluate, train_head, write_head
from .seeds import derive_seed
from .synthesis import (
    HttpGenerator,
    JournalingGenerator,
    ReplayGenerator,
    build_requests,
    generate_debug_train,
    random_debug_train,
)
from .textualizer import (
    PAIR_TEMPLATES,
    BackgroundCatalog,
    FixtureLanguageModel,
    FsetLookupEmbedder,
    HttpLanguageModel,
    ResponseCache,
    build_attribution_report,
    build_catalog,
    top_k_backgrounds,
)

API_KEY_ENV = "DESPUR_API_KEY"


class ConfigError(ValueError):
    """The config or manifest cannot drive a run."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and artifact path."""

    def __init__(self, stage: str, artifact: str | os.PathLike, cause: BaseException):
        super().__init__(f"stage {stage!r} failed at {artifact}: {cause}")
        self.stage = stage
        self.artifact = str(artifact)


@contextmanager
def _guard(stage: str, artifact: str | os.PathLike):
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(stage, artifact, exc) from exc


# ---------------------------------------------------------------- config

DEFAULT_CONFIG: dict[str, Any] = {
    "out_dir": "despur_run",
    "rng_seed": 0,
    "samples_per_mode": 5,
    "data": {
        "mode": "bench",
        "world": {},
        "split": {},
        "train_path": None,
        "eval_path": None,
    },
    "train": {
        "learning_rate": 0.2,
        "epochs": 1000,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "debug_weight": 0.5,
        "batch_size": 256,
    },
    "textualize": {
        "template": "default",
        "top_k": 5,
        "dedup_threshold": 0.9,
        "cache_dir": None,
    },
    "clients": {
        "language_model": {"backend": "bench"},
        "embedder": {"backend": "bench"},
        "generator": {"backend": "bench"},
    },
    "sweep": {
        "debug_weight_grid": [0.0, 0.25, 0.5, 1.0],
        "top_k_grid": [1, 3, 5],
    },
    "bench": {"geometries": 2, "members_per_geometry": 3},
}


def default_config() -> dict[str, Any]:
    return copy.deepcopy(DEFAULT_CONFIG)


# Subtrees whose keys are validated by their consumers (world and split
# params by their constructors, client configs per backend), not by the
# merge. Everything else rejects keys the defaults do not name.
FREE_FORM_SUBTREES = (
    ("data", "world"),
    ("data", "split"),
    ("clients", "language_model"),
    ("clients", "embedder"),
    ("clients", "generator"),
)


def _under_free_form(where: tuple[str, ...]) -> bool:
    return any(where[: len(root)] == root for root in FREE_FORM_SUBTREES)


def _deep_merge(base: dict, override: Mapping, path: tuple[str, ...] = ()) -> dict:
    merged = dict(base)
    for key, value in override.items():
        where = path + (str(key),)
        if key not in base:
            if not _under_free_form(where):
                raise ConfigError(f"unknown config key {'.'.join(where)!r}")
            merged[key] = copy.deepcopy(value)
            continue
        if isinstance(base[key], dict) and isinstance(value, Mapping):
            merged[key] = _deep_merge(base[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(text: str) -> tuple[list[str], Any]:
    """--set key.path=value; the value is JSON, falling back to a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(
    path: str | os.PathLike | None = None, overrides: Sequence[str] = ()
) -> dict[str, Any]:
    """Defaults, then the JSON file, then --set overrides; validated."""
    config = default_config()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        config = _deep_merge(config, loaded)
    for text in overrides:
        keys, value = parse_override(text)
        cursor: Any = config
        for i, key in enumerate(keys[:-1]):
            if not isinstance(cursor, dict):
                raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
            if key not in cursor:
                if not _under_free_form(tuple(keys[: i + 1])):
                    raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
                cursor[key] = {}
            cursor = cursor[key]
        if not isinstance(cursor, dict):
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        if keys[-1] not in cursor and not _under_free_form(tuple(keys)):
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        cursor[keys[-1]] = value
    validate_config(config)
    return config


def validate_config(config: Mapping[str, Any]):
    data = config["data"]
    mode = data.get("mode")
    if mode not in ("bench", "files"):
        raise ConfigError(f"data.mode must be 'bench' or 'files', got {mode!r}")
    if mode == "files":
        if not data.get("train_path") or not data.get("eval_path"):
            raise ConfigError("data.mode 'files' requires train_path and eval_path")
        for role, cfg in config["clients"].items():
            if cfg.get("backend") == "bench":
                raise ConfigError(
                    f"clients.{role} backend 'bench' requires data.mode 'bench'"
                )
    for role in ("language_model", "embedder", "generator"):
        if role not in config["clients"]:
            raise ConfigError(f"clients.{role} missing")
    grids = config["sweep"]
    for name in ("debug_weight_grid", "top_k_grid"):
        grid = grids.get(name)
        if not isinstance(grid, (list, tuple)) or not grid:
            raise ConfigError(f"sweep.{name} must be a non-empty list")
    for weight in grids["debug_weight_grid"]:
        if not isinstance(weight, (int, float)) or weight < 0:
            raise ConfigError(f"sweep.debug_weight_grid entry {weight!r} must be >= 0")
    for k in grids["top_k_grid"]:
        if not isinstance(k, int) or k < 1:
            raise ConfigError(f"sweep.top_k_grid entry {k!r} must be an integer >= 1")
    tex = config["textualize"]
    if not isinstance(tex.get("top_k"), int) or tex["top_k"] < 1:
        raise ConfigError(f"textualize.top_k must be an integer >= 1, got {tex.get('top_k')!r}")
    if config.get("samples_per_mode", 1) < 1:
        raise ConfigError("samples_per_mode must be >= 1")
    bench = config["bench"]
    if bench.get("geometries", 1) < 1 or bench.get("members_per_geometry", 1) < 1:
        raise ConfigError("bench.geometries and bench.members_per_geometry must be >= 1")
    _pair_template(config)


def _pair_template(config: Mapping[str, Any]) -> str:
    """A named template or a literal one containing both placeholders."""
    choice = config["textualize"]["template"]
    if choice in PAIR_TEMPLATES:
        return PAIR_TEMPLATES[choice]
    if isinstance(choice, str) and "{class_name}" in choice and "{background}" in choice:
        return choice
    raise ConfigError(
        f"textualize.template {choice!r} is neither a known name "
        f"({', '.join(sorted(PAIR_TEMPLATES))}) nor a template with "
        "{class_name} and {background} placeholders"
    )


def config_digest(config: Mapping[str, Any]) -> str:
    """Digest of the config with out_dir removed, for report identity."""
    trimmed = copy.deepcopy(dict(config))
    trimmed.pop("out_dir", None)
    canon = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------- clients

def build_language_model(config: Mapping[str, Any], world: WorldSpec | None):
    cfg = config["clients"]["language_model"]
    backend = cfg.get("backend")
    if backend == "bench":
        if world is None:
            raise ConfigError("language_model backend 'bench' needs a benchworld")
        return BenchLanguageModel(world)
    if backend == "fixture":
        if not cfg.get("path"):
            raise ConfigError("language_model backend 'fixture' needs a path")
        return FixtureLanguageModel(cfg["path"])
    if backend == "http":
        if not cfg.get("url"):
            raise ConfigError("language_model backend 'http' needs a url")
        return HttpLanguageModel(cfg["url"], api_key_env=cfg.get("api_key_env", API_KEY_ENV))
    raise ConfigError(f"unknown language_model backend {backend!r}")


def build_embedder(config: Mapping[str, Any], world: WorldSpec | None):
    cfg = config["clients"]["embedder"]
    backend = cfg.get("backend")
    if backend == "bench":
        if world is None:
            raise ConfigError("embedder backend 'bench' needs a benchworld")
        return BenchTextEmbedder(world)
    if backend == "fset":
        if not cfg.get("path"):
            raise ConfigError("embedder backend 'fset' needs a path")
        return FsetLookupEmbedder(cfg["path"])
    raise ConfigError(f"unknown embedder backend {backend!r}")


def build_generator(config: Mapping[str, Any], world: WorldSpec | None):
    cfg = config["clients"]["generator"]
    backend = cfg.get("backend")
    if backend == "bench":
        if world is None:
            raise ConfigError("generator backend 'bench' needs a benchworld")
        return BenchGenerator(world)
    if backend == "http":
        if not cfg.get("url"):
            raise ConfigError("generator backend 'http' needs a url")
        return HttpGenerator(cfg["url"], api_key_env=cfg.get("api_key_env", API_KEY_ENV))
    if backend == "replay":
        if not cfg.get("directory"):
            raise ConfigError("generator backend 'replay' needs a directory")
        return ReplayGenerator(cfg["directory"])
    raise ConfigError(f"unknown generator backend {backend!r}")


def _response_cache(config: Mapping[str, Any]) -> ResponseCache | None:
    cache_dir = config["textualize"].get("cache_dir")
    return ResponseCache(cache_dir) if cache_dir else None


# ---------------------------------------------------------------- data

@dataclass
class DataBundle:
    train: FeatureSet
    eval_pool: FeatureSet
    world: WorldSpec | None
    provenance: dict[str, Any]


def _world_params(config: Mapping[str, Any]) -> WorldParams:
    try:
        return WorldParams(**config["data"]["world"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad data.world: {exc}") from exc


def _split_plan(config: Mapping[str, Any]) -> SplitPlan:
    try:
        return SplitPlan(**config["data"]["split"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad data.split: {exc}") from exc


def _train_config(
    config: Mapping[str, Any], rng_seed: int, debug_weight: float | None = None
) -> TrainConfig:
    section = dict(config["train"])
    if debug_weight is not None:
        section["debug_weight"] = float(debug_weight)
    try:
        return TrainConfig(rng_seed=rng_seed, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _file_digest(path: str | os.PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as stream:
        for chunk in iter(lambda: stream.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_run_data(config: Mapping[str, Any], out: Path) -> DataBundle:
    """Materialize (bench) or read (files) the train and eval pools."""
    root = int(config["rng_seed"])
    data = config["data"]
    if data["mode"] == "bench":
        with _guard("data", out / "data"):
            world = sample_world(_world_params(config), derive_seed(root, "world", 0))
            train, eval_pool = sample_dataset(
                world, _split_plan(config), derive_seed(root, "data")
            )
            data_dir = out / "data"
            save_world(world, data_dir / "world")
            write_feature_set(train, data_dir / "original_train.fset")
            write_feature_set(eval_pool, data_dir / "eval_pool.fset")
            provenance = {
                "mode": "bench",
                "world_fingerprint": world.fingerprint(),
                "bayes_accuracy": bayes_accuracy(world, eval_pool),
            }
        return DataBundle(train, eval_pool, world, provenance)
    with _guard("data", data["train_path"]):
        train = read_feature_set(data["train_path"])
        eval_pool = read_feature_set(data["eval_path"])
        provenance = {
            "mode": "files",
            "train_file": Path(data["train_path"]).name,
            "eval_file": Path(data["eval_path"]).name,
            "train_file_sha256": _file_digest(data["train_path"]),
            "eval_file_sha256": _file_digest(data["eval_path"]),
        }
    if train.class_names != eval_pool.class_names:
        raise ConfigError("train and eval pools disagree on class vocabulary")
    if train.dim != eval_pool.dim:
        raise ConfigError(f"train dim {train.dim} != eval dim {eval_pool.dim}")
    return DataBundle(train, eval_pool, None, provenance)


# ---------------------------------------------------------------- report plumbing

def _write_json(path: Path, payload: Any):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _arm_cells(head, pool: FeatureSet, partition: DebugPartition | None) -> dict:
    """test/seed/heldout accuracies; empty halves yield None cells."""
    cells: dict[str, float | None] = {
        "test_accuracy": evaluate(head, pool).accuracy,
        "seed_accuracy": None,
        "heldout_accuracy": None,
    }
    if partition is not None:
        if partition.seed_ids:
            cells["seed_accuracy"] = evaluate(head, pool.select_ids(partition.seed_ids)).accuracy
        if partition.heldout_ids:
            cells["heldout_accuracy"] = evaluate(
                head, pool.select_ids(partition.heldout_ids)
            ).accuracy
    return cells


def _collect_nulls(prefix: str, cells: Mapping[str, Any], reason: str, nulls: dict):
    for field, value in cells.items():
        if value is None:
            nulls[f"{prefix}.{field}"] = reason


def write_run_manifest(out: Path, config: Mapping[str, Any], seeds: Mapping[str, int]):
    artifacts = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "run_manifest.json":
            artifacts[path.relative_to(out).as_posix()] = _file_digest(path)
    _write_json(
        out / "run_manifest.json",
        {
            "config": config,
            "config_digest": config_digest(config),
            "seeds": dict(seeds),
            "artifacts": artifacts,
        },
    )


# ---------------------------------------------------------------- shared stages

@dataclass
class BaselineStages:
    """Everything up to and including attribution, shared by run kinds."""

    data: DataBundle
    baseline_head: Any
    partition: DebugPartition
    catalog: BackgroundCatalog | None
    attribution: Any  # AttributionReport | None
    clients: dict[str, str]


def _run_baseline_stages(
    config: Mapping[str, Any], out: Path, train_seed: int, split_seed: int
) -> BaselineStages:
    data = load_run_data(config, out)
    world = data.world
    class_names = data.train.class_names

    with _guard("baseline_train", out / "baseline" / "head.head"):
        head = train_head(WeightedSets(data.train), _train_config(config, train_seed))
        (out / "baseline").mkdir(parents=True, exist_ok=True)
        write_head(head, out / "baseline" / "head.head", _train_config(config, train_seed))

    with _guard("mine", out / "mining" / "failures.json"):
        failures = mine_failures(head, data.eval_pool)
        _write_json(
            out / "mining" / "failures.json",
            {
                "failures": [
                    {"row_id": f.row_id, "true_label": f.true_label,
                     "predicted_label": f.predicted_label}
                    for f in failures
                ]
            },
        )
        partition = split_seed_heldout(failures, split_seed)
        _write_json(
            out / "mining" / "split.json",
            {
                "rng_seed": split_seed,
                "seed_ids": partition.seed_ids,
                "heldout_ids": partition.heldout_ids,
            },
        )

    clients: dict[str, str] = {}
    catalog = None
    attribution = None
    if failures:
        with _guard("textualize", out / "textualize" / "catalog.json"):
            lm = build_language_model(config, world)
            embedder = build_embedder(config, world)
            clients["language_model"] = lm.identity
            clients["embedder"] = embedder.identity
            catalog = build_catalog(
                class_names,
                lm,
                embedder,
                prompt_template=_pair_template(config),
                dedup_threshold=config["textualize"]["dedup_threshold"],
                cache=_response_cache(config),
            )
            tex_dir = out / "textualize"
            tex_dir.mkdir(parents=True, exist_ok=True)
            catalog.save(tex_dir / "catalog.json", tex_dir / "catalog.fset")
        with _guard("attribute", out / "textualize" / "attribution.json"):
            attribution = build_attribution_report(
                data.eval_pool, partition.seed_ids, catalog,
                k=config["textualize"]["top_k"],
            )
            (out / "textualize" / "attribution.json").write_text(
                attribution.to_json() + "\n", encoding="utf-8"
            )
            _write_json(
                out / "textualize" / "top_k.json",
                {
                    "k": attribution.k,
                    "per_class": {str(c): b for c, b in sorted(attribution.top_k.items())},
                },
            )
    return BaselineStages(data, head, partition, catalog, attribution, clients)


def _generate_arm(
    config: Mapping[str, Any],
    out_arm: Path,
    modes: Mapping[int, Sequence[str]],
    base_generator,
    class_names: Sequence[str],
    expected_dim: int,
) -> FeatureSet:
    """Targeted generation into an arm directory with its own journal."""
    requests = build_requests(
        class_names,
        modes,
        rng_seed=int(config["rng_seed"]),
        n_samples=int(config["samples_per_mode"]),
        template=_pair_template(config),
    )
    journaled = JournalingGenerator(base_generator, out_arm / "journal", class_names)
    debug = generate_debug_train(requests, journaled, class_names, expected_dim=expected_dim)
    write_feature_set(debug, out_arm / "debug_train.fset")
    return debug


def _retrain(
    config: Mapping[str, Any],
    out_arm: Path,
    train: FeatureSet,
    debug: FeatureSet,
    train_seed: int,
    debug_weight: float | None = None,
):
    cfg = _train_config(config, train_seed, debug_weight)
    head = train_head(WeightedSets(train, debug), cfg)
    out_arm.mkdir(parents=True, exist_ok=True)
    write_head(head, out_arm / "head.head", cfg)
    return head


# ---------------------------------------------------------------- individual

def run_individual_debug(config: Mapping[str, Any]) -> dict:
    """Full train -> mine -> textualize -> synthesize -> retrain comparison.

    Arms: baseline (no debug data), targeted (top-k attributed modes),
    random (class-only generation, volume-matched to top_k x samples).
    """
    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    root = int(config["rng_seed"])
    seeds = {
        "root": root,
        "world": derive_seed(root, "world", 0),
        "data": derive_seed(root, "data"),
        "train": derive_seed(root, "train"),
        "split": derive_seed(root, "split"),
    }
    stages = _run_baseline_stages(config, out, seeds["train"], seeds["split"])
    data, partition = stages.data, stages.partition
    class_names = data.train.class_names
    nulls: dict[str, str] = {}

    arms: dict[str, dict] = {}
    arms["baseline"] = _arm_cells(stages.baseline_head, data.eval_pool, partition)
    no_failures = not partition.failures
    if no_failures:
        _collect_nulls("baseline", arms["baseline"], "no_failures", nulls)

    if no_failures:
        for arm in ("targeted", "random"):
            arms[arm] = {
                "test_accuracy": None, "seed_accuracy": None, "heldout_accuracy": None,
            }
            _collect_nulls(arm, arms[arm], "no_failures", nulls)
    else:
        world = data.world
        generator = build_generator(config, world)
        stages.clients["generator"] = generator.identity
        k = int(config["textualize"]["top_k"])
        n = int(config["samples_per_mode"])

        with _guard("synthesize", out / "targeted" / "debug_train.fset"):
            targeted_debug = _generate_arm(
                config, out / "targeted", stages.attribution.top_k,
                generator, class_names, data.train.dim,
            )
        with _guard("retrain", out / "targeted" / "head.head"):
            targeted_head = _retrain(
                config, out / "targeted", data.train, targeted_debug, seeds["train"]
            )
        arms["targeted"] = _arm_cells(targeted_head, data.eval_pool, partition)

        with _guard("synthesize_random", out / "random" / "debug_train.fset"):
            random_journal = JournalingGenerator(
                generator, out / "random" / "journal", class_names
            )
            random_debug = random_debug_train(
                class_names, k * n, random_journal,
                rng_seed=root, expected_dim=data.train.dim,
            )
            write_feature_set(random_debug, out / "random" / "debug_train.fset")
        with _guard("retrain_random", out / "random" / "head.head"):
            random_head = _retrain(
                config, out / "random", data.train, random_debug, seeds["train"]
            )
        arms["random"] = _arm_cells(random_head, data.eval_pool, partition)
        for arm in ("targeted", "random"):
            _collect_nulls(arm, arms[arm], "empty_split_half", nulls)

    provenance = dict(data.provenance)
    provenance.update(
        {
            "n_failures": len(partition.failures),
            "n_seed": len(partition.seed_ids),
            "n_heldout": len(partition.heldout_ids),
            "clients": stages.clients,
        }
    )
    if stages.attribution is not None:
        provenance["top_k"] = {
            str(c): b for c, b in sorted(stages.attribution.top_k.items())
        }
    report = {
        "kind": "individual_debug",
        "config": _report_config(config),
        "config_digest": config_digest(config),
        "seeds": seeds,
        "provenance": provenance,
        "arms": arms,
        "nulls": nulls,
    }
    _write_json(out / "report.json", report)
    _write_csv(
        out / "report.csv",
        ["arm", "test_accuracy", "seed_accuracy", "heldout_accuracy"],
        [
            [arm, _fmt(c["test_accuracy"]), _fmt(c["seed_accuracy"]), _fmt(c["heldout_accuracy"])]
            for arm, c in arms.items()
        ],
    )
    write_run_manifest(out, config, seeds)
    return report


def _report_config(config: Mapping[str, Any]) -> dict:
    trimmed = copy.deepcopy(dict(config))
    trimmed.pop("out_dir", None)
    return trimmed


# ---------------------------------------------------------------- sweep

SWEEP_AXES = ("debug_weight", "top_k")


def run_sweep(config: Mapping[str, Any], axis: str) -> dict:
    """One retrain per grid point, sharing every stage the axis permits.

    The debug_weight axis reuses one generated debug set; the top_k axis
    regenerates per point (the mode list changes) but shares mining,
    catalog, and attribution.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    root = int(config["rng_seed"])
    seeds = {
        "root": root,
        "world": derive_seed(root, "world", 0),
        "data": derive_seed(root, "data"),
        "train": derive_seed(root, "train"),
        "split": derive_seed(root, "split"),
    }
    grid = list(config["sweep"][f"{axis}_grid"])
    stages = _run_baseline_stages(config, out, seeds["train"], seeds["split"])
    data, partition = stages.data, stages.partition
    class_names = data.train.class_names
    nulls: dict[str, str] = {}
    baseline_cells = _arm_cells(stages.baseline_head, data.eval_pool, partition)

    points: list[dict] = []
    if not partition.failures:
        for value in grid:
            cells = {"test_accuracy": None, "seed_accuracy": None, "heldout_accuracy": None}
            _collect_nulls(f"{axis}={value}", cells, "no_failures", nulls)
            points.append({"value": value, **cells})
    else:
        world = data.world
        generator = build_generator(config, world)
        stages.clients["generator"] = generator.identity
        shared_debug = None
        if axis == "debug_weight":
            with _guard("synthesize", out / "shared" / "debug_train.fset"):
                shared_debug = _generate_arm(
                    config, out / "shared", stages.attribution.top_k,
                    generator, class_names, data.train.dim,
                )
        for value in grid:
            point_dir = out / "points" / f"{axis}-{value:g}"
            if axis == "debug_weight":
                debug = shared_debug
                weight = float(value)
            else:
                with _guard("synthesize", point_dir / "debug_train.fset"):
                    modes = top_k_backgrounds(
                        stages.attribution.rows, stages.catalog, int(value)
                    )
                    debug = _generate_arm(
                        config, point_dir, modes, generator, class_names, data.train.dim
                    )
                weight = None
            with _guard("retrain", point_dir / "head.head"):
                head = _retrain(
                    config, point_dir, data.train, debug, seeds["train"], weight
                )
            cells = _arm_cells(head, data.eval_pool, partition)
            _collect_nulls(f"{axis}={value}", cells, "empty_split_half", nulls)
            points.append({"value": value, **cells})

    provenance = dict(data.provenance)
    provenance.update(
        {
            "axis": axis,
            "grid": grid,
            "n_failures": len(partition.failures),
            "n_seed": len(partition.seed_ids),
            "n_heldout": len(partition.heldout_ids),
            "clients": stages.clients,
        }
    )
    report = {
        "kind": "sweep",
        "config": _report_config(config),
        "config_digest": config_digest(config),
        "seeds": seeds,
        "provenance": provenance,
        "baseline": baseline_cells,
        "points": points,
        "nulls": nulls,
    }
    _write_json(out / "report.json", report)
    _write_csv(
        out / "report.csv",
        [axis, "test_accuracy", "seed_accuracy", "heldout_accuracy"],
        [
            [f"{p['value']:g}", _fmt(p["test_accuracy"]), _fmt(p["seed_accuracy"]),
             _fmt(p["heldout_accuracy"])]
            for p in points
        ],
    )
    write_run_manifest(out, config, seeds)
    return report


# ---------------------------------------------------------------- manifests

def load_category_manifest(
    path: str | os.PathLike, category: str | None = None
) -> tuple[dict, Path]:
    """One category block from a manifest file; paths resolve later."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    if "categories" in manifest:
        blocks = manifest["categories"]
        if not blocks:
            raise ConfigError(f"manifest {path} lists no categories")
        if category is None:
            block = blocks[0]
        else:
            matches = [b for b in blocks if b.get("category") == category]
            if not matches:
                raise ConfigError(f"manifest {path} has no category {category!r}")
            block = matches[0]
    else:
        block = manifest
    if not block.get("members"):
        raise ConfigError(f"manifest {path} category lists no members")
    return block, path.parent


def _load_all_manifest_members(path: str | os.PathLike) -> tuple[list[dict], Path]:
    """Every member across categories, each annotated with its category."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    blocks = manifest["categories"] if "categories" in manifest else [manifest]
    members = []
    for block in blocks:
        category = block.get("category", "default")
        for member in block.get("members", []):
            entry = dict(member)
            entry["category"] = category
            entry["world_dir"] = block.get("world_dir")
            members.append(entry)
    if not members:
        raise ConfigError(f"manifest {path} lists no members")
    names = [m.get("name") for m in members]
    if len(set(names)) != len(names) or not all(names):
        raise ConfigError(f"manifest {path} member names must be unique and non-empty")
    return members, path.parent


class _PoolCache:
    """Reads each feature file once even when members share pools."""

    def __init__(self, base: Path):
        self.base = base
        self._cache: dict[str, FeatureSet] = {}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base / p

    def load(self, rel: str) -> FeatureSet:
        key = str(self.resolve(rel))
        if key not in self._cache:
            with _guard("load_pool", key):
                self._cache[key] = read_feature_set(key)
        return self._cache[key]


def _member_seed(root: int, member: Mapping[str, Any]) -> int:
    if member.get("train_seed") is not None:
        return int(member["train_seed"])
    return derive_seed(root, "train", member["name"])


# ---------------------------------------------------------------- collective

def run_collective(
    config: Mapping[str, Any],
    manifest_path: str | os.PathLike,
    collective_type: int,
    category: str | None = None,
) -> dict:
    """Individual vs shared debugging for every member of one category."""
    if collective_type not in (1, 2):
        raise ConfigError(f"collective type must be 1 or 2, got {collective_type!r}")
    block, base = load_category_manifest(manifest_path, category)
    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    root = int(config["rng_seed"])
    pools = _PoolCache(base)

    world = None
    if block.get("world_dir"):
        with _guard("load_world", pools.resolve(block["world_dir"])):
            world = load_world(pools.resolve(block["world_dir"]))

    members_cfg = block["members"]
    first_train = pools.load(members_cfg[0]["original_train"])
    class_names = first_train.class_names
    k = int(config["textualize"]["top_k"])
    n = int(config["samples_per_mode"])

    lm = build_language_model(config, world)
    embedder = build_embedder(config, world)
    generator = build_generator(config, world)
    with _guard("textualize", out / "shared" / "catalog.json"):
        catalog = build_catalog(
            class_names, lm, embedder,
            prompt_template=_pair_template(config),
            dedup_threshold=config["textualize"]["dedup_threshold"],
            cache=_response_cache(config),
        )
        (out / "shared").mkdir(parents=True, exist_ok=True)
        catalog.save(out / "shared" / "catalog.json", out / "shared" / "catalog.fset")

    # Per-member baseline, mining, attribution, and the individual arm.
    nulls: dict[str, str] = {}
    member_rows: dict[str, dict] = {}
    category_members: list[CategoryMember] = []
    eval_id_space: set[str] | None = None
    for mc in members_cfg:
        name = mc["name"]
        mdir = out / "members" / name
        train = pools.load(mc["original_train"])
        eval_pool = pools.load(mc["eval_pool"])
        if train.class_names != class_names or eval_pool.class_names != class_names:
            raise ConfigError(f"member {name!r} does not share the class vocabulary")
        ids = set(eval_pool.ids)
        if eval_id_space is None:
            eval_id_space = ids
        elif ids != eval_id_space:
            raise ConfigError(f"member {name!r} does not share the eval pool id space")
        train_seed = _member_seed(root, mc)
        split_seed = derive_seed(root, "split", name)

        with _guard("baseline_train", mdir / "baseline_head.head"):
            baseline = train_head(
                WeightedSets(train), _train_config(config, train_seed)
            )
            mdir.mkdir(parents=True, exist_ok=True)
            write_head(baseline, mdir / "baseline_head.head")
        with _guard("mine", mdir / "failures.json"):
            failures = mine_failures(baseline, eval_pool)
            partition = split_seed_heldout(failures, split_seed)
            _write_json(
                mdir / "failures.json",
                {
                    "failures": [
                        {"row_id": f.row_id, "true_label": f.true_label,
                         "predicted_label": f.predicted_label}
                        for f in failures
                    ],
                    "seed_ids": partition.seed_ids,
                    "heldout_ids": partition.heldout_ids,
                    "split_seed": split_seed,
                },
            )
        if not failures:
            raise StageError(
                "mine", mdir / "failures.json",
                RuntimeError(f"member {name!r} has no failures to debug"),
            )
        with _guard("attribute", mdir / "attribution.json"):
            attribution = build_attribution_report(
                eval_pool, partition.seed_ids, catalog, k=k
            )
            (mdir / "attribution.json").write_text(
                attribution.to_json() + "\n", encoding="utf-8"
            )
        with _guard("synthesize", mdir / "individual" / "debug_train.fset"):
            individual_debug = _generate_arm(
                config, mdir / "individual", attribution.top_k,
                generator, class_names, train.dim,
            )
        with _guard("retrain", mdir / "individual" / "head.head"):
            individual_head = _retrain(
                config, mdir / "individual", train, individual_debug, train_seed
            )
        member_rows[name] = {
            "train_seed": train_seed,
            "train": train,
            "eval_pool": eval_pool,
            "partition": partition,
            "baseline_cells": _arm_cells(baseline, eval_pool, partition),
            "individual_cells": _arm_cells(individual_head, eval_pool, partition),
        }
        category_members.append(
            CategoryMember(
                name=name,
                frequencies=attribution.frequencies,
                top_k=attribution.top_k,
                train_seed=train_seed,
            )
        )

    category_obj = ModelCategory(
        name=block.get("category", "default"), members=category_members
    )
    if collective_type == 1:
        pool_seed = derive_seed(root, "pool")
        shared_spec = shared_spec_type1(category_obj, k=k, rng_seed=pool_seed)
        provenance_block = {
            "selection": "pooled",
            "pool_seed": pool_seed,
            "k": k,
            "pooled_frequencies": {
                str(c): dict(sorted(counts.items()))
                for c, counts in sorted(_pooled_for_report(category_members).items())
            },
        }
    else:
        reference = block.get("reference") or members_cfg[0]["name"]
        shared_spec = collective_debug_type2(category_obj, reference)
        provenance_block = {
            "selection": "reference",
            "reference": reference,
            "reference_top_k": {
                str(c): list(b)
                for c, b in sorted(shared_spec.per_class_backgrounds.items())
            },
        }

    with _guard("synthesize_shared", out / "shared" / "debug_train.fset"):
        shared_debug = _generate_arm(
            config, out / "shared", shared_spec.per_class_backgrounds,
            generator, class_names, first_train.dim,
        )

    report_members: dict[str, dict] = {}
    ratios: list[float] = []
    for mc in members_cfg:
        name = mc["name"]
        row = member_rows[name]
        with _guard("retrain_collective", out / "members" / name / "collective" / "head.head"):
            collective_head = _retrain(
                config, out / "members" / name / "collective",
                row["train"], shared_debug, row["train_seed"],
            )
        collective_cells = _arm_cells(collective_head, row["eval_pool"], row["partition"])
        individual_heldout = row["individual_cells"]["heldout_accuracy"]
        collective_heldout = collective_cells["heldout_accuracy"]
        ratio: float | None = None
        if individual_heldout is None or collective_heldout is None:
            nulls[f"{name}.relative_accuracy"] = "empty_split_half"
        else:
            try:
                ratio = relative_accuracy(collective_heldout, individual_heldout)
                ratios.append(ratio)
            except ZeroDivisionError:
                nulls[f"{name}.relative_accuracy"] = "individual_heldout_zero"
        for arm in ("baseline_cells", "individual_cells"):
            _collect_nulls(f"{name}.{arm[:-6]}", row[arm], "empty_split_half", nulls)
        _collect_nulls(f"{name}.collective", collective_cells, "empty_split_half", nulls)
        report_members[name] = {
            "train_seed": row["train_seed"],
            "baseline": row["baseline_cells"],
            "individual": row["individual_cells"],
            "collective": collective_cells,
            "relative_accuracy": ratio,
        }

    mean_ratio = float(np.mean(ratios)) if ratios else None
    if mean_ratio is None:
        nulls["mean_relative_accuracy"] = "no_member_ratio"
    seeds = {"root": root, "split_base": derive_seed(root, "split")}
    report = {
        "kind": "collective_debug",
        "collective_type": collective_type,
        "category": category_obj.name,
        "config": _report_config(config),
        "config_digest": config_digest(config),
        "provenance": provenance_block,
        "members": report_members,
        "mean_relative_accuracy": mean_ratio,
        "nulls": nulls,
    }
    _write_json(out / "report.json", report)
    rows = []
    for name, data_row in report_members.items():
        for arm in ("baseline", "individual", "collective"):
            cells = data_row[arm]
            rows.append(
                [
                    name, arm,
                    _fmt(cells["test_accuracy"]), _fmt(cells["seed_accuracy"]),
                    _fmt(cells["heldout_accuracy"]),
                    _fmt(data_row["relative_accuracy"]) if arm == "collective" else "",
                ]
            )
    _write_csv(
        out / "report.csv",
        ["member", "arm", "test_accuracy", "seed_accuracy", "heldout_accuracy",
         "relative_accuracy"],
        rows,
    )
    write_run_manifest(out, config, {"root": root})
    return report


def _pooled_for_report(members: Sequence[CategoryMember]) -> dict[int, dict[str, int]]:
    totals: dict[int, dict[str, int]] = {}
    for member in members:
        for class_index, counts in member.frequencies.items():
            bucket = totals.setdefault(int(class_index), {})
            for background, count in counts.items():
                if count > 0:
                    bucket[background] = bucket.get(background, 0) + int(count)
    return totals


# ---------------------------------------------------------------- similarity

def run_similarity(config: Mapping[str, Any], manifest_path: str | os.PathLike) -> dict:
    """Mine every manifest member and emit the pairwise failure-IoU matrix."""
    members, base = _load_all_manifest_members(manifest_path)
    if len(members) < 2:
        raise ConfigError("similarity needs at least two manifest members")
    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    root = int(config["rng_seed"])
    pools = _PoolCache(base)

    failure_sets: dict[str, list[str]] = {}
    categories: dict[str, str] = {}
    for mc in members:
        name = mc["name"]
        categories[name] = mc["category"]
        train = pools.load(mc["original_train"])
        eval_pool = pools.load(mc["eval_pool"])
        train_seed = _member_seed(root, mc)
        mdir = out / "members" / name
        with _guard("baseline_train", mdir / "head.head"):
            head = train_head(WeightedSets(train), _train_config(config, train_seed))
            mdir.mkdir(parents=True, exist_ok=True)
            write_head(head, mdir / "head.head")
        with _guard("mine", mdir / "failures.json"):
            failures = mine_failures(head, eval_pool)
            _write_json(
                mdir / "failures.json",
                {"failures": [f.row_id for f in failures], "train_seed": train_seed},
            )
        failure_sets[name] = [f.row_id for f in failures]

    with _guard("similarity", out / "matrix.csv"):
        matrix = similarity_matrix(failure_sets)
        (out / "matrix.csv").write_text(matrix.to_csv(), encoding="utf-8")

    within, cross = [], []
    names = matrix.model_names
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            value = float(matrix.values[i, j])
            if categories[names[i]] == categories[names[j]]:
                within.append(value)
            else:
                cross.append(value)
    nulls: dict[str, str] = {}
    within_mean = float(np.mean(within)) if within else None
    cross_mean = float(np.mean(cross)) if cross else None
    if within_mean is None:
        nulls["within_category_mean_iou"] = "no_within_category_pair"
    if cross_mean is None:
        nulls["cross_category_mean_iou"] = "single_category"

    report = {
        "kind": "similarity",
        "config": _report_config(config),
        "config_digest": config_digest(config),
        "categories": categories,
        "model_names": names,
        "iou": matrix.values.tolist(),
        "within_category_mean_iou": within_mean,
        "cross_category_mean_iou": cross_mean,
        "nulls": nulls,
    }
    _write_json(out / "report.json", report)
    write_run_manifest(out, config, {"root": root})
    return report


# ---------------------------------------------------------------- bench materializer

def materialize_bench(config: Mapping[str, Any], out_dir: str | os.PathLike | None = None) -> Path:
    """Write worlds, datasets, and a category manifest for bench runs.

    Geometries share one data seed, so every geometry realizes the same
    row plan (same ids, same planted class/background per row) under its
    own direction set, the bench analog of several extractors embedding
    one dataset. Members of a geometry share its pools and differ only by
    training seed.
    """
    out = Path(out_dir) if out_dir is not None else Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    root = int(config["rng_seed"])
    params = _world_params(config)
    plan = _split_plan(config)
    bench = config["bench"]
    geometries = int(bench["geometries"])
    members_per = int(bench["members_per_geometry"])
    data_seed = derive_seed(root, "data")

    categories = []
    for g in range(geometries):
        with _guard("bench_world", out / f"world_g{g}"):
            world = sample_world(params, derive_seed(root, "world", g))
            save_world(world, out / f"world_g{g}")
            train, eval_pool = sample_dataset(world, plan, data_seed)
            data_dir = out / f"data_g{g}"
            data_dir.mkdir(parents=True, exist_ok=True)
            write_feature_set(train, data_dir / "original_train.fset")
            write_feature_set(eval_pool, data_dir / "eval_pool.fset")
        members = [
            {
                "name": f"geom{g}-t{t}",
                "original_train": f"data_g{g}/original_train.fset",
                "eval_pool": f"data_g{g}/eval_pool.fset",
                "train_seed": derive_seed(root, "member", g, t),
            }
            for t in range(members_per)
        ]
        categories.append(
            {
                "category": f"geom{g}",
                "world_dir": f"world_g{g}",
                "world_fingerprint": world.fingerprint(),
                "bayes_accuracy": bayes_accuracy(world, eval_pool),
                "reference": members[0]["name"],
                "members": members,
            }
        )
    manifest = {
        "categories": categories,
        "rng_seed": root,
        "data_seed": data_seed,
        "world": dict(config["data"]["world"]),
        "split": dict(config["data"]["split"]),
    }
    _write_json(out / "members.json", manifest)
    return out / "members.json"
