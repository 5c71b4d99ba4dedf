import json
from pathlib import Path

import numpy as np
import pytest

from despur.interchange import read_feature_set, write_feature_set
from despur.pipeline import (
    ConfigError,
    StageError,
    config_digest,
    default_config,
    load_config,
    materialize_bench,
    parse_override,
    run_collective,
    run_individual_debug,
    run_similarity,
    run_sweep,
)


def small_config(out_dir, rng_seed=11, **world):
    cfg = default_config()
    cfg["out_dir"] = str(out_dir)
    cfg["rng_seed"] = rng_seed
    cfg["data"]["world"] = {"dim": 32, "n_classes": 6, "n_backgrounds": 9, **world}
    cfg["data"]["split"] = {"train_rows_per_class": 60, "eval_rows_per_class": 60}
    cfg["train"]["epochs"] = 250
    return cfg


# ---------------------------------------------------------------- config

def test_defaults_validate():
    cfg = load_config()
    assert cfg["data"]["mode"] == "bench"
    assert cfg["train"]["debug_weight"] == 0.5


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"rng_seed": 3, "train": {"epochs": 9}}))
    cfg = load_config(path, ["train.learning_rate=0.1", "textualize.template=alt"])
    assert cfg["rng_seed"] == 3
    assert cfg["train"]["epochs"] == 9
    assert cfg["train"]["learning_rate"] == 0.1
    assert cfg["textualize"]["template"] == "alt"


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(None, ["train.no_such_field=1"])


def test_override_parsing():
    assert parse_override("a.b=0.5") == (["a", "b"], 0.5)
    assert parse_override("a=plain text") == (["a"], "plain text")
    assert parse_override('a=[1,2]') == (["a"], [1, 2])
    with pytest.raises(ConfigError):
        parse_override("no_equals")


def test_files_mode_validation():
    with pytest.raises(ConfigError):
        load_config(None, ["data.mode=files"])
    # bench clients cannot serve a file-backed run
    with pytest.raises(ConfigError):
        load_config(
            None,
            ["data.mode=files", "data.train_path=a.fset", "data.eval_path=b.fset"],
        )


def test_grid_and_template_validation():
    with pytest.raises(ConfigError):
        load_config(None, ["sweep.debug_weight_grid=[]"])
    with pytest.raises(ConfigError):
        load_config(None, ["sweep.top_k_grid=[0]"])
    with pytest.raises(ConfigError):
        load_config(None, ["textualize.template=nonsense"])
    cfg = load_config(None, ["textualize.template={class_name} near {background}"])
    assert cfg["textualize"]["template"] == "{class_name} near {background}"


def test_config_digest_ignores_out_dir():
    a = default_config()
    b = default_config()
    b["out_dir"] = "elsewhere"
    assert config_digest(a) == config_digest(b)
    b["rng_seed"] = 99
    assert config_digest(a) != config_digest(b)


# ---------------------------------------------------------------- individual

def test_individual_debug_report(tmp_path):
    cfg = small_config(tmp_path / "run")
    report = run_individual_debug(cfg)
    arms = report["arms"]
    assert arms["baseline"]["heldout_accuracy"] == 0.0
    assert arms["baseline"]["seed_accuracy"] == 0.0
    assert arms["targeted"]["heldout_accuracy"] > 0.2
    assert arms["targeted"]["heldout_accuracy"] > arms["random"]["heldout_accuracy"]
    assert report["provenance"]["n_failures"] > 0
    out = tmp_path / "run"
    for rel in (
        "report.json", "report.csv", "run_manifest.json",
        "baseline/head.head", "mining/failures.json", "mining/split.json",
        "textualize/catalog.json", "textualize/attribution.json",
        "targeted/debug_train.fset", "targeted/journal/journal.json",
        "random/debug_train.fset", "random/head.head",
    ):
        assert (out / rel).exists(), rel


def test_individual_debug_rerun_byte_identical(tmp_path):
    run_individual_debug(small_config(tmp_path / "a"))
    run_individual_debug(small_config(tmp_path / "b"))
    for name in ("report.json", "report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_manifest_hashes_artifacts(tmp_path):
    import hashlib

    cfg = small_config(tmp_path / "run")
    run_individual_debug(cfg)
    out = tmp_path / "run"
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["out_dir"] == str(out)
    assert "report.json" in manifest["artifacts"]
    digest = hashlib.sha256((out / "report.json").read_bytes()).hexdigest()
    assert manifest["artifacts"]["report.json"] == digest
    assert "run_manifest.json" not in manifest["artifacts"]


def test_zero_debug_weight_reproduces_baseline(tmp_path):
    cfg = small_config(tmp_path / "run")
    cfg["train"]["debug_weight"] = 0.0
    report = run_individual_debug(cfg)
    assert report["arms"]["targeted"] == report["arms"]["baseline"]


def test_random_volume_matches_targeted_budget(tmp_path):
    cfg = small_config(tmp_path / "run")
    run_individual_debug(cfg)
    random_rows = read_feature_set(tmp_path / "run" / "random" / "debug_train.fset")
    k = cfg["textualize"]["top_k"]
    n = cfg["samples_per_mode"]
    n_classes = cfg["data"]["world"]["n_classes"]
    assert len(random_rows) == n_classes * k * n


def test_no_failures_yields_null_cells(tmp_path):
    cfg = small_config(
        tmp_path / "run", rng_seed=2, mix=0.2, noise_sigma=0.0, p_common=0.6
    )
    cfg["data"]["split"] = {
        "train_rows_per_class": 40, "eval_rows_per_class": 40, "eval_rare_boost": 0.0,
    }
    report = run_individual_debug(cfg)
    assert report["arms"]["baseline"]["test_accuracy"] == 1.0
    assert report["arms"]["targeted"]["heldout_accuracy"] is None
    assert report["nulls"]["targeted.heldout_accuracy"] == "no_failures"
    text = (tmp_path / "run" / "report.json").read_text()
    assert "NaN" not in text


def test_files_mode_round_trip(tmp_path):
    # Materialize bench pools, then run on them as plain files: a fixture
    # language model, a prompt-embedding table, and a replayed generator
    # journal recorded by the bench-backed first pass.
    from despur.benchworld import BenchTextEmbedder, load_world
    from despur.interchange import FeatureSet

    bench_cfg = small_config(tmp_path / "world_run")
    first = run_individual_debug(bench_cfg)

    catalog_meta = json.loads(
        (tmp_path / "world_run" / "textualize" / "catalog.json").read_text()
    )
    responses = {}
    texts = []
    for cls in catalog_meta["classes"]:
        prompt = f"What are the uncommon backgrounds that a {cls['name']} can appear in?"
        responses[prompt] = ", ".join(cls["backgrounds"])
        texts.extend(cls["backgrounds"])
        texts.extend(f"A photo of {cls['name']} {b}" for b in cls["backgrounds"])
    texts = list(dict.fromkeys(texts))
    fixture = tmp_path / "lm_fixture.json"
    fixture.write_text(json.dumps({"responses": responses}))

    world = load_world(tmp_path / "world_run" / "data" / "world")
    vectors = BenchTextEmbedder(world).embed_texts(texts)
    table_path = tmp_path / "prompts.fset"
    write_feature_set(
        FeatureSet(
            dim=vectors.shape[1],
            ids=texts,
            labels=np.zeros(len(texts), dtype=np.int64),
            features=vectors.astype(np.float32),
            class_names=["text"],
            source_tag="prompt_table",
        ),
        table_path,
    )

    # One replay directory serving both arms: journals concatenate.
    import shutil

    merged = tmp_path / "journal_merged"
    merged.mkdir()
    calls = []
    client = dim = None
    for arm in ("targeted", "random"):
        src = tmp_path / "world_run" / arm / "journal"
        payload = json.loads((src / "journal.json").read_text())
        client, dim = payload["client"], payload["dim"]
        for call in payload["calls"]:
            renamed = f"call_{len(calls):04d}.fset"
            shutil.copy(src / call["file"], merged / renamed)
            calls.append({**call, "file": renamed})
    (merged / "journal.json").write_text(
        json.dumps({"client": client, "dim": dim, "calls": calls})
    )

    files_cfg = small_config(tmp_path / "files_run")
    files_cfg["data"] = {
        "mode": "files",
        "train_path": str(tmp_path / "world_run" / "data" / "original_train.fset"),
        "eval_path": str(tmp_path / "world_run" / "data" / "eval_pool.fset"),
        "world": {},
        "split": {},
    }
    files_cfg["clients"] = {
        "language_model": {"backend": "fixture", "path": str(fixture)},
        "embedder": {"backend": "fset", "path": str(table_path)},
        "generator": {"backend": "replay", "directory": str(merged)},
    }
    second = run_individual_debug(files_cfg)
    assert second["provenance"]["mode"] == "files"
    assert (
        second["arms"]["baseline"]["test_accuracy"]
        == first["arms"]["baseline"]["test_accuracy"]
    )
    assert second["arms"]["targeted"]["heldout_accuracy"] > 0.2


def test_files_mode_missing_file_is_stage_error(tmp_path):
    cfg = small_config(tmp_path / "run")
    cfg["data"] = {
        "mode": "files",
        "train_path": str(tmp_path / "missing.fset"),
        "eval_path": str(tmp_path / "missing2.fset"),
        "world": {},
        "split": {},
    }
    cfg["clients"] = {
        "language_model": {"backend": "fixture", "path": "x"},
        "embedder": {"backend": "fset", "path": "y"},
        "generator": {"backend": "replay", "directory": "z"},
    }
    with pytest.raises(StageError) as err:
        run_individual_debug(cfg)
    assert err.value.stage == "data"
    assert "missing.fset" in err.value.artifact


# ---------------------------------------------------------------- sweep

def test_sweep_debug_weight(tmp_path):
    cfg = small_config(tmp_path / "run")
    report = run_sweep(cfg, "debug_weight")
    values = [p["value"] for p in report["points"]]
    assert values == [0.0, 0.25, 0.5, 1.0]
    heldout = [p["heldout_accuracy"] for p in report["points"]]
    # The zero point is bitwise the no-debug baseline.
    assert heldout[0] == report["baseline"]["heldout_accuracy"] == 0.0
    assert all(b >= a - 0.01 for a, b in zip(heldout, heldout[1:]))
    assert (tmp_path / "run" / "shared" / "debug_train.fset").exists()
    lines = (tmp_path / "run" / "report.csv").read_text().splitlines()
    assert lines[0] == "debug_weight,test_accuracy,seed_accuracy,heldout_accuracy"
    assert len(lines) == 1 + len(values)


def test_sweep_top_k(tmp_path):
    cfg = small_config(tmp_path / "run")
    report = run_sweep(cfg, "top_k")
    heldout = [p["heldout_accuracy"] for p in report["points"]]
    assert all(b >= a - 0.01 for a, b in zip(heldout, heldout[1:]))
    for k in (1, 3, 5):
        point = tmp_path / "run" / "points" / f"top_k-{k}"
        assert (point / "debug_train.fset").exists()
        assert (point / "head.head").exists()


def test_sweep_axis_validation(tmp_path):
    with pytest.raises(ConfigError):
        run_sweep(small_config(tmp_path / "run"), "lambda")


# ---------------------------------------------------------------- bench materializer

def test_materialize_bench_manifest(tmp_path):
    cfg = small_config(tmp_path / "bench")
    cfg["bench"] = {"geometries": 2, "members_per_geometry": 3}
    manifest_path = materialize_bench(cfg)
    manifest = json.loads(manifest_path.read_text())
    assert len(manifest["categories"]) == 2
    fingerprints = {c["world_fingerprint"] for c in manifest["categories"]}
    assert len(fingerprints) == 2
    names = [m["name"] for c in manifest["categories"] for m in c["members"]]
    assert len(names) == len(set(names)) == 6
    seeds = [m["train_seed"] for c in manifest["categories"] for m in c["members"]]
    assert len(set(seeds)) == 6

    # Geometries share one row plan: identical ids, different features.
    a = read_feature_set(tmp_path / "bench" / "data_g0" / "eval_pool.fset")
    b = read_feature_set(tmp_path / "bench" / "data_g1" / "eval_pool.fset")
    assert a.ids == b.ids
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, b.features)


def test_materialize_bench_deterministic(tmp_path):
    cfg1 = small_config(tmp_path / "a")
    cfg1["bench"] = {"geometries": 1, "members_per_geometry": 2}
    cfg2 = small_config(tmp_path / "b")
    cfg2["bench"] = {"geometries": 1, "members_per_geometry": 2}
    materialize_bench(cfg1)
    materialize_bench(cfg2)
    a = (tmp_path / "a" / "data_g0" / "original_train.fset").read_bytes()
    b = (tmp_path / "b" / "data_g0" / "original_train.fset").read_bytes()
    assert a == b


# ---------------------------------------------------------------- collective

def bench_manifest(tmp_path, members, rng_seed=5, geometries=1):
    cfg = small_config(tmp_path / "bench", rng_seed=rng_seed)
    cfg["bench"] = {"geometries": geometries, "members_per_geometry": members}
    return materialize_bench(cfg), cfg


def test_collective_type2_one_member_reduces_exactly(tmp_path):
    manifest, cfg = bench_manifest(tmp_path, members=1)
    run_cfg = small_config(tmp_path / "coll", rng_seed=5)
    report = run_collective(run_cfg, manifest, 2)
    (member,) = report["members"].values()
    assert member["relative_accuracy"] == 1.0
    assert member["individual"] == member["collective"]


def test_collective_type2_shares_one_debug_set(tmp_path):
    manifest, cfg = bench_manifest(tmp_path, members=3)
    run_cfg = small_config(tmp_path / "coll", rng_seed=5)
    report = run_collective(run_cfg, manifest, 2)
    assert report["provenance"]["selection"] == "reference"
    assert report["provenance"]["reference"] == "geom0-t0"
    assert len(report["members"]) == 3
    assert report["mean_relative_accuracy"] == pytest.approx(
        np.mean([m["relative_accuracy"] for m in report["members"].values()])
    )
    shared = tmp_path / "coll" / "shared" / "debug_train.fset"
    assert shared.exists()
    # The reference member's collective arm is its individual arm.
    ref = report["members"]["geom0-t0"]
    assert ref["relative_accuracy"] == 1.0
    lines = (tmp_path / "coll" / "report.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 3


def test_collective_type1_provenance_names_pooled_failures(tmp_path):
    manifest, cfg = bench_manifest(tmp_path, members=2)
    run_cfg = small_config(tmp_path / "coll1", rng_seed=5)
    report = run_collective(run_cfg, manifest, 1)
    assert report["provenance"]["selection"] == "pooled"
    assert "pooled_frequencies" in report["provenance"]
    assert report["mean_relative_accuracy"] is not None


def test_collective_type_validation(tmp_path):
    manifest, cfg = bench_manifest(tmp_path, members=1)
    with pytest.raises(ConfigError):
        run_collective(small_config(tmp_path / "x"), manifest, 3)
    with pytest.raises(ConfigError):
        run_collective(small_config(tmp_path / "y"), tmp_path / "absent.json", 2)


def test_collective_unknown_category(tmp_path):
    manifest, cfg = bench_manifest(tmp_path, members=1)
    with pytest.raises(ConfigError):
        run_collective(small_config(tmp_path / "x"), manifest, 2, category="geom9")


# ---------------------------------------------------------------- similarity

def test_similarity_two_geometries(tmp_path):
    manifest, cfg = bench_manifest(tmp_path, members=2, geometries=2)
    run_cfg = small_config(tmp_path / "sim", rng_seed=5)
    report = run_similarity(run_cfg, manifest)
    assert len(report["model_names"]) == 4
    matrix = np.asarray(report["iou"])
    assert np.allclose(matrix, matrix.T)
    assert np.allclose(np.diag(matrix), 1.0)
    assert report["within_category_mean_iou"] > report["cross_category_mean_iou"]
    assert (tmp_path / "sim" / "matrix.csv").exists()


def test_similarity_needs_two_members(tmp_path):
    manifest, cfg = bench_manifest(tmp_path, members=1)
    with pytest.raises(ConfigError):
        run_similarity(small_config(tmp_path / "sim"), manifest)
