"""Command line front end for debugging runs and their building blocks.

Exit codes: 0 success, 2 bad config or arguments, 3 a pipeline stage
failed. Remote clients read their API key from the environment variable
DESPUR_API_KEY (configurable per client via api_key_env).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .benchworld import load_world
from .failure_mining import mine_failures
from .interchange import read_feature_set, write_feature_set
from .linear_head import WeightedSets, read_head, train_head, write_head
from .pipeline import (
    ConfigError,
    StageError,
    _guard,
    _pair_template,
    _response_cache,
    _train_config,
    build_embedder,
    build_generator,
    build_language_model,
    load_config,
    materialize_bench,
    run_collective,
    run_individual_debug,
    run_similarity,
    run_sweep,
)
from .seeds import derive_seed
from .synthesis import JournalingGenerator, build_requests, generate_debug_train
from .textualizer import build_attribution_report, build_catalog


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="despur",
        description="Detect, textualize, and retrain away spurious-background failures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, out_help: str):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a config key (dotted path, JSON value)",
        )
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("train-head", help="train a linear head on a feature file")
    common(sp, "output head file (required)")
    sp.add_argument("--train", required=True, help="original training FSET1 file")
    sp.add_argument("--debug", help="optional debug FSET1 file, weighted per config")

    sp = sub.add_parser("mine", help="list the rows of a pool a head misclassifies")
    common(sp, "output failures JSON (required)")
    sp.add_argument("--head", required=True)
    sp.add_argument("--pool", required=True)

    sp = sub.add_parser("textualize", help="name failure modes as (class, background) pairs")
    common(sp, "output directory (required)")
    sp.add_argument("--pool", required=True, help="pool the failures were mined from")
    sp.add_argument("--failures", required=True, help="failures JSON from `mine`")
    sp.add_argument("--world", help="benchworld directory, for bench-backed clients")

    sp = sub.add_parser("synthesize", help="generate debug rows for selected modes")
    common(sp, "output directory (required)")
    sp.add_argument("--modes", required=True, help="per-class backgrounds JSON")
    sp.add_argument("--pool", required=True, help="feature file fixing vocabulary and dim")
    sp.add_argument("--world", help="benchworld directory, for bench-backed clients")

    sp = sub.add_parser("debug", help="full individual debugging run")
    common(sp, "run directory (defaults to config out_dir)")

    sp = sub.add_parser("sweep", help="retrain across a debug_weight or top_k grid")
    common(sp, "run directory (defaults to config out_dir)")
    sp.add_argument("--axis", required=True, choices=("debug_weight", "top_k"))

    sp = sub.add_parser("collective", help="debug a model category with one shared set")
    common(sp, "run directory (defaults to config out_dir)")
    sp.add_argument("--manifest", required=True, help="category manifest JSON")
    sp.add_argument("--type", dest="collective_type", required=True, type=int, choices=(1, 2))
    sp.add_argument("--category", help="category name when the manifest lists several")

    sp = sub.add_parser("similarity", help="pairwise failure IoU across manifest members")
    common(sp, "run directory (defaults to config out_dir)")
    sp.add_argument("--manifest", required=True)

    sp = sub.add_parser("bench", help="materialize a synthetic world, datasets, manifest")
    common(sp, "output directory (defaults to config out_dir)")
    return parser


def _config_for(args) -> dict:
    config = load_config(args.config, args.overrides)
    if args.out:
        config["out_dir"] = args.out
    return config


def _world_for(args, config):
    if args.world:
        with _guard("load_world", args.world):
            return load_world(args.world)
    return None


def _require_out(args, command: str) -> Path:
    if not args.out:
        raise ConfigError(f"{command} requires --out")
    return Path(args.out)


def cmd_train_head(args) -> str:
    config = load_config(args.config, args.overrides)
    out = _require_out(args, "train-head")
    with _guard("train_head", out):
        train = read_feature_set(args.train)
        debug = read_feature_set(args.debug) if args.debug else None
        cfg = _train_config(config, derive_seed(int(config["rng_seed"]), "train"))
        head = train_head(WeightedSets(train, debug), cfg)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_head(head, out, cfg)
    return f"head written to {out}"


def cmd_mine(args) -> str:
    load_config(args.config, args.overrides)
    out = _require_out(args, "mine")
    with _guard("mine", out):
        head, _ = read_head(args.head)
        pool = read_feature_set(args.pool)
        failures = mine_failures(head, pool)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            json.dumps(
                {
                    "failures": [
                        {"row_id": f.row_id, "true_label": f.true_label,
                         "predicted_label": f.predicted_label}
                        for f in failures
                    ]
                },
                sort_keys=True, indent=2,
            ) + "\n",
            encoding="utf-8",
        )
    return f"{len(failures)} failures written to {out}"


def _read_failure_ids(path: str) -> list[str]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [f["row_id"] for f in payload["failures"]]


def cmd_textualize(args) -> str:
    config = load_config(args.config, args.overrides)
    out = _require_out(args, "textualize")
    world = _world_for(args, config)
    with _guard("textualize", out):
        pool = read_feature_set(args.pool)
        row_ids = _read_failure_ids(args.failures)
        lm = build_language_model(config, world)
        embedder = build_embedder(config, world)
        catalog = build_catalog(
            pool.class_names, lm, embedder,
            prompt_template=_pair_template(config),
            dedup_threshold=config["textualize"]["dedup_threshold"],
            cache=_response_cache(config),
        )
        out.mkdir(parents=True, exist_ok=True)
        catalog.save(out / "catalog.json", out / "catalog.fset")
        report = build_attribution_report(
            pool, row_ids, catalog, k=config["textualize"]["top_k"]
        )
        (out / "attribution.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "top_k.json").write_text(
            json.dumps(
                {
                    "k": report.k,
                    "per_class": {str(c): b for c, b in sorted(report.top_k.items())},
                },
                sort_keys=True, indent=2,
            ) + "\n",
            encoding="utf-8",
        )
    return f"catalog, attribution, and top-k written to {out}"


def _read_modes(path: str) -> dict[int, list[str]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    table = payload.get("per_class", payload)
    try:
        return {int(c): list(b) for c, b in table.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"modes file {path} must map class index to backgrounds") from exc


def cmd_synthesize(args) -> str:
    config = load_config(args.config, args.overrides)
    out = _require_out(args, "synthesize")
    world = _world_for(args, config)
    with _guard("synthesize", out):
        pool = read_feature_set(args.pool)
        modes = _read_modes(args.modes)
        generator = build_generator(config, world)
        requests = build_requests(
            pool.class_names, modes,
            rng_seed=int(config["rng_seed"]),
            n_samples=int(config["samples_per_mode"]),
            template=_pair_template(config),
        )
        journaled = JournalingGenerator(generator, out / "journal", pool.class_names)
        debug = generate_debug_train(
            requests, journaled, pool.class_names, expected_dim=pool.dim
        )
        out.mkdir(parents=True, exist_ok=True)
        write_feature_set(debug, out / "debug_train.fset")
    return f"{len(debug)} debug rows written to {out / 'debug_train.fset'}"


def cmd_debug(args) -> str:
    config = _config_for(args)
    run_individual_debug(config)
    return f"report written to {Path(config['out_dir']) / 'report.json'}"


def cmd_sweep(args) -> str:
    config = _config_for(args)
    run_sweep(config, args.axis)
    return f"report written to {Path(config['out_dir']) / 'report.json'}"


def cmd_collective(args) -> str:
    config = _config_for(args)
    run_collective(config, args.manifest, args.collective_type, args.category)
    return f"report written to {Path(config['out_dir']) / 'report.json'}"


def cmd_similarity(args) -> str:
    config = _config_for(args)
    run_similarity(config, args.manifest)
    return f"report written to {Path(config['out_dir']) / 'report.json'}"


def cmd_bench(args) -> str:
    config = _config_for(args)
    manifest = materialize_bench(config)
    return f"manifest written to {manifest}"


HANDLERS = {
    "train-head": cmd_train_head,
    "mine": cmd_mine,
    "textualize": cmd_textualize,
    "synthesize": cmd_synthesize,
    "debug": cmd_debug,
    "sweep": cmd_sweep,
    "collective": cmd_collective,
    "similarity": cmd_similarity,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        message = HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
