"""Do models that share an extractor fail on the same rows?

Two extractor geometries render the same row plan; three heads per
geometry differ only by training seed. Mining each head's failures and
intersecting the id sets makes the family structure visible.
"""

import tempfile
from pathlib import Path

from despur.pipeline import default_config, materialize_bench, run_similarity

scratch = Path(tempfile.mkdtemp(prefix="despur-demo-"))

config = default_config()
config["rng_seed"] = 3
config["data"]["world"] = {"dim": 32, "n_classes": 6, "n_backgrounds": 9,
                           "noise_sigma": 0.15}
config["data"]["split"] = {"train_rows_per_class": 60, "eval_rows_per_class": 60}
config["train"]["epochs"] = 250
config["bench"] = {"geometries": 2, "members_per_geometry": 3}

bench_dir = scratch / "bench"
materialize_bench(config, bench_dir)

config["out_dir"] = str(scratch / "similarity")
report = run_similarity(config, bench_dir / "members.json")

names = report["model_names"]
print("pairwise failure IoU (rows/cols: " + ", ".join(names) + ")")
for row in report["iou"]:
    print("  " + "  ".join(f"{v:.2f}" for v in row))

print(f"\nmean IoU within a geometry: {report['within_category_mean_iou']:.3f}")
print(f"mean IoU across geometries: {report['cross_category_mean_iou']:.3f}")
