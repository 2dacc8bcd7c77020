# %% [markdown]
# # Runs from a config file
#
# The `jointvit` command wraps the library for file-driven runs. One JSON
# document describes the synthetic data, model, regime, weighter and
# schedule. Relative paths resolve against the file's directory. `--set`
# overrides single keys, and `IVF_SEED` overrides the seed.
#
# The cells below call `main()` in-process. The same arguments work in a
# shell as `jointvit synth run.json` and so on.

# %%
import json
import tempfile
from pathlib import Path

from jointvit.cli import main

root = Path(tempfile.mkdtemp())
kinds = [("blobs-image", 4), ("blobs-video", 3), ("frame-order", 2)]
config = {
    "synth": [{"kind": k, "root": f"data/{i}", "classes": c, "samples": 24, "dims": [8, 8], "frames": 4,
               "seed": i} for i, (k, c) in enumerate(kinds)],
    "datasets": [f"data/{i}/manifest.json" for i in range(len(kinds))],
    "model": {"image_size": [8, 8], "patch": 4, "dim": 32, "depth": 4, "heads": 4, "mlp_hidden": 64},
    "augment": {"size": 8},
    "regime": {"mode": "domain", "reference": True, "lr_scale": 100},
    "weighter": {"kind": "dtp", "window": 20, "gamma": 1.0},
    "schedule": {"iterations": 200, "eval_every": 100, "seed": 0},
    "io": {"output_dir": "run"},
}
(root / "run.json").write_text(json.dumps(config, indent=2))

# %%
main(["synth", str(root / "run.json")])

# %%
main(["train", str(root / "run.json"), "--set", "schedule.iterations=200"])
for line in (root / "run" / "eval.jsonl").read_text().splitlines():
    print(line)

# %%
main(["eval", str(root / "run" / "model.ivck"), str(root / "data/2/manifest.json"), "--head", "2"])

# %%
main(["export", str(root / "run" / "metrics.jsonl"), str(root / "csv")])
print((root / "csv" / "dataset_2.csv").read_text().splitlines()[:3])

# %% [markdown]
# A gradient check exits with status 3 when the error exceeds 1e-4. That is
# what happens with the sabotaged attention backward.

# %%
print("exit status:", main(["gradcheck", "--no-shift", "--sabotage"]))
