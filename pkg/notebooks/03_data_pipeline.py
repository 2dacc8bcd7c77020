# %% [markdown]
# # Datasets, augmentation and batches
#
# Datasets live on disk as a `manifest.json` next to one tensor file per
# sample. Three synthetic kinds stand in for real data:
#
# * `blobs-image` and `blobs-video` give each class its own fixed blob pattern.
# * `frame-order` pairs every clip with its exact reversal. Single frames are
#   useless there; only the order of frames tells the classes apart.

# %%
import tempfile
from pathlib import Path

import numpy as np

from jointvit.data import AugmentConfig, assemble_batch, augment_image, load_manifest, sample_clip, synth_dataset

root = Path(tempfile.mkdtemp())
paths = {kind: synth_dataset(kind, root / kind, classes=4, samples=16, dims=(24, 32), frames=8)
         for kind in ("blobs-image", "blobs-video", "frame-order")}
for kind, p in paths.items():
    spec, man = load_manifest(p)
    print(f"{kind:12s} {spec.modality:5s} classes={spec.num_classes} train={len(man)} "
          f"val={len(man.records('val'))} frames={spec.frames_per_clip}")

# %% [markdown]
# A frame-order pair really is the same frames in reverse:

# %%
_, fo = load_manifest(paths["frame-order"])
print(np.array_equal(fo.load("train", 1), fo.load("train", 0)[::-1]))

# %% [markdown]
# ## Which frames a clip uses
#
# The window is `round(fps * seconds)` frames long: 80 at 30 fps and 2.67 s.
# Within the window, 16 frames are spaced evenly. Short videos repeat their
# last frame, and evaluation uses the centred window.

# %%
cfg = AugmentConfig()
print(sample_clip(300, cfg, np.random.default_rng(0)))
print(sample_clip(300, cfg))
print(sample_clip(6, cfg))

# %% [markdown]
# ## Image augmentation
#
# This is a random resized crop followed by a coin-flip mirror. `desk(size)`
# keeps the default procedure but shrinks the output size and the clip
# short-edge range.

# %%
small = AugmentConfig.desk(16)
img = load_manifest(paths["blobs-image"])[1].load("train", 0)
rng = np.random.default_rng(1)
crops = [augment_image(img, small, rng) for _ in range(4)]
print([c.shape for c in crops], [round(float(c.mean()), 3) for c in crops])

# %% [markdown]
# ## Batches
#
# Image batches are `(B, 3, S, S)`. Clip batches are `(B, T, 3, S, S)`, and
# all frames of a clip share one crop and one flip.

# %%
for kind in ("blobs-image", "blobs-video"):
    spec, man = load_manifest(paths[kind])
    b = assemble_batch(spec, man, range(6), small, np.random.default_rng(2))
    print(kind, b.pixels.shape, b.labels)
