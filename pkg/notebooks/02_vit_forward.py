# %% [markdown]
# # One backbone for images and clips
#
# A clip of T frames is folded into the batch axis and run through the same
# encoder as an image. The class tokens are then averaged over time. The only
# cross-frame exchange is the class-token shift after each block: a few
# channels come from the previous frame and a few from the next.

# %%
import warnings

import numpy as np

from jointvit.model import ActivationSet, ViTConfig, encode, forward, init_model, patchify, token_shift
from jointvit.tensor import Tensor

# %% [markdown]
# ## Patches
#
# A 32x32 image with 16-pixel patches gives four tokens of 3*16*16 = 768 values.

# %%
print(patchify(np.zeros((1, 3, 32, 32)), 16).shape)

# %% [markdown]
# ## Shifting class tokens
#
# Three frames whose class tokens are `[1..4]`, `[5..8]` and `[9..12]`. One
# channel is shifted in each direction. Channel 0 comes from the frame before
# and channel 1 from the frame after. Missing neighbours contribute zeros.

# %%
cls = np.arange(1, 13, dtype=float).reshape(3, 4)
z = np.concatenate([cls[:, None], np.zeros((3, 2, 4))], axis=1)  # two patch tokens per frame
print(token_shift(ActivationSet(Tensor(z), frames=3), 1, 1).z.data[:, 0])

# %% [markdown]
# ## Same weights, both modalities

# %%
cfg = ViTConfig(image_size=(16, 16), patch=4, dim=32, depth=3, heads=4, mlp_hidden=64,
                dataset_heads=[10, 5])
model = init_model(cfg, seed=0)
images = np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32)
clips = np.random.default_rng(1).normal(size=(2, 3, 3, 16, 16)).astype(np.float32)
print("image logits", forward(model, images, head_id=0).shape)
print("clip logits ", forward(model, clips, head_id=1).shape)

# %% [markdown]
# With the shift turned off, a one-frame clip takes exactly the image path.

# %%
flat = init_model(ViTConfig(**{**cfg.to_dict(), "shift": "none"}), seed=0)
same = forward(flat, images[:, None], 0).data.tobytes() == forward(flat, images, 0).data.tobytes()
print("bitwise equal:", same)

# %% [markdown]
# ## How far information travels
#
# Each block moves information by one frame. After L blocks, frame t has
# heard from frames t-L through t+L. Here L=3 and one frame of a 9-frame clip
# is perturbed. Only frames within 3 steps of it respond.

# %%
rng = np.random.default_rng(2)
probe = init_model(ViTConfig(image_size=(8, 8), patch=4, dim=16, depth=3, heads=2, mlp_hidden=32,
                             dataset_heads=[2], dtype="f64"), seed=3)
for p in probe.params.values():
    p.data += rng.normal(0, 0.3, p.shape)
clip = rng.normal(size=(1, 9, 3, 8, 8))
with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # the clip is longer than the depth on purpose
    base = encode(probe, clip).data[0]
    bumped = clip.copy()
    bumped[0, 4] += 1.0
    change = np.abs(encode(probe, bumped).data[0] - base).max(axis=-1)
for t, c in enumerate(change):
    print(f"frame {t}: {c:.1e}")
