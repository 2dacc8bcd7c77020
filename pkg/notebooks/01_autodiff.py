# %% [markdown]
# # The autodiff engine
#
# Every model in this package runs on `jointvit.tensor`: numpy arrays wrapped
# in `Tensor`, with operations recorded on a `Tape` while it is active.
# `Tape.backward` walks the recording in reverse and returns one gradient per
# watched parameter.

# %%
import numpy as np

from jointvit import tensor as T
from jointvit.gradcheck import finite_diff_check, tiny_vit_check
from jointvit.tensor import Tape, Tensor

# %% [markdown]
# ## A first gradient
#
# `sum(x * x)` has gradient `2x`.

# %%
tape = Tape()
x = tape.watch(Tensor(np.array([1.0, -2.0, 3.0])), "x")
grads = tape.backward(T.sum_(T.mul(x, x)))
print(grads["x"].data)

# %% [markdown]
# Parameters the loss never touches still get an entry, filled with zeros.

# %%
tape = Tape()
a = tape.watch(Tensor(np.ones((2, 2))), "a")
b = tape.watch(Tensor(np.ones((2, 2))), "unused")
print(tape.backward(T.sum_(T.matmul(a, a)))["unused"].data)

# %% [markdown]
# ## Checking against central differences
#
# `finite_diff_check` perturbs each parameter entry by `h` in both directions
# and compares the slope with the analytic gradient. A quadratic is exact up
# to roundoff.

# %%
rng = np.random.default_rng(0)
params = {"a": Tensor(rng.normal(size=(3, 4))), "b": Tensor(rng.normal(size=(4, 2)))}


def loss(p):
    y = T.matmul(p["a"], p["b"])
    return T.sum_(T.mul(y, y))


print(f"max relative error: {finite_diff_check(loss, params):.2e}")

# %% [markdown]
# The same check on a two-block clip model with temporal shift, in float64.
# The negative control swaps in a deliberately wrong attention backward, and
# the check notices straight away.

# %%
report = {}
print(f"clip model:        {tiny_vit_check(shift=True, report=report):.2e}")
print("worst tensor:", max(report, key=report.get))
print(f"sabotaged control: {tiny_vit_check(shift=False, faulty=True):.2e}")
