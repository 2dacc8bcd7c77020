"""Central-difference gradient checking."""
from __future__ import annotations

import warnings
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[Mapping[str, Tensor]], Tensor],
                 params: Mapping[str, Tensor], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. every element of ``params``.

    ``params`` are perturbed in place and restored.
    """
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params).item())
            flat[i] = orig - h
            fm = float(f(params).item())
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        out[name] = g.reshape(p.shape)
    return out


def analytic_grad(f, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    tape = Tape()
    tracked = tape.watch_all(params)
    grads = tape.backward(f(tracked))
    return {k: v.data for k, v in grads.items()}


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, Tensor], h: float = 1e-5,
                      report: dict | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a name -> Tensor mapping to a scalar Tensor and must be
    deterministic. If ``report`` is given it is filled with the per-parameter
    maxima.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    analytic = analytic_grad(f, params)
    numeric = numeric_grad(f, params, h)
    worst = 0.0
    for name in params:
        err = relative_error(analytic[name], numeric[name])
        m = float(err.max()) if err.size else 0.0
        if report is not None:
            report[name] = m
        worst = max(worst, m)
    return worst


def tiny_vit_check(shift: bool = True, faulty: bool = False, seed: int = 0,
                   h: float = 1e-5, report: dict | None = None) -> float:
    """Gradient check of cross-entropy through a tiny float64 clip model.

    D=16, L=2, 8x8 frames with 4x4 patches (N=4), T=3, two clips, every
    parameter checked. Weights and biases are drawn with std 0.3 so that no
    gradient is vanishingly small. ``faulty`` swaps in an attention softmax
    with a wrong backward, which must be caught.
    """
    from .model import ViTConfig, forward, init_model
    from .train import cross_entropy

    cfg = ViTConfig(image_size=(8, 8), patch=4, dim=16, depth=2, heads=2, mlp_hidden=32,
                    dataset_heads=[3, 2], shift="tokenshift" if shift else "none",
                    shift_back=2, shift_fwd=2, dtype="f64")
    model = init_model(cfg, seed, std=0.3)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if not name.endswith(".gamma"):
            p.data[...] = rng.normal(0.0, 0.3, p.shape)
    x = rng.normal(size=(2, 3, 3, 8, 8))
    y = np.array([0, 2])

    def loss(params):
        return cross_entropy(forward(model, x, 0, params, faulty=faulty), y)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # depth 2 < T=3 is intended here
        return finite_diff_check(loss, model.params, h, report)
