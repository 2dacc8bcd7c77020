"""Multi-dataset training: optimizers, loss weighting, sampling and evaluation.

One iteration visits every dataset in a fixed order. Each visit draws a batch,
scales that dataset's cross-entropy by its current weight, backpropagates and
applies that dataset's own optimizer to the shared backbone and its head, so
an iteration with four datasets performs four parameter updates.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import AugmentConfig, DatasetSpec, Manifest, assemble_batch, derived_rng
from .model import ViTModel, forward
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam", "adamw")


class NumericError(ArithmeticError):
    """Non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-5
    weight_decay: float = 5e-5
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor | np.ndarray],
                   state: OptimizerState, cfg: OptimizerConfig) -> Mapping[str, Tensor]:
    """Update ``params`` in place from ``grads`` (only names present in ``grads``).

    sgd:   v = mu v + (g + wd p);                 p -= lr v
    adam:  g' = g + wd p; bias-corrected moments; p -= lr m^ / (sqrt(v^) + eps)
    adamw: as adam on g, decay decoupled;         p -= lr (m^ / (sqrt(v^) + eps) + wd p)
    """
    gs = {k: (g.data if isinstance(g, Tensor) else np.asarray(g)) for k, g in grads.items()}
    for k, g in gs.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    state.step += 1
    t = state.step
    wd = cfg.weight_decay
    for k, g in gs.items():
        p = params[k].data
        buf = state.buffers
        if cfg.kind == "sgd":
            if wd:
                g = g + wd * p
            v = buf.get(f"{k}.v")
            v = g.copy() if v is None else cfg.momentum * v + g
            buf[f"{k}.v"] = v
            p -= cfg.lr * v
            continue
        if cfg.kind == "adam" and wd:
            g = g + wd * p
        m = buf.get(f"{k}.m", 0.0)
        v = buf.get(f"{k}.v", 0.0)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * (g * g)
        buf[f"{k}.m"], buf[f"{k}.v"] = m, v
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.kind == "adamw" and wd:
            update = update + wd * p
        p -= (cfg.lr * update).astype(p.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# hyperparameter regimes

REGIME_MODES = ("all", "domain", "each")

# optimizer and learning rate per regime for the four reference datasets
# (two image datasets followed by two video datasets)
REFERENCE_REGIMES = {
    "all": {"all": ("adamw", 1e-5)},
    "domain": {"image": ("adam", 1e-5), "video": ("adamw", 1e-5)},
    "each": {"each": [("adam", 1e-5), ("adamw", 1e-5), ("sgd", 1e-3), ("adam", 1e-5)]},
}


@dataclass
class HyperparamRegime:
    """``all``: one config; ``domain``: keys image/video; ``each``: one per dataset."""

    mode: str = "all"
    all: OptimizerConfig | None = None
    domain: dict[str, OptimizerConfig] | None = None
    each: list[OptimizerConfig] | None = None

    def __post_init__(self):
        if self.mode not in REGIME_MODES:
            raise ValueError(f"unknown regime mode {self.mode!r}")
        if self.mode == "all" and self.all is None:
            raise ValueError("regime 'all' needs one optimizer config")
        if self.mode == "domain" and (not self.domain or set(self.domain) - {"image", "video"}):
            raise ValueError("regime 'domain' needs configs keyed by 'image' and/or 'video'")
        if self.mode == "each" and not self.each:
            raise ValueError("regime 'each' needs a list of configs")

    def resolve(self, specs: Sequence[DatasetSpec]) -> list[OptimizerConfig]:
        if self.mode == "all":
            return [self.all] * len(specs)
        if self.mode == "domain":
            missing = {s.modality for s in specs} - set(self.domain)
            if missing:
                raise ValueError(f"regime 'domain' has no config for {sorted(missing)}")
            return [self.domain[s.modality] for s in specs]
        if len(self.each) != len(specs):
            raise ValueError(f"regime 'each' lists {len(self.each)} configs for {len(specs)} datasets")
        return list(self.each)

    @classmethod
    def reference(cls, mode: str, lr_scale: float = 1.0, **overrides) -> HyperparamRegime:
        """The reference optimizer table, optionally with every lr multiplied by ``lr_scale``."""
        def mk(kind, lr):
            return OptimizerConfig(kind=kind, lr=lr * lr_scale, **overrides)

        table = REFERENCE_REGIMES[mode]
        if mode == "all":
            return cls("all", all=mk(*table["all"]))
        if mode == "domain":
            return cls("domain", domain={k: mk(*v) for k, v in table.items()})
        return cls("each", each=[mk(*v) for v in table["each"]])

    def to_dict(self) -> dict:
        d = {"mode": self.mode}
        if self.mode == "all":
            d["all"] = self.all.to_dict()
        elif self.mode == "domain":
            d["domain"] = {k: v.to_dict() for k, v in self.domain.items()}
        else:
            d["each"] = [v.to_dict() for v in self.each]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> HyperparamRegime:
        mode = d.get("mode", "all")
        if mode == "all":
            return cls("all", all=OptimizerConfig(**d["all"]))
        if mode == "domain":
            return cls("domain", domain={k: OptimizerConfig(**v) for k, v in d["domain"].items()})
        if mode == "each":
            return cls("each", each=[OptimizerConfig(**v) for v in d["each"]])
        raise ValueError(f"unknown regime mode {mode!r}")


# ---------------------------------------------------------------------------
# losses and metrics


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    nll = T.sub(T.logsumexp(logits, -1), T.take_last(logits, labels))
    return T.mean_axis(nll, 0)


def topk_hits(logits: np.ndarray, labels, k: int) -> np.ndarray:
    """Boolean hits; classes are ranked by logit, ties to the lower class index."""
    order = np.argsort(-np.asarray(logits), axis=-1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def topk_accuracy(logits: np.ndarray, labels, k: int = 1) -> float:
    hits = topk_hits(logits, labels, k)
    return float(hits.mean()) if hits.size else 0.0


# ---------------------------------------------------------------------------
# loss weighting


def dwa_weights(window_means: Sequence[tuple[float, float] | None], temperature: float = 1.0) -> np.ndarray:
    """w_i = D_N exp(r_i / temp) / sum_n exp(r_n / temp), r_i = L_i(t-1) / L_i(t-2).

    ``window_means[i]`` is (latest, previous) window-mean loss. Any missing or
    non-positive entry gives all-ones weights.
    """
    n = len(window_means)
    if any(m is None for m in window_means):
        return np.ones(n)
    if any(a <= 0 or b <= 0 for a, b in window_means):
        log.warning("non-positive window mean loss; using unit DWA weights this round")
        return np.ones(n)
    r = np.array([a / b for a, b in window_means]) / temperature
    e = np.exp(r - r.max())
    return n * e / e.sum()


KAPPA_CLAMP = 1e-6


def dtp_weight(kappa: float, gamma: float = 1.0) -> float:
    """-(1 - kappa)^gamma * ln(kappa), kappa clamped into [1e-6, 1 - 1e-6]."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    k = min(max(float(kappa), KAPPA_CLAMP), 1.0 - KAPPA_CLAMP)
    return -((1.0 - k) ** gamma) * math.log(k)


WEIGHTERS = ("static", "dwa", "dtp")


class LossWeighter:
    """Per-dataset loss weights that are static (1), DWA or DTP.

    Losses are averaged over consecutive non-overlapping windows of ``window``
    updates; DWA uses the two most recent window means once every dataset has
    them. DTP uses kappa = mean top-1 over the last ``window`` updates once a
    full window exists. Until then weights are 1.
    """

    def __init__(self, kind: str, num_datasets: int, window: int = 500,
                 gamma: float | Sequence[float] = 1.0, temperature: float = 1.0):
        if kind not in WEIGHTERS:
            raise ValueError(f"unknown weighter {kind!r}")
        if window < 1:
            raise ValueError("window must be >= 1")
        self.kind = kind
        self.num_datasets = num_datasets
        self.window = window
        self.gamma = list(gamma) if isinstance(gamma, Sequence) else [float(gamma)] * num_datasets
        self.temperature = temperature
        self.loss_buf = [[] for _ in range(num_datasets)]
        self.loss_means = [deque(maxlen=2) for _ in range(num_datasets)]
        self.top1_buf = [deque(maxlen=window) for _ in range(num_datasets)]

    def update(self, dataset: int, loss: float, top1: float) -> None:
        if not (math.isfinite(loss) and math.isfinite(top1)):
            raise NumericError(f"non-finite metric for dataset {dataset}")
        buf = self.loss_buf[dataset]
        buf.append(float(loss))
        if len(buf) == self.window:
            self.loss_means[dataset].append(math.fsum(buf) / self.window)
            buf.clear()
        self.top1_buf[dataset].append(float(top1))

    def kappa(self, dataset: int) -> float | None:
        buf = self.top1_buf[dataset]
        return math.fsum(buf) / len(buf) if len(buf) == self.window else None

    def ratios(self) -> list[float | None]:
        return [m[1] / m[0] if len(m) == 2 and m[0] > 0 else None for m in self.loss_means]

    def weights(self) -> np.ndarray:
        if self.kind == "static":
            return np.ones(self.num_datasets)
        if self.kind == "dwa":
            means = [(m[1], m[0]) if len(m) == 2 else None for m in self.loss_means]
            return dwa_weights(means, self.temperature)
        out = np.ones(self.num_datasets)
        for i in range(self.num_datasets):
            k = self.kappa(i)
            if k is not None:
                out[i] = dtp_weight(k, self.gamma[i])
        return out

    def weight(self, dataset: int) -> float:
        return float(self.weights()[dataset])


# ---------------------------------------------------------------------------
# sampling


def sample_order(num_datasets: int) -> Iterator[int]:
    """0, 1, ..., D_N - 1, 0, 1, ... forever."""
    if num_datasets < 1:
        raise ValueError("need at least one dataset")
    return itertools.cycle(range(num_datasets))


class EpochSampler:
    """Batches drawn from a stream of concatenated random permutations.

    No index repeats within an epoch; a batch may straddle two epochs.
    """

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0
        self.epoch = 0

    def next(self, batch_size: int) -> np.ndarray:
        out = []
        while len(out) < batch_size:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
                self.epoch += 1
            take = min(batch_size - len(out), self.n - self.pos)
            out.extend(self.perm[self.pos:self.pos + take].tolist())
            self.pos += take
        return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricsRecord:
    iteration: int
    dataset: int
    loss: float
    w: float
    top1: float
    top5: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass
class TrainDataset:
    spec: DatasetSpec
    manifest: Manifest


@dataclass
class TrainState:
    seed: int
    opt_states: list[OptimizerState]
    samplers: list[EpochSampler]
    iteration: int = 0
    metrics: list[MetricsRecord] = field(default_factory=list)

    @classmethod
    def create(cls, datasets: Sequence[TrainDataset], seed: int) -> TrainState:
        samplers = [EpochSampler(len(d.manifest.records("train")), np.random.default_rng([seed, i]))
                    for i, d in enumerate(datasets)]
        return cls(seed, [OptimizerState() for _ in datasets], samplers)


def trainable_names(model: ViTModel, head_id: int) -> list[str]:
    """Shared backbone plus the one head a dataset's loss reaches."""
    return [k for k in model.params if not k.startswith("head") or k.startswith(f"head{head_id}.")]


def train_step(model: ViTModel, state: TrainState, dataset_id: int, batch, opt: OptimizerConfig,
               weight: float) -> tuple[float, float, float]:
    """One weighted update; returns (unweighted loss, top1, top5) of the batch."""
    tape = Tape()
    p = tape.watch_all(model.params)
    logits = forward(model, batch, dataset_id, p)
    ce = cross_entropy(logits, batch.labels)
    loss_value = ce.item()
    if not math.isfinite(loss_value):
        raise NumericError(f"non-finite loss on dataset {dataset_id} at iteration {state.iteration}")
    grads = tape.backward(T.scale(ce, weight))
    names = trainable_names(model, dataset_id)
    try:
        optimizer_step(model.params, {k: grads[k] for k in names}, state.opt_states[dataset_id], opt)
    except NumericError as e:
        raise NumericError(f"dataset {dataset_id}, iteration {state.iteration}: {e}") from None
    c = logits.shape[-1]
    return (loss_value, topk_accuracy(logits.data, batch.labels, 1),
            topk_accuracy(logits.data, batch.labels, min(5, c)))


def train_iteration(model: ViTModel, state: TrainState, datasets: Sequence[TrainDataset],
                    optimizers: Sequence[OptimizerConfig], weighter: LossWeighter,
                    aug: AugmentConfig, batch_size: int = 6) -> list[MetricsRecord]:
    """Visit every dataset once in id order, updating after each batch."""
    records = []
    for i in range(len(datasets)):
        ds = datasets[i]
        rng = derived_rng(state.seed, i, state.iteration)
        idx = state.samplers[i].next(batch_size)
        batch = assemble_batch(ds.spec, ds.manifest, idx, aug, rng, split="train", train=True)
        w = weighter.weight(i)
        loss, top1, top5 = train_step(model, state, i, batch, optimizers[i], w)
        weighter.update(i, loss, top1)
        records.append(MetricsRecord(state.iteration, i, loss, w, top1, top5))
    state.iteration += 1
    state.metrics.extend(records)
    return records


def evaluate(model: ViTModel, dataset: TrainDataset, head_id: int, split: str = "val",
             aug: AugmentConfig | None = None, batch_size: int = 32) -> tuple[float, float]:
    """(top-1, top-5) over a split with the deterministic transform; ties go to the lower class."""
    aug = aug or AugmentConfig.desk(model.config.image_size[0])
    n = len(dataset.manifest.records(split))
    if n == 0:
        raise ValueError(f"split {split!r} is empty")
    c = model.config.dataset_heads[head_id]
    hit1 = hit5 = 0
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        batch = assemble_batch(dataset.spec, dataset.manifest, idx, aug, split=split, train=False)
        logits = forward(model, batch, head_id).data
        hit1 += int(topk_hits(logits, batch.labels, 1).sum())
        hit5 += int(topk_hits(logits, batch.labels, min(5, c)).sum())
    return hit1 / n, hit5 / n
