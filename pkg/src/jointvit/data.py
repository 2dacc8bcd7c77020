"""Dataset manifests, synthetic datasets, augmentation and batch assembly.

On-disk layout of one dataset directory::

    <root>/manifest.json
    <root>/train/000000.ivt      image: (3, H0, W0)   video: (F, 3, H0, W0)
    <root>/val/000000.ivt

``manifest.json``::

    {"format": 1, "id": 0, "name": "...", "modality": "image" | "video",
     "num_classes": C, "frames_per_clip": T, "size": [H0, W0],
     "splits": {"train": [{"file": "train/000000.ivt", "label": 3, "frames": 1}, ...],
                "val": [...]}}

Record paths are relative to the manifest. Pixel values are float32.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_file import TensorFormatError, load_tensor, read_header, save_tensor

MODALITIES = ("image", "video")
SYNTH_KINDS = ("blobs-image", "blobs-video", "frame-order")


class ManifestError(ValueError):
    """Invalid manifest; ``index`` is the offending record (or None)."""

    def __init__(self, message: str, index: int | None = None, split: str | None = None):
        where = f" (record {index} of split {split!r})" if index is not None else ""
        super().__init__(message + where)
        self.index = index
        self.split = split


class EmptyVideoError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    id: int
    name: str
    modality: str
    num_classes: int
    frames_per_clip: int
    native_size: tuple[int, int]
    manifest_path: Path | None = None


@dataclass(frozen=True)
class Record:
    file: Path
    label: int
    frames: int = 1


@dataclass
class Manifest:
    splits: dict[str, list[Record]]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def records(self, split: str = "train") -> list[Record]:
        try:
            return self.splits[split]
        except KeyError:
            raise ManifestError(f"no split named {split!r}") from None

    def __len__(self) -> int:
        return len(self.splits.get("train", []))

    def load(self, split: str, index: int) -> np.ndarray:
        key = (split, index)
        arr = self._cache.get(key)
        if arr is None:
            rec = self.records(split)[index]
            try:
                arr = load_tensor(rec.file)
            except (OSError, TensorFormatError) as e:
                raise ManifestError(f"cannot read {rec.file}: {e}", index, split) from None
            self._cache[key] = arr
        return arr

    def labels(self, split: str = "train") -> np.ndarray:
        return np.array([r.label for r in self.records(split)], dtype=np.int64)


@dataclass
class AugmentConfig:
    crop_area: tuple[float, float] = (0.08, 1.0)
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    size: int = 224
    hflip: float = 0.5
    video_short_edge: tuple[int, int] = (224, 320)
    clip_seconds: float = 2.67
    frames_per_clip: int = 16
    fps: float = 30.0
    enabled: bool = True

    def __post_init__(self):
        self.crop_area = tuple(self.crop_area)
        self.aspect = tuple(self.aspect)
        self.video_short_edge = tuple(self.video_short_edge)
        for name in ("crop_area", "aspect", "video_short_edge"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range {lo, hi} is empty or non-positive")
        if self.crop_area[1] > 1.0:
            raise ValueError("crop area fraction cannot exceed 1")
        if self.size > self.video_short_edge[0]:
            raise ValueError(f"output size {self.size} exceeds the smallest resized short edge "
                             f"{self.video_short_edge[0]}")
        if not 0.0 <= self.hflip <= 1.0:
            raise ValueError("hflip must be a probability")
        if self.frames_per_clip < 1:
            raise ValueError("frames_per_clip must be >= 1")

    @classmethod
    def desk(cls, size: int = 32, **kw) -> AugmentConfig:
        """Same procedure scaled to a small output size (short-edge range scaled by size/224)."""
        hi = max(size, round(size * 320 / 224))
        return cls(size=size, video_short_edge=(size, hi), **kw)

    @property
    def window(self) -> int:
        return max(1, round(self.fps * self.clip_seconds))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("crop_area", "aspect", "video_short_edge"):
            d[k] = list(d[k])
        return d


@dataclass
class SampleBatch:
    modality: str
    pixels: np.ndarray  # (B,3,H,W) or (B,T,3,H,W)
    labels: np.ndarray
    dataset_id: int

    def __post_init__(self):
        want = 4 if self.modality == "image" else 5
        if self.pixels.ndim != want:
            raise ValueError(f"{self.modality} batch needs rank {want}, got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("labels and pixels disagree on batch size")

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path) -> tuple[DatasetSpec, Manifest]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from None
    try:
        modality = doc["modality"]
        if modality not in MODALITIES:
            raise ManifestError(f"unknown modality {modality!r}")
        spec = DatasetSpec(
            id=int(doc.get("id", 0)),
            name=str(doc["name"]),
            modality=modality,
            num_classes=int(doc["num_classes"]),
            frames_per_clip=int(doc.get("frames_per_clip", 1)),
            native_size=tuple(int(v) for v in doc["size"]),
            manifest_path=path,
        )
        raw_splits = doc["splits"]
    except KeyError as e:
        raise ManifestError(f"manifest {path} lacks field {e}") from None
    if (spec.frames_per_clip == 1) != (modality == "image"):
        raise ManifestError("frames_per_clip must be 1 exactly for image datasets")
    if spec.num_classes < 1:
        raise ManifestError("num_classes must be positive")

    root = path.parent
    splits = {}
    for split, entries in raw_splits.items():
        recs = []
        for i, e in enumerate(entries):
            label = int(e["label"])
            if not 0 <= label < spec.num_classes:
                raise ManifestError(f"label {label} outside [0, {spec.num_classes})", i, split)
            f = root / e["file"]
            if not f.is_file():
                raise ManifestError(f"tensor file {f} does not exist", i, split)
            try:
                _, shape = read_header(f)
            except TensorFormatError as err:
                raise ManifestError(str(err), i, split) from None
            frames = int(e.get("frames", 1))
            h0, w0 = spec.native_size
            want = (3, h0, w0) if modality == "image" else (frames, 3, h0, w0)
            if shape != want:
                raise ManifestError(f"tensor {f} has shape {shape}, manifest declares {want}", i, split)
            if modality == "video" and frames < 1:
                raise ManifestError("video record with no frames", i, split)
            recs.append(Record(f, label, frames))
        splits[split] = recs
    return spec, Manifest(splits)


def write_manifest(root, spec: DatasetSpec, splits: dict[str, list[Record]]) -> Path:
    root = Path(root)
    doc = {
        "format": 1,
        "id": spec.id,
        "name": spec.name,
        "modality": spec.modality,
        "num_classes": spec.num_classes,
        "frames_per_clip": spec.frames_per_clip,
        "size": list(spec.native_size),
        "splits": {
            s: [{"file": Path(r.file).relative_to(root).as_posix(), "label": r.label,
                 "frames": r.frames} for r in recs]
            for s, recs in splits.items()
        },
    }
    out = root / "manifest.json"
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# synthetic datasets


def _blob(h: int, w: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def _class_templates(classes: int, h: int, w: int, rng) -> np.ndarray:
    """One (3, h, w) pattern per class: two coloured blobs at class-specific spots."""
    sigma = max(h, w) / 6
    temps = np.empty((classes, 3, h, w))
    for c in range(classes):
        img = np.zeros((3, h, w))
        for _ in range(2):
            cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
            color = rng.uniform(-1, 1, size=3)
            img += color[:, None, None] * _blob(h, w, cy, cx, sigma)
        temps[c] = img
    return temps


def synth_dataset(kind: str, root, classes: int = 4, samples: int = 64,
                  dims: Sequence[int] = (32, 32), seed: int = 0, frames: int = 4,
                  val_fraction: float = 0.25, dataset_id: int = 0,
                  name: str | None = None) -> Path:
    """Write a synthetic dataset to ``root`` and return the manifest path.

    ``blobs-image``/``blobs-video``: class c is a fixed blob pattern plus
    amplitude jitter and pixel noise (clips add a small per-frame drift).
    ``frame-order``: two classes; a blob travels down the frame in a class-0
    clip and every class-0 clip has its exact frame reversal stored with
    label 1, so single frames carry no class information. ``samples`` counts
    training records; the validation split gets ``val_fraction`` of that.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    h, w = (int(d) for d in dims)
    root = Path(root)
    modality = "image" if kind == "blobs-image" else "video"
    if kind == "frame-order":
        classes = 2
    t = 1 if modality == "image" else int(frames)
    spec = DatasetSpec(dataset_id, name or kind, modality, classes, t, (h, w))
    n_val = max(1, round(samples * val_fraction))

    splits = {}
    if kind == "frame-order":
        for split, n in (("train", samples), ("val", n_val)):
            pairs = max(1, n // 2)
            recs = []
            for k in range(pairs):
                clip = _moving_blob_clip(t, h, w, rng)
                for label, c in ((0, clip), (1, clip[::-1])):
                    recs.append(_save(root, split, len(recs), c, label, t))
            splits[split] = recs
    else:
        temps = _class_templates(classes, h, w, rng)
        for split, n in (("train", samples), ("val", n_val)):
            recs = []
            for i in range(n):
                label = i % classes
                amp = rng.uniform(0.8, 1.2)
                if modality == "image":
                    x = amp * temps[label] + rng.normal(0, 0.05, size=(3, h, w))
                else:
                    drift = rng.normal(0, 0.05, size=(t, 3, 1, 1))
                    x = amp * temps[label][None] + drift + rng.normal(0, 0.05, size=(t, 3, h, w))
                recs.append(_save(root, split, i, x, label, t))
            splits[split] = recs
    return write_manifest(root, spec, splits)


def _moving_blob_clip(t: int, h: int, w: int, rng) -> np.ndarray:
    """Blob moving strictly downward; vertical motion survives horizontal flips."""
    sigma = max(h, w) / 8
    start = rng.uniform(0, 0.25 * (h - 1))
    stop = rng.uniform(0.75 * (h - 1), h - 1)
    cx = rng.uniform(0.25 * (w - 1), 0.75 * (w - 1))
    color = rng.uniform(0.5, 1.0, size=3) * rng.choice([-1.0, 1.0], size=3)
    rows = np.linspace(start, stop, t)
    clip = np.stack([color[:, None, None] * _blob(h, w, cy, cx, sigma) for cy in rows])
    return clip + rng.normal(0, 0.02, size=clip.shape)


def _save(root: Path, split: str, i: int, x: np.ndarray, label: int, frames: int) -> Record:
    d = root / split
    d.mkdir(parents=True, exist_ok=True)
    f = d / f"{i:06d}.ivt"
    save_tensor(f, x)
    return Record(f, int(label), frames)


# ---------------------------------------------------------------------------
# augmentation


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (..., H, W) with bilinear weights, align_corners=False, no antialiasing.

    Source coordinate of output pixel i is (i + 0.5) * in/out - 0.5, clamped
    to [0, in - 1]; edges replicate.
    """
    in_h, in_w = img.shape[-2:]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis_weights(in_h, out_h)
    x0, x1, fx = axis_weights(in_w, out_w)
    rows = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(img.dtype, copy=False)


def crop_box(h: int, w: int, cfg: AugmentConfig, rng, attempts: int = 10) -> tuple[int, int, int, int]:
    """Random (top, left, height, width) covering a random area fraction and aspect."""
    area = h * w
    for _ in range(attempts):
        frac = rng.uniform(*cfg.crop_area)
        ratio = rng.uniform(*cfg.aspect)
        cw = int(round(math.sqrt(area * frac * ratio)))
        ch = int(round(math.sqrt(area * frac / ratio)))
        if 1 <= cw <= w and 1 <= ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Random resized crop to (3, S, S) followed by a coin-flip horizontal mirror."""
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("empty image")
    top, left, ch, cw = crop_box(h, w, cfg, rng)
    out = bilinear_resize(img[..., top:top + ch, left:left + cw], cfg.size, cfg.size)
    if rng.random() < cfg.hflip:
        out = hflip(out)
    return out


def augment_clip(frames: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """(T, 3, H, W) -> (T, 3, S, S) with one short-edge resize, crop and flip for all frames."""
    h, w = frames.shape[-2:]
    short = int(rng.integers(cfg.video_short_edge[0], cfg.video_short_edge[1] + 1))
    nh, nw = (short, max(short, round(w * short / h))) if h <= w else (max(short, round(h * short / w)), short)
    resized = bilinear_resize(frames, nh, nw)
    top = int(rng.integers(0, nh - cfg.size + 1))
    left = int(rng.integers(0, nw - cfg.size + 1))
    out = resized[..., top:top + cfg.size, left:left + cfg.size]
    if rng.random() < cfg.hflip:
        out = hflip(out)
    return np.ascontiguousarray(out)


def sample_clip(num_frames: int, cfg: AugmentConfig, rng=None) -> np.ndarray:
    """Frame indices of one clip.

    A window of round(fps * clip_seconds) consecutive frames (clamped to the
    video) starts at a random offset; index k = start + floor(k * W / T). When
    the window is shorter than T, its frames are used in order and the last
    one repeats. With ``rng=None`` the window is centred (evaluation).
    """
    if num_frames < 1:
        raise EmptyVideoError("video has no frames")
    t = cfg.frames_per_clip
    win = min(cfg.window, num_frames)
    slack = num_frames - win
    start = slack // 2 if rng is None else int(rng.integers(0, slack + 1))
    if win >= t:
        offsets = (np.arange(t) * win) // t
    else:
        offsets = np.minimum(np.arange(t), win - 1)
    return start + offsets


def _eval_clip(frames: np.ndarray, size: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    nh, nw = (size, max(size, round(w * size / h))) if h <= w else (max(size, round(h * size / w)), size)
    resized = bilinear_resize(frames, nh, nw)
    top, left = (nh - size) // 2, (nw - size) // 2
    return np.ascontiguousarray(resized[..., top:top + size, left:left + size])


def assemble_batch(spec: DatasetSpec, manifest: Manifest, indices: Sequence[int],
                   cfg: AugmentConfig, rng=None, split: str = "train",
                   train: bool = True) -> SampleBatch:
    """Load, transform and stack the records at ``indices``.

    ``train=False`` (or ``cfg.enabled=False``) uses the deterministic path: a
    plain resize for images, a centred window and centre crop for clips.
    """
    augment = train and cfg.enabled
    if spec.frames_per_clip != cfg.frames_per_clip:
        cfg = dataclasses.replace(cfg, frames_per_clip=spec.frames_per_clip)
    if augment and rng is None:
        raise ValueError("training augmentation needs an rng")
    recs = manifest.records(split)
    out, labels = [], []
    for i in indices:
        if not 0 <= i < len(recs):
            raise ManifestError(f"index {i} out of range", i, split)
        x = manifest.load(split, i)
        if spec.modality == "image":
            x = augment_image(x, cfg, rng) if augment else bilinear_resize(x, cfg.size, cfg.size)
        else:
            try:
                idx = sample_clip(len(x), cfg, rng if augment else None)
            except EmptyVideoError as e:
                raise ManifestError(str(e), i, split) from None
            clip = x[idx]
            clip = augment_clip(clip, cfg, rng) if augment else _eval_clip(clip, cfg.size)
            x = clip
        out.append(np.asarray(x, dtype=np.float32))
        labels.append(recs[i].label)
    return SampleBatch(spec.modality, np.stack(out), np.array(labels, dtype=np.int64), spec.id)


def derived_rng(seed: int, dataset_id: int, iteration: int) -> np.random.Generator:
    """Independent stream for one (dataset, iteration) pair, fixed by the run seed."""
    return np.random.default_rng([seed, dataset_id, iteration])
