import numpy as np
import pytest

from jointvit.data import AugmentConfig, load_manifest, synth_dataset
from jointvit.model import ViTConfig
from jointvit.train import TrainDataset

SIZE = 8


def small_datasets(root, seed=0):
    """Two image sets, one video set, one frame-order set at 8x8, ids 0..3."""
    kinds = [("blobs-image", 4), ("blobs-image", 3), ("blobs-video", 3), ("frame-order", 2)]
    out = []
    for i, (kind, c) in enumerate(kinds):
        m = synth_dataset(kind, root / f"d{i}", classes=c, samples=12, dims=(SIZE, SIZE), seed=seed + i,
                          frames=3, dataset_id=i)
        spec, man = load_manifest(m)
        out.append(TrainDataset(spec, man))
    return out


def small_config(datasets, dtype="f32", **kw):
    base = dict(image_size=(SIZE, SIZE), patch=4, dim=16, depth=3, heads=2, mlp_hidden=32,
                dataset_heads=[d.spec.num_classes for d in datasets], dtype=dtype)
    base.update(kw)
    return ViTConfig(**base)


@pytest.fixture
def datasets(tmp_path):
    return small_datasets(tmp_path)


@pytest.fixture
def aug():
    return AugmentConfig.desk(SIZE)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
