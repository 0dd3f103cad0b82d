import numpy as np
import pytest
from PIL import Image

from partfew.config import default_config


def _write_class_folder(root, n_classes, per_class, side, seed=0):
    rng = np.random.default_rng(seed)
    for c in range(n_classes):
        cdir = root / f"class{c:02d}"
        cdir.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
            Image.fromarray(arr).save(cdir / f"img{i:03d}.png")
    return root


@pytest.fixture
def image_folder(tmp_path):
    """Factory for throwaway directory-per-class image folders."""

    def build(n_classes=6, per_class=5, side=16, seed=0, name="data"):
        return _write_class_folder(tmp_path / name, n_classes, per_class, side, seed)

    return build


@pytest.fixture
def tiny_config():
    """Config small enough for second-scale training in tests."""
    cfg = default_config()
    cfg.data.image_side = 16
    cfg.data.n_parts = 2
    cfg.encoder.channels = 8
    cfg.encoder.embed_dim = 16
    cfg.encoder.map_side = 4
    cfg.pdn.queue_capacity = 16
    cfg.pdn.batch_size = 8
    cfg.pdn.epochs = 1
    cfg.pan.n_a = 4
    cfg.pan.init_steps = 20
    cfg.pan.refine_steps = 20
    cfg.eval.episodes = 4
    cfg.eval.way = 2
    cfg.eval.shot = 1
    cfg.eval.query_per_class = 2
    return cfg
