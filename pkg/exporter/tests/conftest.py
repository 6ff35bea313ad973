import numpy as np
import pytest
from PIL import Image

from fobexport import init_reference_model


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    """A small frozen reference checkpoint (64px, 16px patches -> N=16)."""
    return init_reference_model(tmp_path_factory.mktemp("model") / "ckpt", seed=0)


@pytest.fixture(scope="session")
def vit_b16_model_dir(tmp_path_factory):
    """224px / 16px-patch geometry (the 14x14 = 196 token grid), kept shallow."""
    return init_reference_model(tmp_path_factory.mktemp("model224") / "ckpt",
                                image_size=224, patch_size=16, num_layers=1, seed=1)


def write_image(path, seed, size=48):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture
def image_dir(tmp_path):
    """Two classes, two images each, under per-class subdirectories."""
    root = tmp_path / "images"
    for c, cls in enumerate(("cat", "dog")):
        for i in range(2):
            write_image(root / cls / f"img_{i}.png", seed=10 * c + i)
    return root
