import numpy as np
import pytest

from dign.tensor import Tensor, constant, tensor_new


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(shape, seed, requires_grad=True, dtype=np.float64):
    return tensor_new(shape, ("gaussian", 0.0, 1.0), seed=seed,
                      requires_grad=requires_grad, dtype=dtype)


def proj_loss(out, seed=1234):
    """Reduce to a scalar via a fixed random projection.

    Kink-free (unlike wrapping in absolute) and sign-sensitive: weights are
    drawn from [0.5, 1.5] so every element keeps nonzero influence.
    """
    from dign.tensor import mul, sum_all
    w = tensor_new(out.shape, ("uniform", 0.5, 1.5), seed=seed,
                   dtype=np.float64)
    return sum_all(mul(out, w))


def holed_mask(h, w, box, n=1, dtype=np.float64):
    """All-valid mask with a rectangular hole (r0, r1, c0, c1)."""
    m = np.ones((n, 1, h, w), dtype=dtype)
    r0, r1, c0, c1 = box
    m[:, :, r0:r1, c0:c1] = 0.0
    return m


@pytest.fixture
def image_corpus(tmp_path):
    """Eight small structured PNGs for ingestion tests."""
    from PIL import Image
    d = tmp_path / "images"
    d.mkdir()
    rng = np.random.default_rng(42)
    for i in range(8):
        y, x = np.mgrid[0:64, 0:64] / 63.0
        img = np.stack([(x * (i + 1) + y) % 1.0,
                        0.5 + 0.5 * np.sin(2 * np.pi * x * (i % 3 + 1)),
                        (x + y + i / 8.0) % 1.0], -1)
        img = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
        Image.fromarray((img * 255).astype(np.uint8)).save(d / f"img_{i}.png")
    return str(d)


@pytest.fixture
def mask_corpus(tmp_path):
    from dign.maskgen import write_mask_dataset
    d = tmp_path / "masks"
    write_mask_dataset(10, str(d), "both", seed=3, w=64, h=64)
    return str(d)
