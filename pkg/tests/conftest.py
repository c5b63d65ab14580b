import numpy as np
import pytest

from ornet.data import bicubic_resize


def _to_rgb(img):
    a = np.asarray(img, dtype=np.float64)
    if a.max() > 1.0:
        a = a / 255.0
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    return a[..., :3].transpose(2, 0, 1)


def _center_square(img, size):
    _, h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    sq = img[:, top:top + side, left:left + side]
    return np.clip(bicubic_resize(sq, size, size), 0.0, 1.0)


@pytest.fixture(scope="session")
def natural_images():
    """Six photographs bundled with scikit-image, as 3 x 128 x 128 arrays in [0, 1]."""
    from skimage import data

    names = ["astronaut", "coffee", "chelsea", "rocket", "camera", "immunohistochemistry"]
    return {n: _center_square(_to_rgb(getattr(data, n)()), 128) for n in names}


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
