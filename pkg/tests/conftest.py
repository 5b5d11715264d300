import numpy as np
import pytest

from lbn import likelihood
from lbn.denoise import to_gray, write_pgm
from lbn.tensor import Rng


def randomize(model, seed=0, scale=0.5):
    """Overwrite every parameter with N(0, scale^2) draws."""
    rng = np.random.default_rng(seed)
    for p in model.parameters().values():
        p[...] = rng.normal(0.0, scale, p.shape)
    return model


def finite_difference_check(model, x, y, k, seed=0, step=1e-5):
    """Worst per-parameter relative error between analytic and central-difference gradients.

    The gradient is that of the frozen-residual surrogate: one pass samples the
    gates, then every perturbed evaluation replays the same residuals.
    """
    report, record = likelihood.mc_log_likelihood(model, x, y, k, Rng(seed))
    grads = likelihood.backward(model, report, record, x, y)
    worst = 0.0
    for name, p in model.parameters().items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = likelihood.surrogate_nll(model, x, y, record, k)
            flat[i] = old - step
            down = likelihood.surrogate_nll(model, x, y, record, k)
            flat[i] = old
            nflat[i] = (up - down) / (2 * step)
        denom = max(np.max(np.abs(num)), 1e-12)
        worst = max(worst, float(np.max(np.abs(num - grads[name])) / denom))
    return worst


@pytest.fixture(scope="session")
def image_corpus(tmp_path_factory):
    """Natural test images bundled with scikit-image, written as binary graymaps.

    Returns ``(train_dir, test_image_path)``; the test image (the camera man)
    never appears in the training folder.
    """
    data = pytest.importorskip("skimage.data")
    root = tmp_path_factory.mktemp("images")
    train_dir = root / "train"
    train_dir.mkdir()
    names = ["astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry",
             "hubble_deep_field", "coins", "moon", "page", "text", "clock", "grass",
             "gravel", "brick", "cell"]
    for name in names:
        im = getattr(data, name)().astype(np.float64) / 255.0
        if im.ndim == 3:
            im = to_gray(im[..., :3])
        write_pgm(train_dir / f"{name}.pgm", im)
    cam = data.camera().astype(np.float64) / 255.0
    test_path = root / "camera.pgm"
    write_pgm(test_path, cam[128:384, 128:384])
    return train_dir, test_path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
