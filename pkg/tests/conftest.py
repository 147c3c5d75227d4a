import numpy as np
import pytest

from segblend.dataset import SegSample


def make_sample(id, label, rng=None, image=None):
    label = np.asarray(label, dtype=np.uint8)
    if image is None:
        rng = rng or np.random.default_rng(0)
        image = rng.random(label.shape + (3,))
    return SegSample(id, image, label)


def label_with(classes, shape=(6, 6)):
    """Label map containing exactly ``classes`` (plus background) laid out in stripes."""
    lab = np.zeros(shape, dtype=np.uint8)
    for k, c in enumerate(sorted(classes)):
        lab[k % shape[0], :] = c
    return lab


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, printed after the test session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
