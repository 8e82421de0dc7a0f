import numpy as np
import pytest

from drn import imaging


def toy_images():
    """Two 192x192 crops of scikit-image's bundled astronaut and cat photos."""
    from skimage import data
    return {
        "astronaut": data.astronaut()[0:192, 160:352],
        "chelsea": data.chelsea()[40:232, 100:292],
    }


@pytest.fixture(scope="session")
def toy_hr_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy_hr")
    for name, img in toy_images().items():
        imaging.save_png(np.ascontiguousarray(img), d / f"{name}.png")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
