import sys
from pathlib import Path

import numpy as np
import pytest

from sammpa.core import BinaryMask, ImageTensor
from sammpa.pipeline import make_synthetic_dataset


def stub_argv(*args):
    return [sys.executable, "-m", "sammpa.stub_backend", *args]


def stub_cmd(*args):
    return " ".join(stub_argv(*args))


def disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return BinaryMask((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)


def disk_image(h, w, cy, cx, r, fg=0.8, bg=0.2):
    m = disk(h, w, cy, cx, r).data
    return ImageTensor(np.where(m, fg, bg).astype(np.float32))


@pytest.fixture(scope="session")
def synth30(tmp_path_factory) -> Path:
    return make_synthetic_dataset(30, 7, tmp_path_factory.mktemp("synth30"))


@pytest.fixture(scope="session")
def synth6(tmp_path_factory) -> Path:
    return make_synthetic_dataset(6, 3, tmp_path_factory.mktemp("synth6"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
