from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from mlsm.data import DatasetIndex


def write_class_dirs(root: Path, n_classes: int, per_class: int, size: int = 16, seed: int = 0):
    """Solid-colour images, one directory per class."""
    rng = np.random.default_rng(seed)
    for c in range(n_classes):
        cdir = root / f"c{c:03d}"
        cdir.mkdir(parents=True, exist_ok=True)
        color = rng.integers(0, 256, size=3)
        for i in range(per_class):
            arr = np.broadcast_to(color, (size, size, 3)).astype(np.uint8)
            Image.fromarray(arr).save(cdir / f"{i:03d}.png")
    return root


def synthetic_index(n_classes=20, per_class=60, split="novel"):
    """In-memory index over fake paths; good enough for sampling-only checks."""
    entries = [(f"c{c:03d}/{i:03d}.png", c) for c in range(n_classes) for i in range(per_class)]
    return DatasetIndex(
        root=Path("/nonexistent"),
        entries=entries,
        split_assignment={c: split for c in range(n_classes)},
        class_names=[f"c{c:03d}" for c in range(n_classes)],
    )


@pytest.fixture
def small_root(tmp_path):
    return write_class_dirs(tmp_path / "ds", 20, 6)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


# one PASS/FAIL line per acceptance criterion, printed after the run
_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    criterion = getattr(item.function, "criterion", None)
    if criterion and (report.when == "call" or (report.when == "setup" and report.failed)):
        _ACCEPTANCE.append((criterion, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")
