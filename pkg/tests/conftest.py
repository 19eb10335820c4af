import csv
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from albumdate.catalog import MANIFEST_FIELDS  # noqa: E402

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_manifest(path: Path, rows, header=MANIFEST_FIELDS) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def row(pid, year=1950, context="Work", image=None):
    return [pid, image or f"{pid}.png", year, context, "", "", ""]


@pytest.fixture
def manifest_factory(tmp_path):
    def make(rows, name="manifest.csv", header=MANIFEST_FIELDS):
        return write_manifest(tmp_path / name, rows, header)

    return make


@pytest.fixture
def rgb_image():
    rng = np.random.default_rng(0)
    return Image.fromarray(rng.integers(0, 255, size=(48, 64, 3), dtype=np.uint8))
