import numpy as np
import pytest

from carnet.data import write_image, write_split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(root, n=3, size=(16, 16), seed=0, test_ids=1):
    """Tiny dataset in the standard layout with random images and masks."""
    r = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = [f"s{i:02d}" for i in range(n)]
    for sid in ids:
        write_image(root / "images" / f"{sid}.png", r.integers(0, 256, size + (3,), dtype=np.uint8))
        write_image(root / "masks" / f"{sid}.png", (r.random(size) < 0.2).astype(np.uint8) * 255)
    write_split(root, "train", ids[test_ids:])
    write_split(root, "test", ids[:test_ids])
    return ids


@pytest.fixture
def tiny_dataset(tmp_path):
    root = tmp_path / "ds"
    make_dataset(root)
    return root


# acceptance verdicts, printed as one line per criterion at the end of the session
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
