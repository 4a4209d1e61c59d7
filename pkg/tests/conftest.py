import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nametune.core import ClassEntry, SeededRng  # noqa: E402
from nametune.encoder import LinearEncoder, ToyTransformerEncoder  # noqa: E402
from nametune.manifest import Manifest  # noqa: E402
from nametune.protocol import DatasetSplit  # noqa: E402
from nametune.toydata import make_toy_dataset  # noqa: E402

ACCEPTANCE_LINES: list[str] = []

NAMES = ["pour water", "open fridge", "wipe table", "fold towel", "chop onion", "stir soup", "open window"]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(capsys):
    """``criterion(no, text, ok)`` prints one pass/fail line and asserts."""

    def check(no: int, text: str, ok: bool):
        line = f"criterion {no:2d}: {'PASS' if ok else 'FAIL'}  {text}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return check


@pytest.fixture(scope="session")
def toy_enc():
    return ToyTransformerEncoder(seed=0)


@pytest.fixture(scope="session")
def lin_enc():
    return LinearEncoder(seed=0)


def make_classes(enc, n: int, names=NAMES):
    return [ClassEntry(i, names[i], enc.tokenize(names[i])) for i in range(n)]


def random_examples(enc, n_items: int, n_classes: int, seed: int):
    rng = SeededRng(seed)
    feats = rng.normal((n_items, enc.space.d_embed)).astype(np.float64)
    labels = np.arange(n_items) % n_classes
    return feats, labels


@pytest.fixture(scope="session")
def toy_traditional():
    return make_toy_dataset("traditional")


@pytest.fixture(scope="session")
def toy_meta():
    return make_toy_dataset("meta_learning")


def split_of(ds, enc):
    m = Manifest(ds.rows)
    return DatasetSplit.from_manifest(m, ds.features(enc), m.classes(enc.tokenize))


@pytest.fixture(scope="session")
def traditional_split(toy_traditional, toy_enc):
    return split_of(toy_traditional, toy_enc)


@pytest.fixture(scope="session")
def meta_split(toy_meta, toy_enc):
    return split_of(toy_meta, toy_enc)
