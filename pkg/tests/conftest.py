from __future__ import annotations

from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"
LITMUS = Path(__file__).resolve().parent / "litmus"


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    return CORPUS


@pytest.fixture(scope="session")
def litmus_dir() -> Path:
    return LITMUS


def read(path: Path) -> str:
    return path.read_text()
