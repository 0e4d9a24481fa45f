from pathlib import Path

import pytest

from imagegen import write_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> tuple[Path, Path]:
    return write_corpus(tmp_path_factory.mktemp("imgs"), 6, 6, seed=1)
