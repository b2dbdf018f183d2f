import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from triseg.data import CaseBundle, LabelVolume, ModalityVolume  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_case(rng, shape=(24, 20, 22), with_labels=True, case_id="CASE_000"):
    volumes = {}
    for mod in ("T1ce", "T2", "FLAIR"):
        v = rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
        volumes[mod] = ModalityVolume(v, mod)
    labels = None
    if with_labels:
        labels = LabelVolume(rng.integers(0, 4, size=shape).astype(np.int16))
    return CaseBundle(case_id=case_id, volumes=volumes, labels=labels)


@pytest.fixture
def small_case(rng):
    return random_case(rng)
