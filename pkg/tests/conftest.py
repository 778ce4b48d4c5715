import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memdex.model import Dataset, DeepVector, KeypointSet, SubjectRecord  # noqa: E402


def make_subject(sid, inst, grp, desc, vec=None, binary=False, rng=None):
    rng = rng or np.random.default_rng(0)
    desc = np.asarray(desc, dtype=float).reshape(-1, np.shape(desc)[-1])
    n = desc.shape[0]
    kps = KeypointSet(rng.uniform(0, 10, (n, 3)), rng.uniform(1, 2, n), desc, desc.shape[1])
    dv = None if vec is None else DeepVector(vec, is_binary=binary)
    return SubjectRecord(sid, inst, grp, kps, dv)


def random_dataset(rng, n_subjects, n_kp, d_kp, n_classes=3, d_dv=None, binary=False,
                   scale=1.0):
    subs = []
    for i in range(n_subjects):
        desc = rng.normal(scale=scale, size=(n_kp, d_kp))
        vec = None
        if d_dv is not None:
            vec = (rng.random(d_dv) < 0.5).astype(float) if binary else rng.normal(size=d_dv)
        subs.append(make_subject(f"S{i:02d}", f"C{i % n_classes}", "AB"[i % 2], desc, vec,
                                 binary, rng))
    return Dataset(tuple(subs), d_kp, d_dv)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
