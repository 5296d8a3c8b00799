import os
from pathlib import Path

import numpy as np
import pytest

from dqlids.data import EncodedDataset, NormalizationStats

PROTOCOLS = ["tcp", "udp", "icmp"]
SERVICES = ["http", "ftp_data", "smtp", "private", "domain_u", "ecr_i"]
FLAGS = ["SF", "S0", "REJ", "RSTO"]


def kdd_line(rng, label="normal", difficulty=True, src_bytes=None):
    """One synthetic row in KDDTrain+ layout (values are random, not real traffic)."""
    values = []
    for i in range(41):
        if i == 1:
            values.append(PROTOCOLS[rng.integers(len(PROTOCOLS))])
        elif i == 2:
            values.append(SERVICES[rng.integers(len(SERVICES))])
        elif i == 3:
            values.append(FLAGS[rng.integers(len(FLAGS))])
        elif i == 4 and src_bytes is not None:
            values.append(str(src_bytes))
        elif i == 19:
            values.append("0")  # num_outbound_cmds is constant in NSL-KDD
        elif i >= 24:
            values.append(f"{rng.random():.2f}")
        else:
            values.append(str(int(rng.integers(0, 1000))))
    values.append(label)
    if difficulty:
        values.append(str(int(rng.integers(1, 22))))
    return ",".join(values)


def separable_dataset(n=1000, width=41, seed=0, margin=0.05):
    """Linearly separable two-class dataset (labels 0 and 1) in [0, 1]^width."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=width)
    rows = []
    while sum(len(r) for r in rows) < n:
        x = rng.random((n, width))
        s = (x - 0.5) @ w / np.linalg.norm(w)
        rows.append(x[np.abs(s) > margin])
    x = np.vstack(rows)[:n]
    y = ((x - 0.5) @ w > 0).astype(np.int64)
    stats = NormalizationStats((0.0,) * width, (1.0,) * width, {})
    return EncodedDataset(x, y, stats)


@pytest.fixture
def kdd_rng():
    return np.random.default_rng(1234)


def nslkdd_files():
    """Paths to KDDTrain+.txt / KDDTest+.txt, or None when unavailable."""
    candidates = [os.environ.get("NSLKDD_DIR"), Path(__file__).resolve().parents[1] / "data"]
    for d in candidates:
        if not d:
            continue
        train, test = Path(d) / "KDDTrain+.txt", Path(d) / "KDDTest+.txt"
        if train.is_file() and test.is_file():
            return train, test
    return None


def require_nslkdd():
    files = nslkdd_files()
    if files is None:
        pytest.fail(
            "NSL-KDD files not found: set NSLKDD_DIR to a directory holding KDDTrain+.txt and KDDTest+.txt"
        )
    return files


# acceptance criterion number -> (title, passed, detail)
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        line = f"[{'PASS' if passed else 'FAIL'}] {number}. {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
