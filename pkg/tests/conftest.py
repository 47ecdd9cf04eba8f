from pathlib import Path

import numpy as np
import pytest

from domainshift.data import PatchDataset, PatchRecord, write_image, write_manifest


def lcm_quantile_oracle(a, b):
    """W1 by expanding both sorted samples to a common length lcm(n, m):
    repeating each order statistic equally often makes the quantile
    coupling an elementwise pairing."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    n, m = len(a), len(b)
    L = np.lcm(n, m)
    return float(np.mean(np.abs(np.repeat(a, L // n) - np.repeat(b, L // m))))


@pytest.fixture
def make_dataset(tmp_path):
    """Build a small on-disk dataset from a list of (image, label, slide)."""

    def _make(items, domain="d0", name="toy", subdir="toy"):
        root = tmp_path / subdir
        (root / "img").mkdir(parents=True, exist_ok=True)
        records = []
        for k, (image, label, slide) in enumerate(items):
            rel = f"img/{k:04d}.png"
            write_image(root / rel, image)
            records.append(PatchRecord(rel, label, slide, domain))
        ds = PatchDataset(root.resolve(), records, name)
        write_manifest(ds, root / "manifest.csv")
        return ds

    return _make


_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = (ok, detail)
    print(f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
