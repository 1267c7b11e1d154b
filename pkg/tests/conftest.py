from __future__ import annotations

import numpy as np
import pytest

from aranet import phantom

_ACCEPTANCE: list[str] = []


def record_acceptance(criterion: int, title: str, ok: bool, detail: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {title} :: {detail}"
    _ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def make_samples(n: int, grid=(2, 32, 32), base_seed: int = 0) -> list[phantom.Sample]:
    out = []
    for i in range(n):
        ct, masks, dose = phantom.generate(phantom.jittered_spec(base_seed + i, grid=grid))
        out.append(phantom.Sample(f"s{i:03d}", "train", ct, masks, dose))
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    phantom.make_dataset(4, 3, root, split=(2, 1, 1), grid=(2, 32, 32))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
