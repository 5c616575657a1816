import re

import numpy as np
import pytest
import torch

from mvseg import phantom


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def anatomy():
    return phantom.sample_anatomy(0)


@pytest.fixture(scope="session")
def subject(anatomy):
    return phantom.generate_subject(anatomy, None, 0, "subj_test")


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "d"
    return phantom.generate_dataset(8, 3, root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or rep.when not in ("call", "setup"):
                continue
            status = "PASS" if outcome == "passed" else "FAIL"
            num, tag = re.match(r"(\d+)(.*)", props["criterion"]).groups()
            line = f"criterion {props['criterion']:<3} {status}  {props.get('summary', '')}"
            lines.append(((int(num), tag), line))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
