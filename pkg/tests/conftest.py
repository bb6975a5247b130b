import os

import pytest
import torch

from lesionbench.core import RunConfig
from lesionbench.datasets import concat_manifests, synth_fixture

torch.set_num_threads(int(os.environ.get("LESIONBENCH_TEST_THREADS", "1")))

SLIM_WIDTHS = (64, 128, 256, 512)
TINY_WIDTHS = (16, 32, 64, 128)
TINY_BLOCKS = (1, 1, 1, 1)


def tiny_config(arch="UNet", epochs=2, **kw) -> RunConfig:
    opts = dict(architecture=arch, epochs=epochs, input_size=(64, 64), batch_size=4, seed=0,
                backbone_widths=TINY_WIDTHS, backbone_blocks=TINY_BLOCKS, waive_audit=True)
    opts.update(kw)
    return RunConfig(**opts)


@pytest.fixture
def fixture4(tmp_path):
    """The 4-scan synthetic training fixture at 64 x 64."""
    return synth_fixture(tmp_path / "fx", 4, (64, 64), seed=0)


@pytest.fixture
def healthy_set(tmp_path):
    return synth_fixture(tmp_path / "healthy", 3, (64, 64), seed=3, healthy=True, prefix="h")


def two_group_manifest(root, n_train=2, n_test=1):
    """Groups D (DukeI) and Z (Zhang), each with train and test scans."""
    parts = []
    for k, (ds, tag) in enumerate((("DukeI", "d"), ("Zhang", "z"))):
        parts.append(synth_fixture(root / f"{tag}-train", n_train, (64, 64), seed=10 + k, dataset_id=ds,
                                   split="train", prefix=f"{tag}tr", first_class=k))
        parts.append(synth_fixture(root / f"{tag}-test", n_test, (64, 64), seed=20 + k, dataset_id=ds,
                                   split="test", prefix=f"{tag}te", first_class=k + 2))
    return concat_manifests(parts)


# ---------------------------------------------------------------------------
# One summary line per acceptance criterion
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}
# Wall-clock budget in seconds for all tests of a criterion together.
BUDGETS = {1: 10.0, 4: 300.0}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test belongs to")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo is not None):
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": True, "tests": 0, "seconds": 0.0})
    entry["tests"] += 1
    entry["seconds"] += call.duration
    if call.excinfo is not None:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["passed"] and not _over_budget(n) else "FAIL"
        budget = f", budget {BUDGETS[n]:.0f} s" if n in BUDGETS else ""
        terminalreporter.write_line(
            f"criterion {n}: {status}  {e['title']} ({e['tests']} test(s), {e['seconds']:.1f} s{budget})")


def _over_budget(n) -> bool:
    return n in BUDGETS and _CRITERIA[n]["seconds"] > BUDGETS[n]


def pytest_sessionfinish(session, exitstatus):
    if exitstatus == 0 and any(_over_budget(n) for n in _CRITERIA):
        session.exitstatus = 1
