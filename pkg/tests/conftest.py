import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _f64():
    from refvid import autodiff as ad

    ad.set_precision("f64")
    yield
    ad.set_precision("f64")


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """(config, examples, data dir) for a three-clip synthetic set."""
    from tiny import tiny_config

    from refvid.dataset import load_examples, synthesize_dataset

    cfg = tiny_config()
    d = tmp_path_factory.mktemp("tiny_data")
    synthesize_dataset(d, cfg.data, cfg.model)
    return cfg, load_examples(d, cfg.model), d


_criteria: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, [title, True, ""])
    if rep.failed:
        entry[1] = False
    if rep.when == "call":
        entry[2] = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        if rep.skipped:
            entry[1] = None


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, detail = _criteria[n]
        verdict = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
