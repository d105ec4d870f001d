import numpy as np
import pytest

from vdpg import model as M
from vdpg.data import EmbeddingDataset, SyntheticConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(rng, n=20, l=2, d=3, domains=(0, 1), k=4, task="classification"):
    dom = rng.choice(domains, size=n)
    if task == "classification":
        labels = rng.integers(-1, k, size=n)
    else:
        labels = rng.normal(size=n)
        k = 0
    return EmbeddingDataset(rng.normal(size=(n, l, d)), dom, labels, task, k)


@pytest.fixture(scope="session")
def small_bench():
    cfg = SyntheticConfig(d=8, l=4, num_classes=3, num_source_domains=3, num_target_domains=2,
                          samples_per_domain=60, domain_shift_rank=2, seed=7)
    return synth_generate(cfg)


@pytest.fixture(scope="session")
def toy_cfg():
    return M.ModelConfig(d=8, Z=3, num_heads=2, num_classes=3)


@pytest.fixture(scope="session")
def toy_params(toy_cfg):
    return M.init_params(toy_cfg, seed=0)


_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    label = marker.args[0]
    detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
    if report.when == "call" or label not in _ACCEPTANCE:
        _ACCEPTANCE[label] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, (status, detail) in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))
