import numpy as np
import pytest
import torch

from dtn.data import DatasetSplit, Domain, write_cache
from dtn.networks import FeatureNetwork
from dtn.training import TrainingConfig

TINY = dict(f_widths=(8, 8, 8, 16), g_widths=(16, 8, 8, 8), d_widths=(8, 8, 8, 8))


def synthetic_split(n, channels, seed, name="synthetic", domain=Domain.SOURCE, labeled=True):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 32, 32, channels), dtype=np.uint8)
    labels = np.arange(n) % 10 if labeled else None
    return DatasetSplit(images, labels, name=name, domain=domain)


@pytest.fixture
def source_split():
    return synthetic_split(96, 3, seed=1, name="s")


@pytest.fixture
def target_split():
    return synthetic_split(96, 1, seed=2, name="t", domain=Domain.TARGET)


@pytest.fixture
def tiny_f():
    torch.manual_seed(0)
    return FeatureNetwork(TINY["f_widths"]).eval()


@pytest.fixture
def tiny_config():
    return TrainingConfig(batch_size=8, total_steps=4, checkpoint_every=2, **TINY)


@pytest.fixture
def synthetic_cache(tmp_path):
    """A pre-populated dataset cache holding small random stand-ins for
    every split the experiments touch."""
    cache = tmp_path / "cache"
    rng = np.random.default_rng(0)
    for dataset, split, n, c in [
        ("svhn", "extra", 120, 3),
        ("svhn", "test", 40, 3),
        ("mnist", "train", 120, 1),
        ("mnist", "test", 60, 1),
    ]:
        write_cache(cache, dataset, split, rng.integers(0, 256, (n, 32, 32, c), dtype=np.uint8),
                    np.arange(n) % 10, urls=[f"synthetic://{dataset}/{split}"])
    return cache


TINY_CONFIG_TEXT = """\
# small enough to train in seconds on a CPU
run.task = dtn
data.desk_scale_n = 64
train.batch_size = 8
train.total_steps = 6
train.checkpoint_every = 3
pretrain.total_steps = 3
pretrain.batch_size = 16
pretrain.desk_scale_n = none
classifier.total_steps = 3
classifier.batch_size = 16
model.f_widths = 8,8,8,16
model.g_widths = 16,8,8,8
model.d_widths = 8,8,8,8
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT)
    return path


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    results = item.config.stash[_ACCEPTANCE]
    key = marker.kwargs["criterion"]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or key not in results:
        reason = ""
        if report.failed:
            reason = str(report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash")
                         else report.longrepr).splitlines()[0][:160]
        results[key] = ("FAIL" if failed else "PASS", marker.kwargs["title"], reason)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        verdict, title, reason = results[key]
        line = f"criterion {key}: {verdict}  {title}"
        terminalreporter.write_line(line + (f"  ({reason})" if reason else ""))
