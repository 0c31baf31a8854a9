import numpy as np
import pytest

from cavl.data import CorpusConfig, generate_synthetic_corpus
from cavl.model import ModelConfig, init_params
from cavl.training import Checkpoint, TrainConfig, pretrain

# small enough that a forward pass takes milliseconds
TINY_MODEL = ModelConfig(vocab_size=64, hidden=16, layers=2, heads=2, ffn_dim=32,
                         max_text_len=16, max_rois=8, roi_feature_dim=8)
TINY_CORPUS = CorpusConfig(vocab_size=64, roi_feature_dim=8, half_len=3, template_size=6,
                           n_styles=2, n_attributes=4, min_rois=2, max_rois=4)


@pytest.fixture
def tiny_cfg():
    return TINY_MODEL


@pytest.fixture
def tiny_params():
    return init_params(TINY_MODEL, seed=0)


@pytest.fixture
def tiny_corpus():
    return generate_synthetic_corpus(0, 4, 32, TINY_CORPUS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_pretrained():
    """A two-epoch checkpoint of the tiny model and the corpus it saw."""
    corpus = generate_synthetic_corpus(0, 4, 32, TINY_CORPUS)
    res = pretrain(TINY_MODEL, TrainConfig(batch_size=8, epochs=2), corpus, seed=0)
    return Checkpoint(res.params, res.optim, res.config, 0), corpus


# ------------------------------------------------------------------ acceptance report

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[report.nodeid.split("::")[-1]] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _CRITERIA[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}")
