import numpy as np
import pytest
import torch

from mp3restore import dataset
from mp3restore.codec import CodecConfig, CodecError


def _codec():
    try:
        return CodecConfig.resolve()
    except CodecError:
        return None


CODEC = _codec()
needs_codec = pytest.mark.skipif(CODEC is None, reason="no MP3 encoder/decoder available")


@pytest.fixture(scope="session")
def codec():
    if CODEC is None:
        pytest.skip("no MP3 encoder/decoder available")
    return CODEC


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    dataset.make_fixture_corpus(root, n_songs=6, seconds=8.0, seed=0)
    return root


@pytest.fixture(scope="session")
def prepared(fixture_corpus, tmp_path_factory, codec):
    out = tmp_path_factory.mktemp("prepared")
    return dataset.prepare_corpus(fixture_corpus, out, seed=0, codec=codec)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def random_signal(seed, n):
    return np.random.default_rng(seed).standard_normal(n)


# --- acceptance summary ------------------------------------------------------

_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        measured = dict(item.user_properties).get("measured", "")
        status = {"passed": "PASS", "failed": "FAIL"}.get(rep.outcome, "SKIP")
        _ACCEPTANCE.append((mark.args[0], status, mark.args[1], measured))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, status, title, measured in sorted(_ACCEPTANCE):
        line = f"AC{number:<3d}{status}  {title}"
        terminalreporter.write_line(line + (f"  [{measured}]" if measured else ""))
