import time

import pytest
import torch

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """Default toy model pretrained on the default corpus, with its wall time."""
    from repedit.knowledge import generate_corpus
    from repedit.tinylm import ModelConfig, PretrainConfig, TinyModel, pretrain

    ds = generate_corpus(0)
    start = time.perf_counter()
    model, curve = pretrain(TinyModel(ModelConfig()), ds.corpus, PretrainConfig())
    elapsed = time.perf_counter() - start
    return model.freeze(), ds, elapsed
