import numpy as np
import pytest
import torch

from for_ovir.config import RunConfig, apply_overrides

TINY = {
    "data.n_images": 40, "data.n_eval_images": 20, "data.n_base": 6, "data.n_novel": 3,
    "data.n_distractor": 10, "data.n_tokens": 16, "data.feature_dim": 16, "data.query_dim": 16,
    "data.value_dim": 16, "data.embed_dim": 8, "data.background_kinds": 4,
    "data.object_tokens_min": 2, "data.object_tokens_max": 4,
    "head.n_queries": 5, "head.decoder_heads": 4, "cluster.n_clusters": 4,
    "pseudo.temperature": 0.01, "pseudo.threshold": 0.1,
    "train.epochs": 3, "train.lr_drop_epoch": 2, "train.batch_size": 8, "train.lr": 1e-3,
}

_ACCEPTANCE_LINES: list[str] = []


def tiny_config(**extra) -> RunConfig:
    over = dict(TINY)
    over.update(extra)
    return apply_overrides(RunConfig(), over).validate()


def tiny_config_text(**extra) -> str:
    return tiny_config(**extra).to_text()


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
