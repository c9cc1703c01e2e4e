from __future__ import annotations

import pytest

from agentmod.dataset import HATEFUL_MEMES, MMHS150K, ImageStore, Sample
from agentmod.runner import ToolContext
from agentmod.synthetic import make_corpus
from agentmod.tools import FixtureToolBackend, ToolCache, ToolRegistry


@pytest.fixture
def space():
    return HATEFUL_MEMES


@pytest.fixture
def mmhs_space():
    return MMHS150K


@pytest.fixture
def sample():
    return Sample("s1", "images/s1.bin", "look at this", "hateful")


@pytest.fixture
def corpus(tmp_path):
    return make_corpus(tmp_path / "corpus", 12, seed=3, dataset_name="hateful_memes")


@pytest.fixture
def tool_backend(corpus):
    return FixtureToolBackend(corpus.tool_table, name="fixture:tools.json")


@pytest.fixture
def tools(tool_backend):
    return ToolContext(ToolRegistry.single(tool_backend), ToolCache())


@pytest.fixture
def images(corpus):
    return ImageStore(corpus.root)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
