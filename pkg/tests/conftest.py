import pytest

from fecdiff.denoiser import DenoiserConfig, ToyDenoiser, embed_prompt
from fecdiff.schedule import build_schedule, timestep_plan


@pytest.fixture(scope="session")
def sched():
    return build_schedule("scaled-linear-beta", 1000)


@pytest.fixture(scope="session")
def net():
    return ToyDenoiser(DenoiserConfig())


@pytest.fixture(scope="session")
def plan10():
    return timestep_plan(10, 1000)


@pytest.fixture(scope="session")
def plan50():
    return timestep_plan(50, 1000)


@pytest.fixture(scope="session")
def cond():
    return embed_prompt("a photo of a cat", 0)


@pytest.fixture(scope="session")
def null():
    return embed_prompt("", 0)
