import numpy as np
import pytest
import torch

from lesionseg.model import EncoderConfig
from lesionseg.volume import PhantomSpec, generate_phantom, preprocess

TINY = EncoderConfig(img_size=16, n_stages=2, heads_per_stage=[3, 6], depths_per_stage=[2, 2])


def tiny_phantom(seed, labeled=True):
    spec = PhantomSpec(extent=(24, 24, 24), n_lesions=(2, 3), lesion_radius=(1.5, 2.5), seed=seed, labeled=labeled)
    return preprocess(generate_phantom(spec, f"p{seed:03d}"))


@pytest.fixture(scope="session")
def tiny_corpus():
    return [tiny_phantom(i) for i in range(8)]


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance lines recorded by test_acceptance.py, echoed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
