import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_prepared(tmp_path_factory):
    """24 prepared 64x64 phantom pairs (all splits)."""
    from cfpct.data import prepare_dataset
    from cfpct.phantom import DegradationRanges, PhantomSpec, make_dataset

    root = tmp_path_factory.mktemp("small")
    m = make_dataset(24, PhantomSpec(), DegradationRanges(), root / "dataset", 7)
    prepare_dataset(m, root / "prepared", 64)
    return root / "prepared"


@pytest.fixture(scope="session")
def desk_fae_config():
    from cfpct.fae import FaeConfig

    return FaeConfig(input_size=64, width_multiplier=0.25, blocks_per_stage=(1, 1, 3, 1), residual_layers=6)


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
