import numpy as np
import pytest

from convrec.recommender import Model, TrainConfig, build_artifacts
from convrec.synthetic import toy_instance, write_inputs


@pytest.fixture(scope="session")
def toy_data():
    return toy_instance()


@pytest.fixture(scope="session")
def toy_artifacts(toy_data):
    return build_artifacts(toy_data.conversations, toy_data.vocab,
                           toy_data.kg, toy_data.word_graph)


@pytest.fixture()
def toy_model(toy_artifacts):
    return Model(toy_artifacts, TrainConfig(dim=8, seed=0))


@pytest.fixture(scope="session")
def toy_input_dir(tmp_path_factory, toy_data):
    path = tmp_path_factory.mktemp("toy_inputs")
    write_inputs(toy_data, path)
    return path


def pytest_terminal_summary(terminalreporter):
    """Echo acceptance verdict lines after the test run."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)


def sample_coords(store, n, seed=0):
    """n (name, flat index) pairs covering every parameter at least once."""
    rng = np.random.default_rng(seed)
    names = store.names()
    assert n >= len(names)
    coords = [(name, int(rng.integers(0, store[name].values.size))) for name in names]
    while len(coords) < n:
        name = names[int(rng.integers(0, len(names)))]
        pick = (name, int(rng.integers(0, store[name].values.size)))
        if pick not in coords:
            coords.append(pick)
    return coords
