"""Shared fixtures: a small synthetic dataset and a trained classifier.

Session-scoped because training even the small model costs a few seconds;
tests must not mutate fixture objects in place.
"""

import numpy as np
import pytest

from respsnn import convert, features, mapping, nn, synth, trainer


@pytest.fixture(scope="session")
def small_rf():
    return synth.RfConfig(seed=1)


@pytest.fixture(scope="session")
def small_script():
    return synth.default_script(total_duration_s=300)


@pytest.fixture(scope="session")
def small_stream(small_script, small_rf):
    return synth.synthesize(small_script, small_rf)


@pytest.fixture(scope="session")
def small_windows(small_stream, small_script, small_rf):
    return features.windowize(small_stream, small_script, small_rf)


@pytest.fixture(scope="session")
def small_dataset(small_windows):
    return features.split(small_windows, seed=0)


@pytest.fixture(scope="session")
def trained_model(small_dataset):
    model = nn.build_default_model(seed=3)
    trainer.train(model, small_dataset.train,
                  trainer.Hyperparameters(max_epochs=8), seed=0)
    return model


@pytest.fixture(scope="session")
def calibration(small_dataset):
    x, _ = trainer.windows_to_arrays(small_dataset.train[:100])
    return x


@pytest.fixture(scope="session")
def small_snn(trained_model, calibration):
    net = convert.convert(trained_model)
    return convert.normalize_weights(net, calibration)


@pytest.fixture(scope="session")
def small_mapping(small_snn):
    grid = mapping.TileGrid()
    clusters = mapping.partition(small_snn, grid)
    traffic = mapping.cluster_traffic(small_snn, clusters)
    return grid, mapping.place(clusters, grid, traffic)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
