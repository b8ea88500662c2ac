import warnings

import pytest
import torch

from citytft import dataio, synthgen

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def default_dataset_dir(tmp_path_factory):
    """The default 2-climate x 4-building synthetic dataset, written once."""
    out = tmp_path_factory.mktemp("default-data")
    synthgen.build_synth_dataset(
        synthgen.DEFAULT_CLIMATES, synthgen.DEFAULT_BUILDINGS, synthgen.DEFAULT_MANIFEST, out
    )
    return out


@pytest.fixture(scope="session")
def default_dataset(default_dataset_dir):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # default manifest has no val split
        return dataio.load_dataset(default_dataset_dir)


@pytest.fixture(scope="session")
def temperate_weather():
    return synthgen.generate_weather(synthgen.DEFAULT_CLIMATES[0])


@pytest.fixture()
def building():
    return synthgen.DEFAULT_BUILDINGS[0]
