"""Session-scoped fixtures shared across the suite.

The lattice models, set-point tables, feedforward table, and tuned
weight regions are expensive to build (seconds each), deterministic
for a fixed seed, and read-only once constructed, so one instance
serves every test that needs them.
"""
import warnings

import pytest

from airpath.config import ToolkitConfig
from airpath.lpv import ModelVariant
from airpath.plant import AirpathPlant, OperatingPoint
from airpath.sysid import build_lpv_variant
from airpath.tables import SetpointTables, build_ff_table
from airpath.tuning import assign_regions, tune_regions


@pytest.fixture(scope="session")
def toolkit_config():
    return ToolkitConfig()


@pytest.fixture(scope="session")
def plant(toolkit_config):
    return AirpathPlant(toolkit_config.plant)


@pytest.fixture(scope="session")
def grid_points(toolkit_config):
    g = toolkit_config.grid
    return [OperatingPoint(s, f) for s in g.speed_axis for f in g.fuel_axis]


@pytest.fixture(scope="session")
def setpoints(plant, toolkit_config):
    return SetpointTables.from_plant(plant, toolkit_config.grid,
                                     toolkit_config.mpc)


@pytest.fixture(scope="session")
def ff_table(plant, setpoints, toolkit_config):
    return build_ff_table(plant, setpoints, toolkit_config.grid,
                          toolkit_config.harness)


@pytest.fixture(scope="session")
def model_a(grid_points, toolkit_config):
    return build_lpv_variant(ModelVariant.A, grid_points, toolkit_config,
                             seed=0)


@pytest.fixture(scope="session")
def model_b(grid_points, toolkit_config):
    return build_lpv_variant(ModelVariant.B, grid_points, toolkit_config,
                             seed=0)


@pytest.fixture(scope="session")
def model_c(grid_points, toolkit_config):
    return build_lpv_variant(ModelVariant.C, grid_points, toolkit_config,
                             seed=0)


@pytest.fixture(scope="session")
def region_map(grid_points, setpoints):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return assign_regions(grid_points, setpoints)


@pytest.fixture(scope="session")
def tuning_trace_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("tuning_traces")


@pytest.fixture(scope="session")
def tuned_regions(plant, model_b, region_map, setpoints, ff_table,
                  tuning_trace_dir):
    return tune_regions(plant, model_b, region_map, setpoints=setpoints,
                        ff_table=ff_table, trace_dir=tuning_trace_dir)
