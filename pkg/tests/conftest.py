import numpy as np
import pytest

from ltmlebench.data_model import NodeSchema, ObservedDataset
from ltmlebench.presets import SCHEMA, confounded_dgp
from ltmlebench.simulation import simulate_dataset


def wide(schema: NodeSchema, **cols):
    """Build a dataset from column-name keyword arrays; unspecified columns are 0."""
    n = len(next(iter(cols.values())))
    v = np.zeros((n, len(schema.columns)), dtype=np.int64)
    for name, vals in cols.items():
        v[:, schema.index[name]] = vals
    return ObservedDataset(schema, v)


@pytest.fixture(scope="session")
def small_schema():
    # W, L; A; Y/D/C with two exposure decisions
    return NodeSchema(baseline_nodes=("W",), covariate_nodes=("L",), exposure_nodes=("A",),
                      intervals=3)


@pytest.fixture(scope="session")
def confounded_data():
    return simulate_dataset(confounded_dgp(), 3000, 123)


@pytest.fixture(scope="session")
def preset_schema():
    return SCHEMA
