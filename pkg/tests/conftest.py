import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dhpose.camera import default_camera
from dhpose.constraints import default_constraint_table
from dhpose.features import adjacent_bone_pairs
from dhpose.skeleton import default_topology


@pytest.fixture(scope="session")
def topology():
    return default_topology()


@pytest.fixture(scope="session")
def table():
    return default_constraint_table()


@pytest.fixture(scope="session")
def camera():
    return default_camera()


@pytest.fixture(scope="session")
def pairs(topology):
    return adjacent_bone_pairs(topology)
