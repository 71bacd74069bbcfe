import math

import numpy as np
import pytest

from rvdiff.codec import SENSOR_PROFILES, SensorConfig, load_palette, project_cloud
from rvdiff.synth import WorldSpec, corpus, synthesize


@pytest.fixture(scope="session")
def palette():
    return load_palette()


@pytest.fixture(scope="session")
def desk():
    return SENSOR_PROFILES["desk"]


@pytest.fixture(scope="session")
def tiny_sensor():
    return SensorConfig(8, 32, math.radians(-25.0), math.radians(3.0), 80.0)


@pytest.fixture(scope="session")
def base_world():
    return WorldSpec()


@pytest.fixture(scope="session")
def desk_projection(desk, palette, base_world):
    return project_cloud(synthesize(base_world, desk), desk, palette)


def project_corpus(worlds, sensor, palette):
    out = []
    for cloud, _ in worlds:
        p = project_cloud(cloud, sensor, palette)
        out.append((p.scene, p.semantics))
    return out


@pytest.fixture(scope="session")
def desk_corpus(desk, palette, base_world):
    """Eight jittered labeled scenes at desk resolution."""
    return project_corpus(corpus(8, base_world, 3, desk), desk, palette)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
