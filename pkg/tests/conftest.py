import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from autogeo.raster_store import GridSpec, IngestHeader, RasterStore
from autogeo.synth import default_world, gen_synthetic_world, ingest_world

settings.register_profile(
    "autogeo", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("autogeo")

GRID = GridSpec(33.0, -97.0, 1e-4)
TS = "2018-01-29T12:00:00Z"


@pytest.fixture
def grid():
    return GRID


@pytest.fixture
def store(tmp_path):
    return RasterStore(tmp_path / "store", GRID, tile_size=16)


def header_for(rows, cols, role="other", layer_id="L", timestamp=TS, grid=GRID, row0=0, col0=0):
    """Header of a raster aligned with ``grid`` whose top-left pixel is (row0, col0)."""
    lat, lon = grid.pixel_edges(row0, col0)
    return IngestHeader(lat, lon, grid.resolution, rows, cols, role, layer_id, timestamp)


def random_raster(rows, cols, seed=0):
    return np.random.default_rng(seed).normal(100, 20, (rows, cols)).astype(np.float32)


@pytest.fixture(scope="session")
def small_world():
    """A 384 x 512 default-layout world (region size 128 x 128)."""
    return gen_synthetic_world(default_world(rows=384, cols=512, seed=5))


@pytest.fixture(scope="session")
def world_store(small_world, tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    store = RasterStore(root / "store", small_world.spec.grid, tile_size=64)
    ingest_world(small_world, store)
    return store


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE = {}  # criterion number -> (title, passed, seconds, note)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, seconds, note = ACCEPTANCE[n]
        line = f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {title} ({seconds:.1f} s)"
        terminalreporter.write_line(line + (f": {note}" if note else ""))
