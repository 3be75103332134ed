"""
Library walk-through on a small synthetic world.

Generates a 384 x 512 four-band world, ingests it into a tile store, trains a
random forest from a train-mode query, then classifies a square area and a
handful of points with a test-mode query. Run with ``python3 demos/quickstart.py``.
"""

import sys
import tempfile
from pathlib import Path

from autogeo.orchestrator import SplitSpec, run_inference_query, run_training_query
from autogeo.query import parse_query
from autogeo.raster_store import RasterStore
from autogeo.registry import ModelRegistry
from autogeo.synth import (
    default_world,
    emit_label_manifest,
    gen_synthetic_world,
    ingest_world,
    test_query_doc,
    train_query_doc,
)


def main(workdir):
    workdir = Path(workdir)
    spec = default_world(384, 512, seed=5)
    world = gen_synthetic_world(spec)
    store = RasterStore(workdir / "store", spec.grid)
    ingest_world(world, store)
    registry = ModelRegistry(workdir / "models")
    print(f"world {spec.rows}x{spec.cols}, classes {spec.class_names}")

    # 60 labeled points per vegetated class, 16 x 16 windows
    manifest, _ = emit_label_manifest(world, 60, window_size=16, seed=1)
    doc = train_query_doc(spec, manifest, "random_forest", "quickstart", window_size=16,
                          params={"grid": {"n_estimators": [20, 40], "max_depth": [6, 10]}})
    record, report = run_training_query(parse_query(doc), store, registry,
                                        split=SplitSpec(10, 10, 0))
    print(f"test accuracy {report.accuracy:.3f}")
    print(report.table())

    # the bare class sits in the middle of the layout and is filtered by NDVI
    cmap = run_inference_query(parse_query(test_query_doc(spec, "quickstart", (96, 96, 288, 288),
                                                          window_size=16)), store, registry)
    for row in cmap.labels():
        print(" ".join((name or "-")[:6].ljust(6) for name in row))
    (workdir / "quickstart.ppm").write_bytes(cmap.to_ppm(scale=8))

    pdoc = test_query_doc(spec, "quickstart", window_size=16)
    pdoc["spatial"] = {"type": "point",
                       "coordinates": [list(spec.grid.pixel_to_geo(r, c))
                                       for r, c in ((40, 40), (200, 200), (300, 450))]}
    for result in run_inference_query(parse_query(pdoc), store, registry):
        print(result.to_dict())
    print(f"map image written to {workdir / 'quickstart.ppm'}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="autogeo-"))
