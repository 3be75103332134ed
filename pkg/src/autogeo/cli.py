"""
Command-line entry point ``autogeo``.

    autogeo ingest --header H --data D
    autogeo train  --query Q.json [--seed S] [--manifest M.json]
    autogeo infer  --query Q.json --out map.json [--ppm map.ppm]
    autogeo eval   --model ID --manifest M.json
    autogeo serve  --addr HOST:PORT --store PATH
    autogeo synth  --spec world.json --out DIR
    autogeo bench  --spec world.json --out DIR

Global options (``--config``, ``--store``, ``--registry``) may be given
before or after the sub-command; ``--workers`` goes before it. Reports are printed as JSON on stdout and
contain no timing, so identical inputs give identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import Settings, load_settings
from .errors import AutogeoError
from .manifest import load_manifest, query_from_manifest, write_manifest
from .maps import ClassificationMap
from .orchestrator import SplitSpec, run_evaluation, run_inference_query, run_training_query
from .query import FilterSpec, Temporal, parse_duration, parse_query
from .raster_store import GridSpec, RasterStore, format_timestamp, read_bsq
from .registry import ModelRegistry

log = logging.getLogger("autogeo")


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def _open_store(settings: Settings, create_from=None) -> RasterStore:
    root = Path(settings.store)
    if (root / "store.json").exists():
        return RasterStore(root)
    grid = settings.grid_spec or create_from
    return RasterStore(root, grid, settings.tile_size)


def _load_query(path, settings: Settings):
    spec = parse_query(Path(path).read_bytes())
    if spec.temporal.search_window is None:
        spec = replace(spec, temporal=Temporal(spec.temporal.snapshot,
                                               parse_duration(settings.search_window)))
    return spec


def cmd_ingest(args, settings):
    header, pixels = read_bsq(args.header, args.data)
    grid = GridSpec(header.origin_lat, header.origin_lon, header.resolution)
    store = _open_store(settings, create_from=grid)
    rec = store.ingest_raster(header, pixels, overwrite=args.overwrite)
    sys.stdout.write(_dump({
        "layer_id": rec.layer_id,
        "timestamp": format_timestamp(rec.timestamp),
        "tiles": rec.tile_count,
        "coverage": rec.coverage.to_list(),
    }))
    return 0


def cmd_train(args, settings):
    spec = _load_query(args.query, settings)
    classes = None
    if args.manifest:
        manifest = load_manifest(args.manifest)
        spec = query_from_manifest(spec, manifest)
        classes = manifest.classes
    split = SplitSpec(settings.validation, settings.test)
    store = _open_store(settings)
    registry = ModelRegistry(settings.registry_path)
    record, report = run_training_query(spec, store, registry, workers=settings.workers,
                                        overwrite=args.overwrite, seed=args.seed, split=split,
                                        classes=classes)
    text = _dump(report.to_dict())
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    log.info("model %s: test accuracy %.4f", record.id, report.accuracy)
    return 0


def cmd_infer(args, settings):
    spec = _load_query(args.query, settings)
    store = _open_store(settings)
    registry = ModelRegistry(settings.registry_path)
    override = FilterSpec() if args.no_filter else None
    result = run_inference_query(spec, store, registry, workers=settings.workers,
                                 filter_override=override)
    if isinstance(result, ClassificationMap):
        text = result.to_json()
        if args.ppm:
            Path(args.ppm).write_bytes(result.to_ppm(args.scale))
    else:
        if args.ppm:
            raise ValueError("--ppm needs an area (square) query")
        text = _dump({"results": [r.to_dict() for r in result]})
    Path(args.out).write_text(text, encoding="utf-8")
    if args.print:
        sys.stdout.write(text)
    return 0


def cmd_eval(args, settings):
    store = _open_store(settings)
    registry = ModelRegistry(settings.registry_path)
    report = run_evaluation(args.model, load_manifest(args.manifest), store, registry,
                            workers=settings.workers)
    text = _dump(report.to_dict())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    sys.stderr.write(report.table() + "\n")
    return 0


def cmd_serve(args, settings):
    from .service import serve

    host, _, port = args.addr.rpartition(":")
    store = _open_store(settings)
    registry = ModelRegistry(settings.registry_path)
    serve(store, registry, settings, host or "127.0.0.1", int(port))
    return 0


def _synth_doc(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "world" not in doc:
        doc = {"world": doc}
    return doc


def cmd_synth(args, settings):
    from .synth import (
        WorldSpec,
        emit_label_manifest,
        gen_synthetic_world,
        test_query_doc,
        train_query_doc,
        write_world,
    )

    doc = _synth_doc(args.spec)
    spec = WorldSpec.from_dict(doc["world"])
    out = Path(args.out)
    world = gen_synthetic_world(spec)
    pairs = write_world(world, out)
    mopts = dict(doc.get("manifest", {}))
    k = mopts.pop("window_size", 32)
    per_class = mopts.pop("per_class", 300)
    manifest, stats = emit_label_manifest(world, per_class, window_size=k, **mopts)
    write_manifest(manifest, out / "manifest.json")
    queries = {}
    for arch, params in doc.get("train", {"random_forest": {}}).items():
        name = f"train_{arch}.json"
        qdoc = train_query_doc(spec, manifest, arch, f"synth_{arch}", window_size=k,
                               filters=doc.get("filters"), params=params)
        (out / name).write_text(_dump(qdoc), encoding="utf-8")
        (out / f"infer_{arch}.json").write_text(
            _dump(test_query_doc(spec, f"synth_{arch}", window_size=k)), encoding="utf-8")
        queries[arch] = name
    sys.stdout.write(_dump({
        "bands": [str(h) for h, _ in pairs],
        "manifest": str(out / "manifest.json"),
        "n_points": stats.n_points,
        "wrong_region_fraction": stats.wrong_fraction,
        "train_queries": queries,
    }))
    return 0


def cmd_bench(args, settings):
    from .query import FeatureSpec
    from .synth import BenchmarkConfig, WorldSpec, run_benchmark

    doc = _synth_doc(args.spec)
    spec = WorldSpec.from_dict(doc["world"])
    opts = dict(doc.get("benchmark", {}))
    if "features" in opts:
        opts["features"] = FeatureSpec.from_dict(opts["features"])
    if "architectures" in opts:
        opts["architectures"] = tuple(opts["architectures"])
    config = BenchmarkConfig(**opts, workers=settings.workers)
    report = run_benchmark(spec, config, args.out)
    sys.stdout.write((Path(args.out) / "report.txt").read_text(encoding="utf-8"))
    for arch, entry in report["models"].items():
        sys.stdout.write(f"{arch}: map accuracy {entry['map']['accuracy']}, "
                         f"bare tiles None {entry['map']['bare_none']}/{entry['map']['bare']}\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="autogeo", description="Automated ML on geospatial rasters.")
    p.add_argument("--config", help="JSON settings file")
    p.add_argument("--store", help="raster store directory")
    p.add_argument("--registry", help="model registry directory (default: <store>/../models)")
    p.add_argument("--workers", type=int, help="patch assembly threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    # also accepted after the sub-command; SUPPRESS keeps the global value when absent
    common.add_argument("--store", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--registry", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)

    s = sub.add_parser("ingest", parents=[common], help="ingest a BSQ-F32 raster")
    s.add_argument("--header", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common], help="run a train-mode query")
    s.add_argument("--query", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--manifest", help="label manifest filling the query's points and labels")
    s.add_argument("--overwrite", action="store_true", help="replace (and archive) an existing model")
    s.add_argument("--report", help="also write the report JSON here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="run a test-mode query")
    s.add_argument("--query", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ppm", help="write the map as a binary PPM image")
    s.add_argument("--scale", type=int, default=1, help="PPM pixels per tile")
    s.add_argument("--no-filter", action="store_true", help="ignore the model's quality filter")
    s.add_argument("--print", action="store_true", help="echo the result to stdout")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score a model against a labeled manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", parents=[common], help="start the HTTP service")
    s.add_argument("--addr", default="127.0.0.1:8080")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("synth", parents=[common], 
                       help="generate a synthetic world, manifest and queries")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bench", parents=[common], help="run the synthetic end-to-end benchmark")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config, store=args.store, registry=args.registry,
                                 workers=args.workers)
        return args.func(args, settings)
    except (AutogeoError, ValueError, OSError) as exc:
        sys.stderr.write(f"autogeo: error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
