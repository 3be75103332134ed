"""
Synthetic multi-band worlds with known ground truth, and the end-to-end benchmark.

A world is a rectangle of class regions. Every class has a per-band mean
(red, green, blue, nir), Gaussian noise, and optionally vertical square-wave
stripes added equally to all four bands. Stripes leave NIR - Red unchanged, so
texture and vegetation signal can be controlled independently: vegetated
classes have NIR well above Red, bare classes the reverse.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import OverlappingRegions, RegionTooSmall, WorldSpecError
from .manifest import Manifest
from .patches import LabeledPoint
from .query import DEFAULT_FEATURES, FeatureSpec, parse_query
from .raster_store import GridSpec, IngestHeader, RasterStore, parse_timestamp, write_bsq

BANDS = ("red", "green", "blue", "nir")


@dataclass(frozen=True)
class ClassSignature:
    name: str
    means: tuple  # per band, in BANDS order
    noise: float = 10.0
    stripe_period: int = 0  # pixels; 0 = no stripes
    stripe_amplitude: float = 0.0
    vegetated: bool = True
    labeled: bool = True  # appears in label manifests

    def key(self):
        return (tuple(self.means), self.noise, self.stripe_period, self.stripe_amplitude)


@dataclass(frozen=True)
class Region:
    class_index: int
    row0: int
    col0: int
    row1: int
    col1: int

    @property
    def shape(self):
        return self.row1 - self.row0, self.col1 - self.col0


@dataclass(frozen=True)
class WorldSpec:
    classes: tuple
    regions: tuple
    rows: int = 2048
    cols: int = 2048
    seed: int = 0
    origin_lat: float = 33.0
    origin_lon: float = -97.0
    resolution: float = 4.5e-6  # about 0.5 m
    timestamp: str = "2018-01-29T12:00:00Z"

    @property
    def grid(self):
        return GridSpec(self.origin_lat, self.origin_lon, self.resolution)

    @property
    def class_names(self):
        return [c.name for c in self.classes]

    def labeled_classes(self):
        return [c.name for c in self.classes if c.labeled]

    def validate(self):
        if self.rows < 1 or self.cols < 1:
            raise WorldSpecError("world must have positive size")
        names = self.class_names
        if len(set(names)) != len(names):
            raise WorldSpecError("class names must be unique")
        keys = [c.key() for c in self.classes]
        if len(set(keys)) != len(keys):
            raise WorldSpecError("class signatures must differ in at least one statistic")
        for c in self.classes:
            if len(c.means) != len(BANDS):
                raise WorldSpecError(f"class {c.name!r} needs {len(BANDS)} band means")
            red, nir = c.means[0], c.means[3]
            if c.vegetated and not nir > red:
                raise WorldSpecError(f"vegetated class {c.name!r} needs nir > red")
            if not c.vegetated and not red > nir:
                raise WorldSpecError(f"bare class {c.name!r} needs red > nir")
            if c.stripe_period < 0 or c.stripe_period % 2:
                raise WorldSpecError(f"class {c.name!r}: stripe period must be even and >= 0")
            if c.noise < 0:
                raise WorldSpecError(f"class {c.name!r}: noise must be >= 0")
        owner = np.full((self.rows, self.cols), -1, dtype=np.int32)
        for i, r in enumerate(self.regions):
            if not 0 <= r.class_index < len(self.classes):
                raise WorldSpecError(f"region {i} refers to unknown class {r.class_index}")
            if not (0 <= r.row0 < r.row1 <= self.rows and 0 <= r.col0 < r.col1 <= self.cols):
                raise WorldSpecError(f"region {i} is empty or outside the world")
            view = owner[r.row0:r.row1, r.col0:r.col1]
            if (view >= 0).any():
                raise OverlappingRegions(f"region {i} overlaps region {int(view.max())}")
            view[:] = i
        if (owner < 0).any():
            raise WorldSpecError("regions must tile the whole world")
        return self

    def to_dict(self):
        doc = asdict(self)
        doc["classes"] = [asdict(c) for c in self.classes]
        doc["regions"] = [asdict(r) for r in self.regions]
        return doc

    @classmethod
    def from_dict(cls, doc):
        """Build from JSON; ``{"preset": "default" | "ablation", ...overrides}`` is accepted."""
        doc = dict(doc)
        preset = doc.pop("preset", None)
        if preset is not None:
            base = PRESETS[preset](**{k: doc.pop(k) for k in ("rows", "cols", "seed") if k in doc})
            layout = doc.pop("layout", None)
            if layout is not None:
                base = replace(base, regions=grid_layout(base.rows, base.cols, **layout))
            return replace(base, **doc).validate() if doc else base.validate()
        classes = tuple(ClassSignature(**{**c, "means": tuple(c["means"])}) for c in doc.pop("classes"))
        layout = doc.pop("layout", None)
        rows, cols = doc.get("rows", 2048), doc.get("cols", 2048)
        if layout is not None:
            regions = grid_layout(rows, cols, **layout)
        else:
            regions = tuple(Region(**r) for r in doc.pop("regions"))
        return cls(classes, regions, **doc).validate()


def grid_layout(rows, cols, grid_rows, grid_cols, order):
    """Regions on a grid_rows x grid_cols lattice, filled row-major with class ``order``."""
    if len(order) != grid_rows * grid_cols:
        raise WorldSpecError(f"layout needs {grid_rows * grid_cols} class entries, got {len(order)}")
    rb = np.linspace(0, rows, grid_rows + 1).round().astype(int)
    cb = np.linspace(0, cols, grid_cols + 1).round().astype(int)
    out = []
    for i in range(grid_rows):
        for j in range(grid_cols):
            out.append(Region(int(order[i * grid_cols + j]), int(rb[i]), int(cb[j]),
                              int(rb[i + 1]), int(cb[j + 1])))
    return tuple(out)


# -- presets -------------------------------------------------------------------

_DEFAULT_CLASSES = (
    # name, (red, green, blue, nir), stripe period
    ("veg_0", (60, 80, 50, 140), 0),
    ("veg_1", (66, 86, 56, 140), 2),
    ("veg_2", (60, 90, 60, 130), 4),
    ("veg_3", (70, 80, 45, 150), 8),
    ("veg_4", (55, 75, 55, 125), 16),
    ("veg_5", (64, 84, 52, 146), 2),
    ("veg_6", (58, 88, 58, 136), 8),
    ("veg_7", (72, 92, 62, 132), 4),
    ("veg_8", (62, 78, 48, 152), 16),
    ("veg_9", (68, 82, 54, 128), 0),
)
BARE = ClassSignature("bare", (120.0, 110.0, 100.0, 80.0), noise=10.0, vegetated=False, labeled=False)


def default_world(rows=2048, cols=2048, seed=0) -> WorldSpec:
    """Ten vegetated classes plus bare land on a 3 x 4 region grid."""
    classes = tuple(ClassSignature(name, tuple(float(v) for v in means), 10.0, period,
                                   10.0 if period else 0.0)
                    for name, means, period in _DEFAULT_CLASSES) + (BARE,)
    order = [0, 1, 2, 3, 4, 10, 5, 6, 7, 8, 10, 9]
    return WorldSpec(classes, grid_layout(rows, cols, 3, 4, order), rows, cols, seed).validate()


def ablation_world(rows=2048, cols=2048, seed=0) -> WorldSpec:
    """Five class pairs; each pair shares every band mean and differs only in stripe period."""
    base = ((60, 80, 50, 140), (66, 86, 56, 134), (56, 90, 60, 128), (70, 76, 46, 150),
            (62, 84, 54, 124))
    classes = []
    for i, means in enumerate(base):
        for tag, period in (("fine", 2), ("coarse", 8)):
            classes.append(ClassSignature(f"pair{i}_{tag}", tuple(float(v) for v in means), 10.0,
                                          period, 12.0))
    classes.append(BARE)
    order = [0, 1, 2, 3, 4, 10, 5, 6, 7, 8, 10, 9]
    return WorldSpec(tuple(classes), grid_layout(rows, cols, 3, 4, order), rows, cols, seed).validate()


PRESETS = {"default": default_world, "ablation": ablation_world}


# -- generation ----------------------------------------------------------------

@dataclass
class World:
    spec: WorldSpec
    bands: dict  # band role -> float32 (rows, cols)
    truth: np.ndarray  # int16 class index per pixel

    def class_at(self, row, col):
        return self.spec.classes[int(self.truth[row, col])].name


def stripe_profile(cols, period, amplitude, col0=0):
    """Square wave along columns: +amplitude for the first half of each period."""
    if period == 0 or amplitude == 0:
        return np.zeros(cols, dtype=np.float64)
    c = np.arange(col0, col0 + cols)
    return np.where((c % period) < period // 2, amplitude, -amplitude)


def gen_synthetic_world(spec: WorldSpec) -> World:
    """Render the four bands and the ground-truth class map."""
    spec.validate()
    bands = {role: np.empty((spec.rows, spec.cols), dtype=np.float32) for role in BANDS}
    truth = np.empty((spec.rows, spec.cols), dtype=np.int16)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.regions))
    for region, ss in zip(spec.regions, seeds):
        sig = spec.classes[region.class_index]
        rng = np.random.default_rng(ss)
        h, w = region.shape
        stripes = stripe_profile(w, sig.stripe_period, sig.stripe_amplitude, region.col0)
        for b, role in enumerate(BANDS):
            noise = rng.normal(0.0, sig.noise, (h, w)) if sig.noise > 0 else 0.0
            bands[role][region.row0:region.row1, region.col0:region.col1] = (
                sig.means[b] + stripes[None, :] + noise)
        truth[region.row0:region.row1, region.col0:region.col1] = region.class_index
    return World(spec, bands, truth)


def world_headers(spec: WorldSpec, layer_prefix=""):
    return {
        role: IngestHeader(spec.origin_lat, spec.origin_lon, spec.resolution, spec.rows, spec.cols,
                           role, layer_prefix + role, parse_timestamp(spec.timestamp))
        for role in BANDS
    }


def write_world(world: World, out_dir, layer_prefix=""):
    """BSQ-F32 band pairs, the truth map (raw int16 + JSON sidecar) and world.json.

    Returns the list of (header_path, data_path) pairs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for role, header in world_headers(world.spec, layer_prefix).items():
        hp, dp = out / f"{role}.hdr.json", out / f"{role}.f32"
        write_bsq(header, world.bands[role], hp, dp)
        pairs.append((hp, dp))
    (out / "truth.i16").write_bytes(world.truth.astype("<i2").tobytes())
    (out / "truth.json").write_text(json.dumps({
        "rows": world.spec.rows, "cols": world.spec.cols, "dtype": "int16",
        "classes": world.spec.class_names, "grid": world.spec.grid.to_dict(),
    }, indent=1) + "\n", encoding="utf-8")
    (out / "world.json").write_text(json.dumps(world.spec.to_dict(), indent=1) + "\n",
                                    encoding="utf-8")
    return pairs


def read_truth(out_dir):
    out = Path(out_dir)
    meta = json.loads((out / "truth.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((out / "truth.i16").read_bytes(), dtype="<i2")
    return raw.reshape(meta["rows"], meta["cols"]).astype(np.int16), meta["classes"]


def ingest_world(world: World, store: RasterStore, layer_prefix="", overwrite=False):
    records = []
    for role, header in world_headers(world.spec, layer_prefix).items():
        records.append(store.ingest_raster(header, world.bands[role], overwrite=overwrite))
    return records


# -- label manifests -----------------------------------------------------------

@dataclass(frozen=True)
class ManifestStats:
    n_points: int
    n_wrong_region: int

    @property
    def wrong_fraction(self):
        return self.n_wrong_region / self.n_points if self.n_points else 0.0


def _sampling_boxes(spec: WorldSpec, class_index, k, holdout):
    """Centre-pixel ranges whose k x k window lies in the non-held-out part of a region."""
    lo, hi = k // 2, k - k // 2
    boxes = []
    for r in spec.regions:
        if r.class_index != class_index:
            continue
        h = r.shape[0]
        train_row1 = r.row0 + int(round(h * (1.0 - holdout)))
        rows = (r.row0 + lo, train_row1 - hi + 1)
        cols = (r.col0 + lo, r.col1 - hi + 1)
        if rows[1] > rows[0] and cols[1] > cols[0]:
            boxes.append((rows, cols))
    return boxes


def holdout_mask(spec: WorldSpec, holdout):
    """True on the held-out strip (bottom ``holdout`` fraction) of every region."""
    mask = np.zeros((spec.rows, spec.cols), dtype=bool)
    for r in spec.regions:
        train_row1 = r.row0 + int(round(r.shape[0] * (1.0 - holdout)))
        mask[train_row1:r.row1, r.col0:r.col1] = True
    return mask


def emit_label_manifest(world: World, per_class: int, *, jitter: int = 0, window_size: int = 32,
                        holdout: float = 0.25, seed: int = 0, classes=None):
    """Sample ``per_class`` labeled pixel centres from each class's regions.

    Windows are kept clear of region edges and of the held-out strip. With
    ``jitter`` > 0 each point moves by up to that many pixels per axis
    (clamped to the world), which can carry it across a region boundary;
    the label is not updated, simulating geolocation error. Returns
    ``(Manifest, ManifestStats)``.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not 0.0 <= holdout < 1.0:
        raise ValueError("holdout must be in [0, 1)")
    spec = world.spec
    names = spec.class_names
    wanted = spec.labeled_classes() if classes is None else list(classes)
    rng = np.random.default_rng(seed)
    picks = []
    for name in wanted:
        ci = names.index(name)
        boxes = _sampling_boxes(spec, ci, window_size, holdout)
        sizes = [(r1 - r0) * (c1 - c0) for (r0, r1), (c0, c1) in boxes]
        total = sum(sizes)
        if total < per_class:
            raise RegionTooSmall(f"class {name!r} has room for {total} windows, "
                                 f"{per_class} requested")
        flat = np.sort(rng.choice(total, size=per_class, replace=False))
        offsets = np.cumsum([0] + sizes)
        for f in flat:
            b = int(np.searchsorted(offsets, f, side="right") - 1)
            (r0, r1), (c0, c1) = boxes[b]
            rr, cc = divmod(int(f - offsets[b]), c1 - c0)
            picks.append((r0 + rr, c0 + cc, ci))
    picks = [picks[i] for i in rng.permutation(len(picks))]
    lo, hi = window_size // 2, window_size - window_size // 2
    points, wrong = [], 0
    for row, col, ci in picks:
        if jitter:
            dr, dc = rng.integers(-jitter, jitter + 1, size=2)
            row = int(np.clip(row + dr, lo, spec.rows - hi))
            col = int(np.clip(col + dc, lo, spec.cols - hi))
        wrong += int(world.truth[row, col] != ci)
        lat, lon = spec.grid.pixel_to_geo(row, col)
        points.append(LabeledPoint(lat, lon, names[ci]))
    manifest = Manifest(list(wanted), points, parse_timestamp(spec.timestamp))
    return manifest, ManifestStats(len(points), wrong)


# -- query documents -----------------------------------------------------------

def train_query_doc(spec: WorldSpec, manifest: Manifest, architecture: str, model_id: str, *,
                    window_size=32, filters=None, params=None, layer_prefix=""):
    filters = {"ndvi": {"min": 0.0}} if filters is None else filters
    params = dict(params or {})
    if architecture == "random_forest":
        params.setdefault("features", DEFAULT_FEATURES.to_dict())
    return {
        "layers": [{"type": "raster", "id": layer_prefix + role} for role in BANDS],
        "spatial": {"type": "point", "coordinates": [[p.lat, p.lon] for p in manifest.points]},
        "temporal": {"intervals": [{"snapshot": spec.timestamp}]},
        "model": {
            "mode": "train",
            "id": model_id,
            "architecture": architecture,
            "label": list(manifest.labels),
            "window_size": window_size,
            "filters": filters,
            "params": params,
        },
    }


def pixel_box_corners(spec: WorldSpec, row0, col0, row1, col1):
    """Geographic corners (north-west, south-east) of a pixel rectangle."""
    nw = spec.grid.pixel_edges(row0, col0)
    se = spec.grid.pixel_edges(row1, col1)
    return [list(nw), list(se)]


def test_query_doc(spec: WorldSpec, model_id: str, pixel_box=None, *, window_size=32,
                   layer_prefix=""):
    """Area inference over ``pixel_box`` (default: the whole world)."""
    box = pixel_box or (0, 0, spec.rows, spec.cols)
    return {
        "layers": [{"type": "raster", "id": layer_prefix + role} for role in BANDS],
        "spatial": {"type": "square", "coordinates": pixel_box_corners(spec, *box)},
        "temporal": {"intervals": [{"snapshot": spec.timestamp}]},
        "model": {"mode": "test", "id": model_id, "window_size": window_size},
    }


test_query_doc.__test__ = False  # not a pytest test


# -- benchmark -----------------------------------------------------------------

# Test accuracies reported for 10-way tree species classification on real
# aerial imagery. Kept for comparison only; synthetic worlds cannot reproduce them.
FIELD_REFERENCE = {"random_forest": 0.598, "resnet": 0.814}

@dataclass(frozen=True)
class BenchmarkConfig:
    per_class: int = 300
    jitter: int = 0
    window_size: int = 32
    holdout: float = 0.25
    validation: int = 50
    test: int = 50
    grid: dict | None = None  # None = full default grid
    features: FeatureSpec = DEFAULT_FEATURES
    architectures: tuple = ("random_forest", "flexcnn")
    cnn_params: dict = field(default_factory=lambda: {"epochs": 20, "lr_step": 8})
    shuffle_labels: bool = False
    seed: int = 0
    workers: int = 4


def map_against_truth(cmap, truth, spec: WorldSpec, held_out=None):
    """Compare an inference map with the truth map, tile by tile.

    Tiles spanning more than one class are skipped. Returns counts for
    labeled-class tiles classified correctly, bare tiles left as None, and
    the same restricted to tiles fully inside ``held_out``.
    """
    row0, col0, row1, col1 = cmap.pixel_box
    k = cmap.k
    names = spec.class_names
    out = {"tiles": 0, "mixed": 0, "vegetated": 0, "correct": 0, "bare": 0, "bare_none": 0,
           "held_out_vegetated": 0, "held_out_correct": 0}
    R, C = cmap.shape
    for r in range(R):
        for c in range(C):
            out["tiles"] += 1
            block = truth[row0 + r * k:row0 + (r + 1) * k, col0 + c * k:col0 + (c + 1) * k]
            first = int(block.flat[0])
            if (block != first).any():
                out["mixed"] += 1
                continue
            sig = spec.classes[first]
            value = cmap[r, c]
            if not sig.vegetated:
                out["bare"] += 1
                out["bare_none"] += int(value is None)
                continue
            if not sig.labeled:
                continue
            hit = value is not None and cmap.classes[value] == names[first]
            out["vegetated"] += 1
            out["correct"] += int(hit)
            if held_out is not None and held_out[row0 + r * k:row0 + (r + 1) * k,
                                                 col0 + c * k:col0 + (c + 1) * k].all():
                out["held_out_vegetated"] += 1
                out["held_out_correct"] += int(hit)
    out["accuracy"] = out["correct"] / out["vegetated"] if out["vegetated"] else None
    out["held_out_accuracy"] = (out["held_out_correct"] / out["held_out_vegetated"]
                                if out["held_out_vegetated"] else None)
    return out


def run_benchmark(spec: WorldSpec, config: BenchmarkConfig = BenchmarkConfig(), workdir=None):
    """Generate, ingest, label, train each architecture, infer over the world, score.

    Writes ``report.json``, ``report.txt`` and one ``map_<arch>.ppm`` per
    model into ``workdir``; returns the report dict. Only ``timings`` varies
    between runs with identical inputs.
    """
    from .orchestrator import SplitSpec, run_inference_query, run_training_query
    from .registry import ModelRegistry

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    world = gen_synthetic_world(spec)
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    store = RasterStore(workdir / "store", spec.grid)
    ingest_world(world, store, overwrite=True)
    registry = ModelRegistry(workdir / "models")
    timings["ingest"] = time.perf_counter() - t0

    manifest, mstats = emit_label_manifest(world, config.per_class, jitter=config.jitter,
                                           window_size=config.window_size,
                                           holdout=config.holdout, seed=config.seed)
    if config.shuffle_labels:
        labels = [manifest.points[i].label
                  for i in np.random.default_rng(config.seed).permutation(len(manifest.points))]
        manifest = replace(manifest, points=[replace(p, label=y)
                                             for p, y in zip(manifest.points, labels)])
    split = SplitSpec(config.validation, config.test, config.seed)
    held_out = holdout_mask(spec, config.holdout)
    report = {
        "world": {"rows": spec.rows, "cols": spec.cols, "classes": spec.class_names,
                  "seed": spec.seed},
        "manifest": {"n_points": mstats.n_points, "n_wrong_region": mstats.n_wrong_region,
                     "wrong_fraction": mstats.wrong_fraction, "jitter": config.jitter},
        "models": {},
        "field_reference": dict(FIELD_REFERENCE),
    }
    tables = []
    for arch in config.architectures:
        if arch == "random_forest":
            params = {"features": config.features.to_dict()}
            if config.grid is not None:
                params["grid"] = {k: list(v) for k, v in config.grid.items()}
        else:
            params = dict(config.cnn_params)
        model_id = f"bench_{arch}"
        doc = train_query_doc(spec, manifest, arch, model_id, window_size=config.window_size,
                              params=params)
        t0 = time.perf_counter()
        record, treport = run_training_query(parse_query(doc), store, registry, workers=config.workers,
                                             overwrite=True, seed=config.seed, split=split)
        timings[f"train_{arch}"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        cmap = run_inference_query(parse_query(test_query_doc(spec, model_id,
                                                              window_size=config.window_size)),
                                   store, registry, workers=config.workers)
        timings[f"infer_{arch}"] = time.perf_counter() - t0
        (workdir / f"map_{arch}.ppm").write_bytes(cmap.to_ppm(scale=4))
        (workdir / f"map_{arch}.json").write_text(cmap.to_json(), encoding="utf-8")
        entry = treport.to_dict()
        entry.pop("rejected", None)
        entry["map"] = map_against_truth(cmap, world.truth, spec, held_out)
        report["models"][arch] = entry
        tables.append(f"[{arch}] test accuracy {treport.accuracy:.4f}\n{treport.table()}")
    report["timings"] = timings
    (workdir / "report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    (workdir / "report.txt").write_text("\n\n".join(tables) + "\n", encoding="utf-8")
    return report
