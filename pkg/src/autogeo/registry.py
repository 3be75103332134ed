"""Trained-model records and their on-disk registry."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote

import numpy as np

from .errors import BlobFormatError, ModelExists, UnknownModel
from .features import build_feature_matrix
from .models.blob import pack_blob, read_header, unpack_blob
from .models.cnn import FlexCnnConfig, cnn_from_arrays, cnn_to_arrays
from .models.evaluate import TrainReport
from .models.forest import RandomForestConfig, forest_from_arrays, forest_to_arrays
from .query import FeatureSpec, FilterSpec


@dataclass
class ModelRecord:
    """Everything needed to run inference, with the trained parameters in ``blob``."""

    id: str
    architecture: str
    blob: bytes
    layer_ids: tuple
    window_size: int
    classes: list
    feature_spec: FeatureSpec | None = None
    filter_spec: FilterSpec = field(default_factory=FilterSpec)
    band_roles: tuple = ()
    ndvi_bands: tuple | None = None
    report: TrainReport | None = None
    created: str | None = None

    def metadata(self) -> dict:
        return {
            "id": self.id,
            "architecture": self.architecture,
            "layer_ids": list(self.layer_ids),
            "window_size": self.window_size,
            "classes": list(self.classes),
            "feature_spec": None if self.feature_spec is None else self.feature_spec.to_dict(),
            "filter_spec": self.filter_spec.to_dict(),
            "band_roles": list(self.band_roles),
            "ndvi_bands": None if self.ndvi_bands is None else list(self.ndvi_bands),
            "report": None if self.report is None else self.report.to_dict(),
            "created": self.created,
        }

    @classmethod
    def from_blob(cls, blob: bytes, report=None, created=None) -> "ModelRecord":
        """Rebuild a record from nothing but its parameter blob."""
        h = read_header(blob)
        return cls(
            id=h["model_id"],
            architecture=h["architecture"],
            blob=blob,
            layer_ids=tuple(h["layer_ids"]),
            window_size=h["window_size"],
            classes=list(h["classes"]),
            feature_spec=None if h["feature_spec"] is None else FeatureSpec.from_dict(h["feature_spec"]),
            filter_spec=FilterSpec.from_dict(h["filter_spec"]),
            band_roles=tuple(h["band_roles"]),
            ndvi_bands=None if h["ndvi_bands"] is None else tuple(h["ndvi_bands"]),
            report=report,
            created=created,
        )

    def classifier(self) -> "Classifier":
        return Classifier.from_blob(self.blob)


def make_blob(model_id, architecture, model, *, layer_ids, window_size, classes,
              feature_spec=None, filter_spec=FilterSpec(), band_roles=(), ndvi_bands=None) -> bytes:
    header = {
        "model_id": model_id,
        "architecture": architecture,
        "layer_ids": list(layer_ids),
        "window_size": int(window_size),
        "classes": list(classes),
        "feature_spec": None if feature_spec is None else feature_spec.to_dict(),
        "filter_spec": filter_spec.to_dict(),
        "band_roles": list(band_roles),
        "ndvi_bands": None if ndvi_bands is None else [int(i) for i in ndvi_bands],
        "config": model.config.to_dict(),
    }
    if architecture == "random_forest":
        header["n_features"] = model.n_features
        header["n_classes"] = model.n_classes
        arrays = forest_to_arrays(model)
    else:
        arrays = cnn_to_arrays(model)
    return pack_blob(header, arrays)


class Classifier:
    """Runs a stored model on raw k x k x c patches."""

    def __init__(self, header: dict, model):
        self.header = header
        self.model = model
        self.architecture = header["architecture"]
        self.k = header["window_size"]
        self.classes = header["classes"]
        fs = header["feature_spec"]
        self.feature_spec = None if fs is None else FeatureSpec.from_dict(fs)
        self.band_roles = tuple(header["band_roles"])
        nb = header["ndvi_bands"]
        self.red_index, self.nir_index = (None, None) if nb is None else nb

    @classmethod
    def from_blob(cls, blob: bytes) -> "Classifier":
        header, arrays = unpack_blob(blob)
        if header["architecture"] == "random_forest":
            model = forest_from_arrays(arrays, header["n_classes"], header["n_features"],
                                       RandomForestConfig(**header["config"]))
        elif header["architecture"] in ("resnet", "flexcnn"):
            model = cnn_from_arrays(arrays, FlexCnnConfig(**header["config"]), header["window_size"])
        else:
            raise BlobFormatError(f"unknown architecture {header['architecture']!r}")
        return cls(header, model)

    def features(self, patches):
        return build_feature_matrix(patches, self.feature_spec, band_roles=self.band_roles,
                                    red_index=self.red_index, nir_index=self.nir_index)

    def predict(self, patches):
        """Class indices and per-class scores for an (N, k, k, c) array."""
        patches = np.asarray(patches, dtype=np.float32)
        if self.architecture == "random_forest":
            return self.model.predict(self.features(patches))
        return self.model.predict(patches)


class ModelRegistry:
    """Directory of model records, one sub-directory per id::

        <root>/<id>/record.json
        <root>/<id>/model.blob
        <root>/<id>/archive/0001/{record.json, model.blob}
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks = defaultdict(threading.Lock)
        self._guard = threading.Lock()

    def _dir(self, model_id):
        return self.root / quote(model_id, safe="")

    def _lock(self, model_id):
        with self._guard:
            return self._locks[model_id]

    def exists(self, model_id) -> bool:
        return (self._dir(model_id) / "model.blob").exists()

    def list(self):
        ids = []
        for path in sorted(self.root.iterdir()):
            meta = path / "record.json"
            if meta.exists():
                ids.append(json.loads(meta.read_text(encoding="utf-8"))["id"])
        return ids

    def put(self, record: ModelRecord, *, overwrite: bool = False) -> str:
        with self._lock(record.id):
            target = self._dir(record.id)
            if (target / "model.blob").exists():
                if not overwrite:
                    raise ModelExists(f"model {record.id!r} already exists")
                archive = target / "archive"
                archive.mkdir(exist_ok=True)
                slot = archive / f"{len(list(archive.iterdir())) + 1:04d}"
                slot.mkdir()
                for name in ("record.json", "model.blob"):
                    os.replace(target / name, slot / name)
            target.mkdir(parents=True, exist_ok=True)
            tmp = Path(tempfile.mkdtemp(prefix=".put-", dir=target))
            try:
                (tmp / "model.blob").write_bytes(record.blob)
                (tmp / "record.json").write_text(
                    json.dumps(record.metadata(), indent=2) + "\n", encoding="utf-8")
                os.replace(tmp / "model.blob", target / "model.blob")
                os.replace(tmp / "record.json", target / "record.json")
            finally:
                shutil.rmtree(tmp, ignore_errors=True)
        return record.id

    def get(self, model_id) -> ModelRecord:
        target = self._dir(model_id)
        if not (target / "model.blob").exists():
            raise UnknownModel(f"unknown model {model_id!r}")
        with self._lock(model_id):
            blob = (target / "model.blob").read_bytes()
            meta = json.loads((target / "record.json").read_text(encoding="utf-8"))
        report = None if meta.get("report") is None else TrainReport.from_dict(meta["report"])
        return ModelRecord.from_blob(blob, report=report, created=meta.get("created"))

    def archived(self, model_id):
        archive = self._dir(model_id) / "archive"
        if not archive.exists():
            return []
        out = []
        for slot in sorted(archive.iterdir()):
            meta = json.loads((slot / "record.json").read_text(encoding="utf-8"))
            report = None if meta.get("report") is None else TrainReport.from_dict(meta["report"])
            out.append(ModelRecord.from_blob((slot / "model.blob").read_bytes(), report,
                                             meta.get("created")))
        return out
