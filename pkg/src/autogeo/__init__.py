"""Automated machine learning on gridded geospatial rasters.

Labeled coordinates in, trained classifier and classification maps out:
tile-backed raster store, JSON query documents, patch assembly, NDVI
quality filters, hand-crafted texture features, a random forest and small
CNNs, a model registry, and a synthetic benchmark world.
"""

from .errors import AutogeoError
from .manifest import Manifest, load_manifest, parse_manifest
from .maps import ClassificationMap
from .orchestrator import (
    SplitSpec,
    run_data_query,
    run_evaluation,
    run_inference_query,
    run_training_query,
    stratified_split,
)
from .patches import LabeledPoint, Patch, PatchSet, assemble_patches, assemble_points
from .query import FeatureSpec, FilterSpec, QuerySpec, parse_query, serialize_query, validate_query
from .raster_store import GridSpec, IngestHeader, RasterStore
from .registry import ModelRecord, ModelRegistry

__all__ = [
    "AutogeoError",
    "Manifest",
    "load_manifest",
    "parse_manifest",
    "ClassificationMap",
    "SplitSpec",
    "run_data_query",
    "run_evaluation",
    "run_inference_query",
    "run_training_query",
    "stratified_split",
    "LabeledPoint",
    "Patch",
    "PatchSet",
    "assemble_patches",
    "assemble_points",
    "FeatureSpec",
    "FilterSpec",
    "QuerySpec",
    "parse_query",
    "serialize_query",
    "validate_query",
    "GridSpec",
    "IngestHeader",
    "RasterStore",
    "ModelRecord",
    "ModelRegistry",
]

__version__ = "0.1.0"
