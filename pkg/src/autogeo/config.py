"""
Key-value settings shared by the CLI and the HTTP service.

Settings come from a JSON file (``--config``) and may be overridden by
command-line flags::

    {
      "store": "./store",
      "registry": "./models",
      "grid": {"origin_lat": 33.0, "origin_lon": -97.0, "resolution": 4.5e-06},
      "tile_size": 256,
      "validation": 500,
      "test": 500,
      "search_window": "30d",
      "workers": 4,
      "profile": "desk"
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .models.cnn import PROFILES
from .query import parse_duration
from .raster_store import DEFAULT_TILE_SIZE, GridSpec


@dataclass(frozen=True)
class Settings:
    store: str = "./store"
    registry: str | None = None  # default: <store>/../models
    grid: dict | None = None  # used only when creating a new store
    tile_size: int = DEFAULT_TILE_SIZE
    validation: int = 500
    test: int = 500
    search_window: str = "30d"
    workers: int = 4
    profile: str = "desk"

    def __post_init__(self):
        parse_duration(self.search_window)
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.validation < 0 or self.test < 0:
            raise ValueError("validation and test holdouts must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def registry_path(self) -> Path:
        if self.registry is not None:
            return Path(self.registry)
        return Path(self.store).parent / "models"

    @property
    def grid_spec(self):
        return None if self.grid is None else GridSpec(**self.grid)

    def to_dict(self):
        return asdict(self)


def load_settings(path=None, **overrides) -> Settings:
    """Read a JSON settings file (optional) and apply non-None overrides."""
    doc = {}
    if path is not None:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    known = {f.name for f in fields(Settings)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    settings = Settings(**doc)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(settings, **overrides) if overrides else settings
