"""Classification maps returned by area inference, and their JSON/PPM encodings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# fixed 10-colour palette, class index modulo 10; None is black
PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
)
NONE_COLOR = (0, 0, 0)


@dataclass
class ClassificationMap:
    """R x C grid of class indices (None where filtered out or not covered).

    ``pixel_box`` is the effective coverage: the snapped bounding box with
    partial edge tiles discarded.
    """

    values: list
    classes: list
    k: int
    resolution: float
    pixel_box: tuple  # (row0, col0, row1, col1)
    bbox: tuple  # (lat_min, lat_max, lon_min, lon_max) of pixel_box
    model_id: str = ""
    snapshot: str | None = None
    reasons: dict = field(default_factory=dict)

    @property
    def shape(self):
        return (len(self.values), len(self.values[0]) if self.values else 0)

    def __getitem__(self, rc):
        r, c = rc
        return self.values[r][c]

    def labels(self):
        return [[None if v is None else self.classes[v] for v in row] for row in self.values]

    def as_array(self, fill=-1):
        return np.array([[fill if v is None else v for v in row] for row in self.values],
                        dtype=np.int64).reshape(self.shape)

    def to_dict(self):
        return {
            "rows": self.shape[0],
            "cols": self.shape[1],
            "values": self.values,
            "classes": self.classes,
            "georeference": {
                "bbox": list(self.bbox),
                "pixel_box": list(self.pixel_box),
                "k": self.k,
                "resolution": self.resolution,
            },
            "provenance": {"model_id": self.model_id, "snapshot": self.snapshot},
            "reasons": {f"{r},{c}": v for (r, c), v in sorted(self.reasons.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc):
        geo = doc["georeference"]
        reasons = {}
        for key, v in doc.get("reasons", {}).items():
            r, c = key.split(",")
            reasons[(int(r), int(c))] = v
        return cls(doc["values"], doc["classes"], geo["k"], geo["resolution"],
                   tuple(geo["pixel_box"]), tuple(geo["bbox"]),
                   doc["provenance"]["model_id"], doc["provenance"]["snapshot"], reasons)

    def to_ppm(self, scale: int = 1) -> bytes:
        """Binary P6 image, one ``scale`` x ``scale`` block per tile."""
        rows, cols = self.shape
        img = np.zeros((rows, cols, 3), dtype=np.uint8)
        for r in range(rows):
            for c in range(cols):
                v = self.values[r][c]
                img[r, c] = NONE_COLOR if v is None else PALETTE[v % len(PALETTE)]
        if scale > 1:
            img = img.repeat(scale, axis=0).repeat(scale, axis=1)
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
        return header + img.tobytes()


def read_ppm(data: bytes):
    """Decode a binary P6 image written by :meth:`ClassificationMap.to_ppm`."""
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
