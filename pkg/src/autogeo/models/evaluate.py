"""Accuracy and confusion matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrainReport:
    """Test-set evaluation plus training metadata.

    ``confusion[i, j]`` counts samples of true class i predicted as j.
    """

    accuracy: float
    confusion: np.ndarray
    classes: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    wall_time: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def per_class_counts(self):
        return self.confusion.sum(axis=1)

    def to_dict(self, include_timing: bool = False):
        doc = {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "classes": list(self.classes),
            "scores": list(self.scores),
        }
        doc.update(self.details)
        if include_timing:
            doc["wall_time"] = self.wall_time
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        acc = doc.pop("accuracy")
        cm = np.asarray(doc.pop("confusion"), dtype=np.int64)
        classes = doc.pop("classes", [])
        scores = doc.pop("scores", [])
        wall = doc.pop("wall_time", 0.0)
        return cls(acc, cm, classes, scores, wall, doc)

    def table(self) -> str:
        """Plain-text confusion table, rows = true class."""
        names = [str(c) for c in self.classes] or [str(i) for i in range(len(self.confusion))]
        width = max(6, max(len(n) for n in names) + 1, len(str(self.confusion.max())) + 1)
        lines = [" " * width + "".join(n.rjust(width) for n in names)]
        for name, row in zip(names, self.confusion):
            lines.append(name.rjust(width) + "".join(str(v).rjust(width) for v in row))
        lines.append(f"accuracy = {self.accuracy:.4f}")
        return "\n".join(lines)


def confusion_matrix(predictions, labels, n_classes=None):
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def evaluate(predictions, labels, n_classes=None, classes=None) -> TrainReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if n_classes is None and classes is not None:
        n_classes = len(classes)
    cm = confusion_matrix(predictions, labels, n_classes)
    accuracy = int(np.trace(cm)) / int(cm.sum())
    return TrainReport(accuracy, cm, list(classes) if classes is not None else list(range(len(cm))))
