from .blob import FORMAT_VERSION, pack_blob, read_header, unpack_blob
from .cnn import FlexCnnConfig, FlexCnnModel, cnn_predict, cnn_train
from .evaluate import TrainReport, confusion_matrix, evaluate
from .forest import (
    DEFAULT_GRID,
    RandomForestConfig,
    RandomForestModel,
    rf_grid_search,
    rf_predict,
    rf_train,
)

__all__ = [
    "FORMAT_VERSION",
    "pack_blob",
    "read_header",
    "unpack_blob",
    "FlexCnnConfig",
    "FlexCnnModel",
    "cnn_predict",
    "cnn_train",
    "TrainReport",
    "confusion_matrix",
    "evaluate",
    "DEFAULT_GRID",
    "RandomForestConfig",
    "RandomForestModel",
    "rf_grid_search",
    "rf_predict",
    "rf_train",
]
