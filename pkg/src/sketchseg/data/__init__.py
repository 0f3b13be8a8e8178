from .generator import (
    GeneratorConfig,
    class_names,
    dataset_checksum,
    fill_polygon,
    generate_shapes_world,
    mask_iou,
)
from .raster import rasterize
from .sketchy import load_sketchy_format, save_dataset
from .types import (
    DatasetError,
    PairedDataset,
    PhotoRecord,
    TrainSample,
    VectorSketch,
)

__all__ = [
    "DatasetError",
    "GeneratorConfig",
    "PairedDataset",
    "PhotoRecord",
    "TrainSample",
    "VectorSketch",
    "class_names",
    "dataset_checksum",
    "fill_polygon",
    "generate_shapes_world",
    "load_sketchy_format",
    "mask_iou",
    "rasterize",
    "save_dataset",
]
