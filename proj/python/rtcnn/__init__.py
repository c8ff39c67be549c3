"""Real-time facial expression and gender CNNs: models, training, saliency and the face pipeline."""

from ._rtcnn import (
    Dataset,
    Error,
    LatencyStats,
    Model,
    build,
    count_parameters,
    crc32,
    evaluate,
    load_fer2013,
    load_manifest,
    load_weights,
    preprocess,
    read_pgm,
    saliency,
    separable_cost_ratio,
    time_forward,
    train,
    write_pgm,
)

__all__ = [
    "Dataset",
    "Error",
    "LatencyStats",
    "Model",
    "build",
    "count_parameters",
    "crc32",
    "evaluate",
    "load_fer2013",
    "load_manifest",
    "load_weights",
    "preprocess",
    "read_pgm",
    "saliency",
    "separable_cost_ratio",
    "time_forward",
    "train",
    "write_pgm",
]
