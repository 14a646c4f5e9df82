from .model import (
    BII,
    CPA,
    Associator,
    AssociatorConfig,
    DecoderLayer,
    FingerprintMismatch,
    FrameOutput,
    load_checkpoint,
    save_checkpoint,
)
from .queries import ObjectQuery, build_noisy_queries, filter_detection_queries, update_history

__all__ = [
    "BII",
    "CPA",
    "Associator",
    "AssociatorConfig",
    "DecoderLayer",
    "FingerprintMismatch",
    "FrameOutput",
    "ObjectQuery",
    "build_noisy_queries",
    "filter_detection_queries",
    "load_checkpoint",
    "save_checkpoint",
    "update_history",
]
