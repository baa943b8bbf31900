from .checkpoint import CheckpointStore, LayerWeights, load_checkpoint, read_tensors, save_checkpoint, write_tensors
from .classes import ClassEmbeddingSet, load_class_embeddings, save_class_embeddings
from .images import (
    load_image,
    load_label_map,
    load_raw_tensor,
    normalize_image,
    read_netpbm,
    save_raw_tensor,
    write_netpbm,
)
from .manifest import DatasetManifest, load_manifest, save_manifest
from .segmentation import SegmentationMap, read_segmentation, write_segmentation

__all__ = [
    "CheckpointStore", "LayerWeights", "load_checkpoint", "save_checkpoint", "read_tensors", "write_tensors",
    "ClassEmbeddingSet", "load_class_embeddings", "save_class_embeddings",
    "load_image", "load_label_map", "load_raw_tensor", "save_raw_tensor", "normalize_image",
    "read_netpbm", "write_netpbm",
    "DatasetManifest", "load_manifest", "save_manifest",
    "SegmentationMap", "read_segmentation", "write_segmentation",
]
