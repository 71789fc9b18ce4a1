"""Image captioning over graphs of visual semantic units (objects,
attributes, relationships) with context-gated attention."""

from .boxmath import Box, ImageSize, iou, object_geometry_cue, relation_geometry_cue
from .graph import GraphConfig, build_geometry_graph, build_semantic_graph, validate_graph
from .model import GraphBatch, ModelConfig, VsuaModel

__version__ = "0.1.0"

__all__ = [
    "Box", "ImageSize", "iou", "object_geometry_cue", "relation_geometry_cue",
    "GraphConfig", "build_geometry_graph", "build_semantic_graph", "validate_graph",
    "GraphBatch", "ModelConfig", "VsuaModel",
]
