"""Robust fusion of layered 3D scene graphs from multiple robots."""

from .liegroup import Pose
from .scene_graph import Layer, NodeId, SceneGraph

__version__ = "0.1.0"

__all__ = ["Layer", "NodeId", "Pose", "SceneGraph", "__version__"]
