"""parkingtwin: blueprint-driven parking-structure reconstruction.

Turns an OSM-style floor plan plus a posed RGB-D sequence into a clean,
vehicle-free, textured triangle mesh. Geometry comes from the blueprint
(2D distance field extruded into a TSDF), appearance from streaming
per-vertex color fusion in CIELAB with geometric occlusion masking.
"""

__version__ = "0.1.0"

from .errors import (
    TwinError,
    MapParseError,
    MapStructureError,
    ConfigError,
    DatasetError,
    MeshError,
)

__all__ = [
    "TwinError",
    "MapParseError",
    "MapStructureError",
    "ConfigError",
    "DatasetError",
    "MeshError",
    "__version__",
]
