"""Active multi-view voxel scene reconstruction with a geometry-aware recurrent memory."""

__version__ = "0.1.0"
