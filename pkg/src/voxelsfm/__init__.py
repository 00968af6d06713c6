"""Offline LiDAR-visual structure-from-motion toolkit.

Registers LiDAR frames against an incrementally maintained Gaussian voxel
map, jointly bundle-adjusts LiDAR and camera poses, closes loops through a
pose graph, and fuses everything into a colorized dense point cloud. A
synthetic-scene generator and APE/RPE evaluator make every stage testable
without real sensor data.
"""

__version__ = "0.1.0"
