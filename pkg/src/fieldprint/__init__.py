"""Implicit-field planning for filament-based multi-axis 3D printing.

Trains signed-distance, guidance, infill and quaternion-motion fields over a
normalized model domain, extracts printing waypoints by constrained
projection onto field iso-curves, sequences them through a region graph, and
plans globally collision-free, support-free motion via a time-varying signed
distance evaluation.
"""

__version__ = "0.1.0"
