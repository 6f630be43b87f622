"""
Opti-acoustic metric reconstruction: sonar occupancy mapping, acoustic rescaling
of two-view pointmaps, keyframe graph optimization, and synthetic ground truth.
"""
