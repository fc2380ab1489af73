"""Vehicle localization on locally estimated road planes from monocular keypoints."""

__version__ = "0.1.0"
