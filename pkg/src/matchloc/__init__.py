"""Visual re-localization by direct 3D-2D matching against a conditional neural scene model."""

__version__ = "0.1.0"
