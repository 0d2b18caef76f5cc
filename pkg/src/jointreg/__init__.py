"""Body-model refinement and joint-regressor calibration."""

__version__ = "0.1.0"
