"""detbench: dataset construction and calibrated evaluation for fake-image detectors."""

__version__ = "0.1.0"
