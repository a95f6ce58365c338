"""Closed-loop simulator for Doppler-aware vessel segmentation and quality-driven
probe re-orientation during robotic ultrasound sweeps."""

__version__ = "0.1.0"
