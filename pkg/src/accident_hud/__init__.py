"""Accident hotspots, explainable hotspot classification and windshield notification geometry."""

__version__ = "0.1.0"
