"""Speech-from-motion translation and anomaly detection on synthetic cohorts."""

__version__ = "0.1.0"
