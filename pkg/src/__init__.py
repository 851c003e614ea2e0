"""Multi-modal presentation attack detection with MAC pre-training and MoPE heads."""

__version__ = "0.1.0"
