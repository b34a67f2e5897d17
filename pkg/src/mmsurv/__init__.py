"""Multi-modal survival prediction with missing modalities."""

__version__ = "0.1.0"
