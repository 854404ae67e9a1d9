"""Translation models trained on partially aligned sentence pairs."""

__version__ = "0.1.0"
