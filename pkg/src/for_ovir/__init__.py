"""Object-centric open-vocabulary image retrieval with a learnable set-summary head."""

__version__ = "0.1.0"
