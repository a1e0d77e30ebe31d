"""Self-supervised point-cloud representation learning with kNN-graph augmentation and encoder-weight perturbation."""

__version__ = "0.1.0"
