"""Training and fine-tuning toolkit for convolutional encoder-decoder segmentation networks."""

__version__ = "0.1.0"
