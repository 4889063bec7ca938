"""Level-set instance segmentation with kernel-PCA shape codes and learned shape decoders."""

__version__ = "0.1.0"
