"""Point-cloud learning on a frozen, image-pretrained transformer backbone."""

__version__ = "0.1.0"
