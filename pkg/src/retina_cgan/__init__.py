"""Lesion segmentation for fundus photographs with a HED generator and a conditional PatchGAN critic."""

__version__ = "0.1.0"
