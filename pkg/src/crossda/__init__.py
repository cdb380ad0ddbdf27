"""Cross-sensor domain adaptation toolkit: raster preprocessing, label
scheme recoding, AdaIN-based adversarial style transfer, segmentation
training, and IoU evaluation."""

__version__ = "0.1.0"
