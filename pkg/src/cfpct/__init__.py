"""Synthetic-CT generation from CBCT with a multi-task feature autoencoder and a feature-pyramid perceptual loss.

Submodules:

- ``phantom``: procedural lung CT phantoms and simulated CBCT degradation
- ``pipeline``: volume container, HU/LAC conversion, masking, crop-resize, rigid alignment
- ``data``: dataset preparation, splits and slice sets
- ``fae``: the feature autoencoder backbone and its feature pyramid
- ``mtfs``: multi-task heads, warping, gradnorm and FAE pre-training
- ``cfp``: content, Gram-style and combined perceptual losses
- ``translate``: CAR-U-Net, GAN and CycleGAN translators
- ``metrics``: SSIM, PSNR, VIF, IFC, NCC, DSC, Pearson and reports
- ``harness``: run configuration, persistence and the experiment grids
"""

__version__ = "0.1.0"
