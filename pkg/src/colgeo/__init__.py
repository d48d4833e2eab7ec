"""Monocular depth and surface-normal estimation for synthetic endoscopy scenes.

Submodules:

``tensor``      float64 reverse-mode autodiff with im2col convolutions
``geometry``    pinhole camera, depth-to-normal warping, local planar guidance
``losses``      SILog, normal MAE, cross-task consistency and the weighted sum
``metrics``     standard depth and normal error metrics
``scenes``      ray-cast synthetic planes, spheres, tubes and composites
``model``       encoder/decoder network with CBAM, LPG and UNC decoders
``trainer``     optimisers, training loop, evaluation and the ablation ladder
``dataio``      PNG codecs, dataset manifests and checkpoints
``gradcheck``   finite-difference gradient checks
"""
__version__ = "0.1.0"
__all__ = ["__version__"]
