"""MRI-to-CT synthesis with a hybrid convolution / selective state-space encoder-decoder.

Everything runs on numpy: a small reverse-mode autodiff engine, the model
variants, the staged HU-space loss, evaluation metrics and a deterministic
phantom generator for desk-scale experiments.
"""

from .volume import IntensitySpace, Mask, NormStats, Volume

__version__ = "0.1.0"

__all__ = ["IntensitySpace", "Mask", "NormStats", "Volume", "__version__"]
