"""
Core numerical module: autodiff tape, frequency cue, image I/O and checkpoints
"""

from .diffcore import Tensor, backward, no_grad
from .frequency_cue import frequency_cue, dct2d, idct2d, highpass_filter, to_luminance
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    'Tensor',
    'backward',
    'no_grad',
    'frequency_cue',
    'dct2d',
    'idct2d',
    'highpass_filter',
    'to_luminance',
    'save_checkpoint',
    'load_checkpoint'
]
