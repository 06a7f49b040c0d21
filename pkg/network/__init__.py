"""
Network module: layers, RFAM, MPSM and the two-stream detector
"""

from .layers import Conv2d, BatchNorm2d, Dense, ParameterStore
from .rfam import RFAM, StageFeatures, RfamOutput, rfam
from .mpsm import fuse_multiscale, partition, patch_bounds, patch_validity, similarity_pattern, mpsm
from .two_stream_net import TwoStreamNet, NetworkOutput, VARIANTS

__all__ = [
    'Conv2d',
    'BatchNorm2d',
    'Dense',
    'ParameterStore',
    'RFAM',
    'StageFeatures',
    'RfamOutput',
    'rfam',
    'fuse_multiscale',
    'partition',
    'patch_bounds',
    'patch_validity',
    'similarity_pattern',
    'mpsm',
    'TwoStreamNet',
    'NetworkOutput',
    'VARIANTS'
]
