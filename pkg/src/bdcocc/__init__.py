"""Binarized deep-convolution units for occupancy prediction, in numpy.

Submodules: ``tensor`` (bit packing), ``binarize``, ``bitconv`` (XNOR-popcount
convolution), ``units`` (BDC V0-V3), ``autograd`` (tape + AdamW), ``analysis``
(binarization-error statistics, cost model), ``occtoy`` (synthetic task) and
``cli``.
"""

from .bitconv import ConvGeometry, conv2d_bit, conv2d_fp
from .binarize import BinaryConvParams, binarize_weights, sign_forward
from .errors import BDCError
from .tensor import BitTensor, bit_pack, bit_unpack, popcount_dot
from .units import BDCUnitConfig, ModuleKind, Variant, bdc_forward, init_unit

__version__ = "0.1.0"

__all__ = [
    "BDCError",
    "BDCUnitConfig",
    "BinaryConvParams",
    "BitTensor",
    "ConvGeometry",
    "ModuleKind",
    "Variant",
    "bdc_forward",
    "binarize_weights",
    "bit_pack",
    "bit_unpack",
    "conv2d_bit",
    "conv2d_fp",
    "init_unit",
    "popcount_dot",
    "sign_forward",
]
