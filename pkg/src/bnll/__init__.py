"""Binarized convolutional landmark localization toolkit."""

from .bintensor import (
    BitPlaneTensor,
    QuantizationPolicy,
    ShapeError,
    pack_bits,
    quantize_weights,
    unpack_bits,
    xnor_dot,
)
from .blocks import (
    BlockSpec,
    LayerNode,
    build_block,
    build_bottleneck,
    build_hpm,
    build_ms_no_1x1,
    build_multiscale,
    build_wider,
    count_params,
    receptive_field,
    shortest_conv_path,
)
from .network import (
    Network,
    NetworkSpec,
    build_network,
    count_network_params,
    memory_footprint,
)

__all__ = [
    "BitPlaneTensor",
    "QuantizationPolicy",
    "ShapeError",
    "pack_bits",
    "quantize_weights",
    "unpack_bits",
    "xnor_dot",
    "BlockSpec",
    "LayerNode",
    "build_block",
    "build_bottleneck",
    "build_hpm",
    "build_ms_no_1x1",
    "build_multiscale",
    "build_wider",
    "count_params",
    "receptive_field",
    "shortest_conv_path",
    "Network",
    "NetworkSpec",
    "build_network",
    "count_network_params",
    "memory_footprint",
]

__version__ = "0.1.0"
