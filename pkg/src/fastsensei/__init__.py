"""Sensor-independent multispectral encoder and lightweight segmentation network."""
from .data import TileSample
from .descriptor import BandSpec, EncodingVariant, StatsVariant
from .encoder import EncoderConfig, encoder_forward, init_encoder
from .segnet import SegNetConfig, init_segnet, segnet_forward, segnet_forward_quantized

__version__ = "0.1.0"

__all__ = [
    "BandSpec",
    "EncoderConfig",
    "EncodingVariant",
    "SegNetConfig",
    "StatsVariant",
    "TileSample",
    "encoder_forward",
    "init_encoder",
    "init_segnet",
    "segnet_forward",
    "segnet_forward_quantized",
]
