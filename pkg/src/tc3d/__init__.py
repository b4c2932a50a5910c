"""Temporal-encoding 3D-CNN training and deep compression, from scratch on NumPy."""

from .errors import (ConfigError, CorruptStreamError, EmptyHistogramError, LabelError,
                     ShapeError, TC3DError, UnknownSymbolError, VideoTooShortError)

__version__ = "0.1.0"
