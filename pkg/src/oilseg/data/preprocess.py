from __future__ import annotations

import numpy as np
from scipy import ndimage

from .raster import RasterError, RasterMeta, RasterProduct

BOXCAR_SIZE = 11
DOWNSAMPLE = 4
CLIP_VALUE = 150.0
RAW_PIXEL_M = 10.0


def boxcar(values: np.ndarray, size: int = BOXCAR_SIZE) -> np.ndarray:
    if min(values.shape) < size:
        raise RasterError(f"product {values.shape} is smaller than the {size}x{size} filter window")
    return ndimage.uniform_filter(values.astype(np.float64), size=size, mode="mirror")


def clip_scale(values: np.ndarray, clip: float = CLIP_VALUE) -> np.ndarray:
    """Clip backscatter to ``clip`` and map it into [0, 1]."""
    return (np.minimum(values, clip) / clip).astype(np.float32)


def preprocess_product(raw: RasterProduct, factor: int = DOWNSAMPLE) -> RasterProduct:
    """10 m product -> boxcar(11) -> decimate by 4 -> clip at 150 -> scale to [0, 1]."""
    if raw.pixel_size_m != RAW_PIXEL_M:
        raise RasterError(f"expected a {RAW_PIXEL_M:g} m product, got {raw.pixel_size_m:g} m")
    smoothed = boxcar(raw.values)
    decimated = smoothed[::factor, ::factor]
    m = raw.meta
    meta = RasterMeta(m.product_id, m.timestamp, m.pixel_size_m * factor, m.incidence_near, m.incidence_far,
                      m.georef.scaled(factor))
    return RasterProduct(clip_scale(decimated), meta)


def downsample_mask(mask: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    """Majority downsampling of a binary mask aligned with ``preprocess_product``."""
    h, w = mask.shape
    h2, w2 = -(-h // factor), -(-w // factor)
    padded = np.zeros((h2 * factor, w2 * factor), dtype=np.float64)
    padded[:h, :w] = mask
    blocks = padded.reshape(h2, factor, w2, factor).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.uint8)
