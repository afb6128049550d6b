from .augment import AugmentConfig, augment
from .labels import CATEGORIES, CategoryLabel
from .patches import (
    BackscatterHistogram,
    Sample,
    backscatter_histogram,
    extract_patches,
    load_manifest,
    save_samples,
    split_by_event,
)
from .preprocess import preprocess_product
from .raster import Georef, RasterMeta, RasterProduct, load_raster, save_raster
from .synth import PlantedSlick, SynthConfig, synthesize_dataset, synthesize_product

__all__ = [
    "AugmentConfig", "augment", "CATEGORIES", "CategoryLabel", "BackscatterHistogram", "Sample",
    "backscatter_histogram", "extract_patches", "load_manifest", "save_samples", "split_by_event",
    "preprocess_product", "Georef", "RasterMeta", "RasterProduct", "load_raster", "save_raster",
    "PlantedSlick", "SynthConfig", "synthesize_dataset", "synthesize_product",
]
