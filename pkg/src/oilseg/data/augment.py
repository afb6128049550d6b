"""Random affine augmentation applied jointly to the VV patch and its mask."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .patches import Sample

PAD_MODES = {"mirror": "mirror", "zero": "constant"}


@dataclass
class AugmentConfig:
    max_rotation_deg: float = 90.0
    width_shift_frac: float = 0.1
    height_shift_frac: float = 0.1
    shear_max: float = 0.3
    zoom_max: float = 0.2
    flip_prob: float = 0.5
    pad_mode: str = "mirror"

    def __post_init__(self):
        for name in ("width_shift_frac", "height_shift_frac", "zoom_max", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pad_mode not in PAD_MODES:
            raise ValueError(f"pad_mode must be one of {sorted(PAD_MODES)}")

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return not any((self.max_rotation_deg, self.width_shift_frac, self.height_shift_frac,
                        self.shear_max, self.zoom_max, self.flip_prob))


def random_transform(config: AugmentConfig, shape: tuple[int, int], rng: np.random.Generator):
    """Draw ``(matrix, offset, flip_h, flip_v)``; the matrix maps output to input coordinates."""
    h, w = shape
    theta = np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
    ty = rng.uniform(-config.height_shift_frac, config.height_shift_frac) * h
    tx = rng.uniform(-config.width_shift_frac, config.width_shift_frac) * w
    shear = rng.uniform(-config.shear_max, config.shear_max)
    zy, zx = rng.uniform(1 - config.zoom_max, 1 + config.zoom_max, 2)
    flip_h = rng.random() < config.flip_prob
    flip_v = rng.random() < config.flip_prob
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear_m = np.array([[1.0, 0.0], [shear, 1.0]])
    zoom_m = np.diag([zy, zx])
    matrix = rot @ shear_m @ zoom_m
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center + np.array([ty, tx])
    return matrix, offset, flip_h, flip_v


def apply_transform(image, mask, matrix, offset, flip_h, flip_v, pad_mode="mirror"):
    mode = PAD_MODES[pad_mode]
    if not np.allclose(matrix, np.eye(2)) or np.any(offset != 0):
        image = ndimage.affine_transform(image, matrix, offset, order=1, mode=mode)
        mask = ndimage.affine_transform(mask, matrix, offset, order=0, mode=mode)
    if flip_h:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if flip_v:
        image, mask = image[::-1], mask[::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator | int | None = None) -> Sample:
    rng = np.random.default_rng(rng)
    if config.is_identity:
        return replace(sample, vv=sample.vv.copy(), mask=sample.mask.copy())
    matrix, offset, fh, fv = random_transform(config, sample.vv.shape, rng)
    vv, mask = apply_transform(sample.vv, sample.mask, matrix, offset, fh, fv, config.pad_mode)
    return replace(sample, vv=vv.astype(np.float32), mask=mask.astype(np.uint8))
