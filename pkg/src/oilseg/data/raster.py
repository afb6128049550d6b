"""G16R raster container and its JSON sidecar.

Layout: ``b"G16R"``, u32 width, u32 height, u8 dtype code, row-major
little-endian payload. Metadata lives in ``<path>.meta``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"G16R"
DTYPES = {0: np.dtype("<u2"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
CODES = {np.dtype("uint16"): 0, np.dtype("float32"): 1, np.dtype("uint8"): 2}
ANGLE_RANGE = (30.0, 45.0)


class RasterError(ValueError):
    pass


@dataclass
class Georef:
    """Affine lon/lat georeference of pixel corners: corner (row, col) maps to
    ``(origin_lon + col * lon_spacing, origin_lat + row * lat_spacing)``."""

    origin_lon: float = 0.0
    origin_lat: float = 0.0
    lon_spacing: float = 1e-4
    lat_spacing: float = -1e-4

    def to_lonlat(self, rows, cols):
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        return self.origin_lon + cols * self.lon_spacing, self.origin_lat + rows * self.lat_spacing

    def footprint(self, height: int, width: int) -> tuple[float, float, float, float]:
        lons, lats = self.to_lonlat([0, height], [0, width])
        return float(min(lons)), float(min(lats)), float(max(lons)), float(max(lats))

    def scaled(self, factor: int) -> "Georef":
        return Georef(self.origin_lon, self.origin_lat, self.lon_spacing * factor, self.lat_spacing * factor)


@dataclass
class RasterMeta:
    product_id: str = "product"
    timestamp: str = "2020-01-01T00:00:00Z"
    pixel_size_m: float = 10.0
    incidence_near: float = 30.0
    incidence_far: float = 45.0
    georef: Georef = field(default_factory=Georef)

    def validate(self) -> None:
        lo, hi = ANGLE_RANGE
        for a in (self.incidence_near, self.incidence_far):
            if not lo <= a <= hi:
                raise RasterError(f"incidence angle {a} outside [{lo}, {hi}] degrees")
        if self.pixel_size_m <= 0:
            raise RasterError("pixel_size_m must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RasterMeta":
        d = dict(d)
        d["georef"] = Georef(**d.get("georef", {}))
        return cls(**d)


@dataclass
class RasterProduct:
    values: np.ndarray
    meta: RasterMeta = field(default_factory=RasterMeta)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def pixel_size_m(self) -> float:
        return self.meta.pixel_size_m

    def incidence_angles(self) -> np.ndarray:
        """Per-column incidence angle, linear between the near and far edge."""
        if self.width == 1:
            return np.array([self.meta.incidence_near])
        return np.linspace(self.meta.incidence_near, self.meta.incidence_far, self.width)


def write_grid(values: np.ndarray, path) -> None:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise RasterError("G16R holds 2-D grids only")
    code = CODES.get(arr.dtype)
    if code is None:
        raise RasterError(f"unsupported dtype {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IIB", w, h, code))
        fh.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def read_grid(path, dtype=None) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise RasterError(f"{path}: bad magic")
    if len(buf) < 13:
        raise RasterError(f"{path}: truncated header")
    w, h, code = struct.unpack_from("<IIB", buf, 4)
    if code not in DTYPES:
        raise RasterError(f"{path}: unknown dtype code {code}")
    dt = DTYPES[code]
    if dtype is not None and np.dtype(dtype) != dt.newbyteorder("="):
        raise RasterError(f"{path}: dtype mismatch, file holds {dt}, expected {np.dtype(dtype)}")
    need = w * h * dt.itemsize
    if len(buf) - 13 < need:
        raise RasterError(f"{path}: truncated payload ({len(buf) - 13} of {need} bytes)")
    return np.frombuffer(buf, dtype=dt, count=w * h, offset=13).reshape(h, w).astype(dt.newbyteorder("="))


def meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def save_raster(product: RasterProduct, path) -> None:
    write_grid(product.values, path)
    meta_path(path).write_text(json.dumps(product.meta.to_dict(), indent=2))


def load_raster(path) -> RasterProduct:
    mpath = meta_path(path)
    if not mpath.exists():
        raise RasterError(f"{path}: missing sidecar {mpath.name}")
    values = read_grid(path)
    meta = RasterMeta.from_dict(json.loads(mpath.read_text()))
    meta.validate()
    return RasterProduct(values, meta)
