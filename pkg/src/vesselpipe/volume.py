"""Core 3D grid types, NIfTI-1 file I/O, intensity windowing and VOI extraction.

Grids are addressed ``values[x, y, z]``. Whenever a linear (flattened)
ordering matters — file layout, tie-breaking, center enumeration — it is
the x-fastest order, i.e. ``ravel(order="F")`` of the ``(nx, ny, nz)``
array. This matches the NIfTI on-disk convention and every module in the
package inherits it.

Supported on-disk format: single-file uncompressed little-endian NIfTI-1
(``.nii``), magic ``n+1``, ``vox_offset`` 352, datatypes uint8 (2),
int16 (4) and float32 (16).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from vesselpipe.errors import FormatError, UnsupportedDatatypeError

HEADER_SIZE = 348
DATA_OFFSET = 352

# NIfTI-1 datatype code -> (numpy dtype, bitpix)
_DTYPES = {2: ("<u1", 8), 4: ("<i2", 16), 16: ("<f4", 32)}
_DTYPE_NAMES = {"uint8": 2, "int16": 4, "float32": 16}


@dataclass
class Volume3:
    """A 3D scalar grid with voxel spacing metadata.

    values : float32 array of shape (nx, ny, nz), all finite
    spacing : voxel size (sx, sy, sz) in millimeters, all > 0
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be 3D, got shape {self.values.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.isfinite(self.values).all():
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def new_like(self, values: np.ndarray) -> "Volume3":
        """Same spacing, new values."""
        return Volume3(values, self.spacing)


@dataclass
class Mask3:
    """A binary 3D grid with the same addressing as :class:`Volume3`."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values).astype(bool)
        if self.values.ndim != 3:
            raise ValueError(f"mask values must be 3D, got shape {self.values.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class WindowSpec:
    """Intensity window [lo, hi] mapped onto [0, 1]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"window requires hi > lo, got [{self.lo}, {self.hi}]")


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise OSError(f"truncated NIfTI file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def load_volume(path) -> Volume3:
    """Load a single-file uncompressed little-endian NIfTI-1 volume.

    Values are converted to float32; ``scl_slope``/``scl_inter`` are
    applied when non-degenerate (slope not 0 and not the identity pair).

    Raises FormatError for a bad magic, UnsupportedDatatypeError for a
    datatype outside {uint8, int16, float32}, OSError for a truncated
    payload.
    """
    with open(path, "rb") as f:
        hdr = _read_exact(f, HEADER_SIZE, "header")
        magic = hdr[344:348]
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise FormatError(f"not a NIfTI-1 file: bad magic {magic!r}")
        dim = struct.unpack_from("<8h", hdr, 40)
        datatype, _bitpix = struct.unpack_from("<2h", hdr, 70)
        pixdim = struct.unpack_from("<8f", hdr, 76)
        vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", hdr, 108)

        if datatype not in _DTYPES:
            raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {datatype}")
        if dim[0] < 3:
            raise FormatError(f"expected a 3D volume, header dim[0] = {dim[0]}")
        nx, ny, nz = dim[1], dim[2], dim[3]
        if min(nx, ny, nz) < 1:
            raise FormatError(f"bad volume dims {(nx, ny, nz)}")
        spacing = tuple(float(p) for p in pixdim[1:4])
        if any(not (s > 0) for s in spacing):
            raise FormatError(f"non-positive pixdim {spacing}")

        np_dtype, _ = _DTYPES[datatype]
        itemsize = np.dtype(np_dtype).itemsize
        offset = int(round(vox_offset)) if vox_offset >= HEADER_SIZE else DATA_OFFSET
        f.seek(offset)
        raw = _read_exact(f, nx * ny * nz * itemsize, "voxel data")

    vals = np.frombuffer(raw, dtype=np_dtype).astype(np.float32)
    if np.isfinite(scl_slope) and scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        vals = vals * np.float32(scl_slope) + np.float32(scl_inter)
    if not np.isfinite(vals).all():
        raise FormatError("NIfTI payload contains non-finite values")
    return Volume3(vals.reshape((nx, ny, nz), order="F"), spacing)


def save_volume(vol: Volume3, path, datatype: str = "float32") -> None:
    """Write a volume as single-file NIfTI-1.

    float32 round-trips exactly. Integer datatypes clamp to the type
    range and truncate toward zero (300.5 stored as int16 reloads as
    300.0).
    """
    if datatype not in _DTYPE_NAMES:
        raise ValueError(f"datatype must be one of {sorted(_DTYPE_NAMES)}, got {datatype!r}")
    code = _DTYPE_NAMES[datatype]
    np_dtype, bitpix = _DTYPES[code]

    flat = vol.values.ravel(order="F")
    if code == 16:
        payload = flat.astype("<f4").tobytes()
    else:
        info = np.iinfo(np.dtype(np_dtype))
        payload = np.clip(flat, info.min, info.max).astype(np_dtype).tobytes()

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    nx, ny, nz = vol.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, bitpix)
    sx, sy, sz = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(DATA_OFFSET), 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"

    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # empty extension flag, pads data to 352
        f.write(payload)


def save_mask(mask: Mask3, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a binary mask as a uint8 NIfTI volume (0/1 values)."""
    save_volume(Volume3(mask.values.astype(np.float32), spacing), path, datatype="uint8")


def load_mask(path) -> Mask3:
    """Load a mask saved with :func:`save_mask`; nonzero means foreground."""
    return Mask3(load_volume(path).values != 0)


def window_normalize(vol: Volume3, w: WindowSpec) -> Volume3:
    """Map intensities affinely so [lo, hi] becomes [0, 1], clamping outside."""
    scaled = (vol.values - np.float32(w.lo)) / np.float32(w.hi - w.lo)
    return vol.new_like(np.clip(scaled, 0.0, 1.0))


def extract_cube(values: np.ndarray, center, size: int, dtype=np.float32) -> np.ndarray:
    """Crop a ``size``^3 cube around ``center`` with zero padding outside.

    The center voxel sits at local index ``size // 2`` on each axis, so an
    even-sized cube takes ``size // 2`` voxels below the center and
    ``size // 2 - 1`` above. This one convention is shared by sampling and
    sliding-window reconstruction.
    """
    dims = values.shape
    for ax, (c, n) in enumerate(zip(center, dims)):
        if not 0 <= c < n:
            raise ValueError(f"center {tuple(center)} outside volume dims {dims} on axis {ax}")
    out = np.zeros((size, size, size), dtype=dtype)
    src_lo, src_hi, dst_lo, dst_hi = [], [], [], []
    for c, n in zip(center, dims):
        g0 = int(c) - size // 2
        s0, s1 = max(g0, 0), min(g0 + size, n)
        src_lo.append(s0)
        src_hi.append(s1)
        dst_lo.append(s0 - g0)
        dst_hi.append(s1 - g0)
    if all(hi > lo for lo, hi in zip(src_lo, src_hi)):
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = values[
            src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
        ]
    return out


def extract_voi(vol: Volume3, center, size: int = 32) -> np.ndarray:
    """Extract a zero-padded ``size``^3 patch channel centered on a voxel."""
    return extract_cube(vol.values, center, size, dtype=np.float32)
