"""Core data objects and file formats.

A 4D-STEM acquisition records a full convergent-beam electron
diffraction (CBED) pattern of K x L detector pixels at each of I x J
probe positions.  This module owns:

- the 4D intensity tensor and the real-space images and detector-plane
  filters derived from it,
- the linear forward map that contracts a filter against the tensor to
  produce a real-space image,
- assembly of the regression design matrix whose rows are vectorized
  CBED frames,
- the binary tensor and filter formats plus PGM and CSV image export.

Files store 32-bit floats (camera data is low precision); all solver
arithmetic runs in 64-bit floats.  The tensor layout is row-major in
(i, j, k, l) so one CBED frame is contiguous and a design-matrix row is
a straight copy.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import FormatError

_S4DM_MAGIC = b"S4DM"
_S4DM_VERSION = 1
_S4DM_HEADER = struct.Struct("<4s5I")  # magic, version, I, J, K, L
_F4DM_MAGIC = b"F4DM"
_F4DM_VERSION = 1
_F4DM_HEADER = struct.Struct("<4s3I")  # magic, version, K, L

# Frames are processed in fixed-size row chunks; the chunk size is a
# constant so that results cannot depend on memory or worker settings.
_CHUNK_ROWS = 4096

_DIMS_LIMIT = 1 << 40  # element-count guard against corrupt headers


@dataclass(frozen=True)
class Dataset4D:
    """4D intensity tensor D(i, j, k, l).

    Parameters
    ----------
    values : ndarray
        float32 array of shape (I, J, K, L), finite and non-negative.
        Scan position (i, j) indexes the first two axes, detector pixel
        (k, l) the last two.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 4:
            raise ValueError(f"expected 4 axes, got {v.ndim}")
        if any(d < 1 for d in v.shape):
            raise ValueError(f"degenerate dims {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("non-finite intensities")
        if v.min() < 0:
            raise ValueError("negative intensities")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def scan_dims(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def detector_dims(self) -> tuple[int, int]:
        return self.values.shape[2:]

    def frames(self) -> np.ndarray:
        """View of the tensor as (I*J, K*L): one row per CBED frame."""
        i, j, k, l = self.values.shape
        return self.values.reshape(i * j, k * l)


@dataclass(frozen=True)
class RealImage:
    """Real-space intensity image A(i, j) with finite float64 values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 2:
            raise ValueError(f"expected 2 axes, got {v.ndim}")
        if any(d < 1 for d in v.shape):
            raise ValueError(f"degenerate dims {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("non-finite image values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FilterImage:
    """Detector-plane filter F(k, l) with a geometry tag.

    The tag records how the filter was obtained: ``pixelated`` (free
    per-pixel weights), ``masked`` (weights zero outside an active pixel
    set), or ``segmented-expanded`` (piecewise-constant over detector
    segments).  The tag is informational; the weights alone define the
    forward map.
    """

    values: np.ndarray
    geometry: str = "pixelated"

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 2:
            raise ValueError(f"expected 2 axes, got {v.ndim}")
        if not np.isfinite(v).all():
            raise ValueError("non-finite filter weights")
        if self.geometry not in ("pixelated", "masked", "segmented-expanded"):
            raise ValueError(f"unknown geometry tag {self.geometry!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ScanRegion:
    """Half-open scan-coordinate rectangle [i0, i1) x [j0, j1)."""

    i0: int
    i1: int
    j0: int
    j1: int

    def __post_init__(self):
        if not (0 <= self.i0 < self.i1 and 0 <= self.j0 < self.j1):
            raise ValueError(f"empty or inverted region {self}")

    @property
    def dims(self) -> tuple[int, int]:
        return (self.i1 - self.i0, self.j1 - self.j0)

    @property
    def size(self) -> int:
        h, w = self.dims
        return h * w

    def check_within(self, scan_dims: tuple[int, int]) -> None:
        si, sj = scan_dims
        if self.i1 > si or self.j1 > sj:
            raise ValueError(f"region {self} exceeds scan dims {scan_dims}")

    def row_ids(self, scan_dims: tuple[int, int]) -> np.ndarray:
        """Flat scan indices of the region, row-major over the region."""
        self.check_within(scan_dims)
        _, sj = scan_dims
        ii = np.arange(self.i0, self.i1)
        jj = np.arange(self.j0, self.j1)
        return (ii[:, None] * sj + jj[None, :]).ravel()


def full_region(scan_dims: tuple[int, int]) -> ScanRegion:
    return ScanRegion(0, scan_dims[0], 0, scan_dims[1])


@dataclass(frozen=True)
class DesignMatrix:
    """Covariate matrix X whose rows are vectorized CBED frames.

    Parameters
    ----------
    values : ndarray
        float64 array of shape (n, p): n scan positions by p covariates.
    col_map : ndarray
        Length-p integer map from covariate index to detector pixel flat
        index (pixelated and masked geometries) or segment id
        (segmented geometry).  Always strictly increasing, hence a
        bijection onto the active covariate set.
    detector_dims : tuple
        (K, L) of the originating dataset.
    geometry : str
        ``pixelated``, ``masked``, or ``segmented``.
    """

    values: np.ndarray
    col_map: np.ndarray
    detector_dims: tuple[int, int]
    geometry: str = "pixelated"

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 2:
            raise ValueError(f"expected 2 axes, got {v.ndim}")
        cm = np.ascontiguousarray(np.asarray(self.col_map, dtype=np.int64))
        if cm.shape != (v.shape[1],):
            raise ValueError("column map length does not match column count")
        if cm.size > 1 and not (np.diff(cm) > 0).all():
            raise ValueError("column map is not strictly increasing")
        if self.geometry not in ("pixelated", "masked", "segmented"):
            raise ValueError(f"unknown design geometry {self.geometry!r}")
        v.setflags(write=False)
        cm.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "col_map", cm)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def vectorize(image: RealImage) -> np.ndarray:
    """Row-major flattening of an image into a float64 vector."""
    return np.array(image.values.ravel(), dtype=np.float64)


def devectorize(vector: np.ndarray, dims: tuple[int, int]) -> RealImage:
    """Inverse of :func:`vectorize` for the given (H, W)."""
    v = np.asarray(vector, dtype=np.float64)
    h, w = dims
    if v.ndim != 1 or v.size != h * w:
        raise ValueError(f"vector length {v.size} does not match dims {dims}")
    return RealImage(v.reshape(h, w))


def apply_filter(data: Dataset4D, filt: FilterImage,
                 region: ScanRegion | None = None) -> RealImage:
    """Contract a detector filter against the tensor over a scan region.

    output(i, j) = sum_k sum_l D(i, j, k, l) * F(k, l)

    Each output pixel is a float64 accumulation over one contiguous
    CBED frame in a fixed order, so results are independent of chunking
    and worker configuration.
    """
    if filt.dims != data.detector_dims:
        raise ValueError(
            f"filter dims {filt.dims} do not match detector {data.detector_dims}")
    if region is None:
        region = full_region(data.scan_dims)
    rows = region.row_ids(data.scan_dims)
    frames = data.frames()
    weights = np.ascontiguousarray(filt.values.ravel())
    out = np.empty(rows.size, dtype=np.float64)
    for lo in range(0, rows.size, _CHUNK_ROWS):
        sel = rows[lo:lo + _CHUNK_ROWS]
        chunk = frames[sel[0]:sel[-1] + 1] if _is_contiguous(sel) else frames[sel]
        _kernels.contract_frames(chunk, weights, out[lo:lo + sel.size])
    return devectorize(out, region.dims)


def _is_contiguous(ids: np.ndarray) -> bool:
    return ids.size > 0 and ids[-1] - ids[0] + 1 == ids.size


def assemble_design(data: Dataset4D, region: ScanRegion,
                    geometry=None) -> DesignMatrix:
    """Build the regression design matrix for a scan region.

    Row order is row-major over the region.  ``geometry`` selects the
    covariate set:

    - ``None`` or ``"pixelated"``: every detector pixel, p = K*L,
      identity column map;
    - a detector mask (object with boolean ``flags``): only active
      pixels, masked pixels are dropped from the columns entirely
      (equivalent to zeroing them, but the sweeps get faster);
    - a segment map (object with integer ``labels``): delegates to
      ``detector.reduce_to_segments``, p = M.
    """
    region.check_within(data.scan_dims)
    rows = region.row_ids(data.scan_dims)
    frames = data.frames()
    k, l = data.detector_dims

    if geometry is None or (isinstance(geometry, str) and geometry == "pixelated"):
        values = frames[rows].astype(np.float64)
        col_map = np.arange(k * l, dtype=np.int64)
        return DesignMatrix(values, col_map, (k, l), "pixelated")

    if hasattr(geometry, "labels"):
        from . import detector
        pixelated = assemble_design(data, region, None)
        return detector.reduce_to_segments(pixelated, geometry)

    if hasattr(geometry, "flags"):
        if tuple(geometry.dims) != (k, l):
            raise ValueError(
                f"mask dims {tuple(geometry.dims)} do not match detector {(k, l)}")
        cols = np.flatnonzero(geometry.flags.ravel()).astype(np.int64)
        values = frames[np.ix_(rows, cols)].astype(np.float64)
        return DesignMatrix(values, cols, (k, l), "masked")

    raise ValueError(f"unsupported geometry {geometry!r}")


def filter_from_weights(weights: np.ndarray, col_map: np.ndarray,
                        detector_dims: tuple[int, int],
                        geometry: str = "pixelated") -> FilterImage:
    """Place covariate weights back onto the detector grid.

    Pixels outside the column map (masked-off covariates) get weight 0,
    which reproduces the convention that dropping a column and pinning
    its weight at zero are the same model.
    """
    k, l = detector_dims
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (col_map.size,):
        raise ValueError("weight length does not match column map")
    full = np.zeros(k * l, dtype=np.float64)
    full[np.asarray(col_map, dtype=np.int64)] = w
    tag = "pixelated" if geometry == "pixelated" else "masked"
    return FilterImage(full.reshape(k, l), tag)


# ---------------------------------------------------------------------------
# binary tensor format
# ---------------------------------------------------------------------------

def _atomic_write(path: str, writer) -> None:
    """Write via a temp file in the same directory, then rename."""
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def store_s4dm(data: Dataset4D, path: str) -> None:
    """Write a tensor: 24-byte header then float32 LE payload.

    Header: magic "S4DM", version u32 = 1, then I, J, K, L as u32, all
    little-endian.  Payload is row-major in (i, j, k, l).
    """
    i, j, k, l = data.dims

    def writer(f):
        f.write(_S4DM_HEADER.pack(_S4DM_MAGIC, _S4DM_VERSION, i, j, k, l))
        f.write(np.ascontiguousarray(data.values, dtype="<f4").tobytes())

    _atomic_write(path, writer)


def _read_s4dm_header(f, path: str) -> tuple[int, int, int, int]:
    head = f.read(_S4DM_HEADER.size)
    if len(head) < _S4DM_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, i, j, k, l = _S4DM_HEADER.unpack(head)
    if magic != _S4DM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {_S4DM_MAGIC!r}")
    if version != _S4DM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dims = (i, j, k, l)
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: degenerate dims {dims}")
    if i * j * k * l > _DIMS_LIMIT:
        raise FormatError(f"{path}: dims overflow {dims}")
    return dims


def _check_s4dm_payload(path: str, dims: tuple[int, int, int, int]) -> None:
    i, j, k, l = dims
    expected = _S4DM_HEADER.size + i * j * k * l * 4
    actual = os.path.getsize(path)
    if actual < expected:
        raise FormatError(
            f"{path}: truncated payload, {actual} bytes < expected {expected}")
    if actual > expected:
        raise FormatError(
            f"{path}: trailing bytes, {actual} bytes > expected {expected}")


def load_s4dm(path: str) -> Dataset4D:
    """Read a tensor file; the store/load round-trip is bit-exact."""
    with open(path, "rb") as f:
        dims = _read_s4dm_header(f, path)
        _check_s4dm_payload(path, dims)
        count = dims[0] * dims[1] * dims[2] * dims[3]
        payload = np.fromfile(f, dtype="<f4", count=count)
    try:
        return Dataset4D(payload.reshape(dims))
    except ValueError as e:
        raise FormatError(f"{path}: invalid intensities ({e})") from e


def open_s4dm_frames(path: str) -> tuple[tuple[int, int, int, int], np.ndarray]:
    """Memory-map a tensor file as (I*J, K*L) frames without loading it.

    Used by the out-of-core solver path; the mapped values are the same
    bytes :func:`load_s4dm` would return.
    """
    with open(path, "rb") as f:
        dims = _read_s4dm_header(f, path)
    _check_s4dm_payload(path, dims)
    i, j, k, l = dims
    frames = np.memmap(path, dtype="<f4", mode="r",
                       offset=_S4DM_HEADER.size, shape=(i * j, k * l))
    return dims, frames


# ---------------------------------------------------------------------------
# filter format
# ---------------------------------------------------------------------------

def store_filter(filt: FilterImage, path: str) -> None:
    """Write a filter: 16-byte header (magic "F4DM", version, K, L as
    little-endian u32) then K*L float32 LE weights, row-major."""
    k, l = filt.dims

    def writer(f):
        f.write(_F4DM_HEADER.pack(_F4DM_MAGIC, _F4DM_VERSION, k, l))
        f.write(np.ascontiguousarray(filt.values, dtype="<f4").tobytes())

    _atomic_write(path, writer)


def load_filter(path: str) -> FilterImage:
    """Read a filter file written by :func:`store_filter`."""
    with open(path, "rb") as f:
        head = f.read(_F4DM_HEADER.size)
        if len(head) < _F4DM_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, k, l = _F4DM_HEADER.unpack(head)
        if magic != _F4DM_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_F4DM_MAGIC!r}")
        if version != _F4DM_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if k < 1 or l < 1 or k * l > _DIMS_LIMIT:
            raise FormatError(f"{path}: bad dims ({k}, {l})")
        expected = _F4DM_HEADER.size + k * l * 4
        actual = os.path.getsize(path)
        if actual != expected:
            raise FormatError(
                f"{path}: payload size {actual} bytes, expected {expected}")
        payload = np.fromfile(f, dtype="<f4", count=k * l)
    if not np.isfinite(payload).all():
        raise FormatError(f"{path}: non-finite weights")
    return FilterImage(payload.astype(np.float64).reshape(k, l))


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------

def export_image(image: RealImage, fmt: str, path: str) -> None:
    """Write an image as 16-bit PGM or full-precision CSV.

    pgm16 rescales min -> 0 and max -> 65535 (a constant image maps to
    all zeros, a declared convention for the degenerate range).  csv
    writes one image row per line with enough digits that re-import
    reproduces every float64 exactly.
    """
    if fmt == "pgm16":
        v = image.values
        lo, hi = v.min(), v.max()
        if hi > lo:
            scaled = np.rint((v - lo) * (65535.0 / (hi - lo)))
            samples = np.clip(scaled, 0, 65535).astype(">u2")
        else:
            samples = np.zeros(v.shape, dtype=">u2")
        h, w = image.dims

        def writer(f):
            f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            f.write(samples.tobytes())

        _atomic_write(path, writer)
    elif fmt == "csv":
        def writer(f):
            for row in image.values:
                f.write((",".join(f"{x:.17g}" for x in row) + "\n").encode("ascii"))

        _atomic_write(path, writer)
    else:
        raise ValueError(f"unknown image format {fmt!r}")


def load_image_csv(path: str) -> RealImage:
    """Read a CSV image grid written by :func:`export_image`."""
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{path}: malformed CSV ({e})") from e
    if values.size == 0:
        raise FormatError(f"{path}: empty CSV image")
    return RealImage(values)


def load_pgm16(path: str) -> RealImage:
    """Read a 16-bit binary PGM written by :func:`export_image`."""
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 65535:
        raise FormatError(f"{path}: expected maxval 65535, got {maxval}")
    samples = np.frombuffer(blob, dtype=">u2", offset=pos, count=h * w)
    if samples.size < h * w:
        raise FormatError(f"{path}: truncated PGM payload")
    return RealImage(samples.astype(np.float64).reshape(h, w))
