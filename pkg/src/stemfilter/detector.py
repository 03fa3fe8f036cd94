"""Detector-plane geometry.

Estimates the bright-field (BF) disk from a dataset, builds
interior/exterior pixel masks, partitions the disk into ring x sector
segments such as a segmented electron detector would record, reduces a
pixelated design matrix to per-segment integrated columns, and expands
segment weights back to a per-pixel filter.

Pixel membership everywhere uses a center-of-pixel test: pixel (k, l)
belongs to the disk iff (k - kc)^2 + (l - lc)^2 <= rho^2.  There is no
anti-aliasing of partial pixels, so masks and segment maps partition the
detector exactly and all derived identities hold without tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import Dataset4D, DesignMatrix, FilterImage, _atomic_write

# The radial profile's central plateau spans radii up to this fraction
# of the detector half-width; the disk edge is where the profile first
# drops below half the plateau mean.
_PLATEAU_FRACTION = 0.2
_EDGE_THRESHOLD = 0.5


@dataclass(frozen=True)
class BFDisk:
    """Bright-field disk: center (kc, lc) in detector pixels, radius rho."""

    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        kc, lc = self.center
        if not (np.isfinite(kc) and np.isfinite(lc) and np.isfinite(self.radius)):
            raise ValueError("non-finite disk parameters")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class DetectorMask:
    """Boolean pixel mask; True marks an active (kept) pixel."""

    flags: np.ndarray

    def __post_init__(self):
        f = np.ascontiguousarray(np.asarray(self.flags, dtype=bool))
        if f.ndim != 2:
            raise ValueError(f"expected 2 axes, got {f.ndim}")
        if not f.any():
            raise ValueError("mask has no active pixels")
        f.setflags(write=False)
        object.__setattr__(self, "flags", f)

    @property
    def dims(self) -> tuple[int, int]:
        return self.flags.shape

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.flags))


@dataclass(frozen=True)
class SegmentMap:
    """Ring x sector partition of the BF disk interior.

    labels[k, l] is the segment id in [0, M) for interior pixels and -1
    outside the disk.  Segment id = ring * sectors + sector, rings
    counted outward from the center, sector 0 starting at angle 0 along
    the +k axis and increasing counter-clockwise.
    """

    labels: np.ndarray
    rings: int
    sectors: int
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if lab.ndim != 2:
            raise ValueError(f"expected 2 axes, got {lab.ndim}")
        m = self.rings * self.sectors
        if lab.min() < -1 or lab.max() >= m:
            raise ValueError("segment label out of range")
        counts = np.bincount(lab[lab >= 0].ravel(), minlength=m)
        if (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            raise ValueError(f"segment {empty} is empty; dims too small for "
                             f"{self.rings}x{self.sectors} segmentation")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def dims(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def n_segments(self) -> int:
        return self.rings * self.sectors


def _mean_cbed(data: Dataset4D) -> np.ndarray:
    return np.mean(data.frames(), axis=0, dtype=np.float64).reshape(
        data.detector_dims)


def _pixel_distances(dims, center):
    k, l = dims
    kc, lc = center
    kk, ll = np.ogrid[0:k, 0:l]
    return np.sqrt((kk - kc) ** 2 + (ll - lc) ** 2)


def estimate_bf_disk(data: Dataset4D,
                     center: tuple[float, float] | None = None,
                     radius: float | None = None) -> BFDisk:
    """Locate the bright-field disk in the scan-averaged CBED pattern.

    The center is the intensity centroid of the mean CBED.  The radius
    is the smallest integer ring at which the azimuthally averaged
    radial profile falls below half its central-plateau mean, the
    plateau being radii up to 0.2 of the detector half-width.  Both
    estimates can be overridden by explicit values (for example when
    the disk parameters are known from the experiment).

    Both estimates are invariant under uniform intensity scaling.
    """
    if center is not None and radius is not None:
        return BFDisk((float(center[0]), float(center[1])), float(radius))

    mean = _mean_cbed(data)
    total = mean.sum()
    if total <= 0:
        raise ValueError("cannot estimate disk from an all-zero dataset")

    if center is None:
        k, l = mean.shape
        kk, ll = np.ogrid[0:k, 0:l]
        center = (float((mean * kk).sum() / total),
                  float((mean * ll).sum() / total))
    else:
        center = (float(center[0]), float(center[1]))

    if radius is None:
        dist = _pixel_distances(mean.shape, center)
        bins = np.floor(dist).astype(np.int64).ravel()
        weight_sums = np.bincount(bins, weights=mean.ravel())
        counts = np.bincount(bins)
        profile = weight_sums / np.maximum(counts, 1)
        plateau_end = int(_PLATEAU_FRACTION * min(mean.shape) / 2)
        plateau = profile[:plateau_end + 1].mean()
        below = np.flatnonzero(profile < _EDGE_THRESHOLD * plateau)
        radius = float(below[0]) if below.size else float(len(profile) - 1)
        if radius <= 0:
            raise ValueError("disk radius estimate collapsed to zero")

    return BFDisk(center, float(radius))


def mask_from_disk(disk: BFDisk, dims: tuple[int, int],
                   keep: str = "interior") -> DetectorMask:
    """Mask keeping either the disk interior or its exterior.

    A pixel is active iff (inside the disk) XOR (keep == "exterior"),
    so the two masks from one disk partition the detector exactly.
    """
    if keep not in ("interior", "exterior"):
        raise ValueError(f"keep must be 'interior' or 'exterior', got {keep!r}")
    inside = _pixel_distances(dims, disk.center) <= disk.radius
    flags = ~inside if keep == "exterior" else inside
    if not flags.any():
        raise ValueError(f"{keep} mask is empty for radius {disk.radius}")
    return DetectorMask(flags)


def build_segment_map(disk: BFDisk, dims: tuple[int, int],
                      segments: int | None = None,
                      rings: int | None = None,
                      sectors: int | None = None) -> SegmentMap:
    """Partition the disk interior into rings x sectors segments.

    Rings have equal radial width rho / rings; sectors have equal angle
    2*pi / sectors with sector 0 starting at angle 0 (the +k axis) and
    increasing counter-clockwise.  When only a total segment count M is
    given, the default split is 4 sectors by M/4 rings, the layout of
    common quadrant-style segmented detectors.
    """
    if rings is None and sectors is None:
        if segments is None:
            raise ValueError("give either segments or rings and sectors")
        if segments < 4 or segments % 4:
            raise ValueError(
                f"default layout needs a multiple of 4 segments, got {segments}")
        rings, sectors = segments // 4, 4
    elif rings is None or sectors is None:
        raise ValueError("give both rings and sectors, or neither")
    if rings < 1 or sectors < 1:
        raise ValueError(f"need rings >= 1 and sectors >= 1, got {rings}, {sectors}")
    if segments is not None and segments != rings * sectors:
        raise ValueError(
            f"segments={segments} inconsistent with {rings}x{sectors}")

    k, l = dims
    kc, lc = disk.center
    kk, ll = np.ogrid[0:k, 0:l]
    dk, dl = kk - kc, ll - lc
    dist = np.sqrt(dk ** 2 + dl ** 2)
    inside = dist <= disk.radius

    ring = np.minimum((dist / (disk.radius / rings)).astype(np.int64), rings - 1)
    angle = np.mod(np.arctan2(dl, dk), 2.0 * np.pi)
    sector = np.minimum((angle / (2.0 * np.pi / sectors)).astype(np.int64),
                        sectors - 1)
    labels = np.where(inside, ring * sectors + sector, -1)
    return SegmentMap(labels, rings, sectors, disk.center, disk.radius)


def reduce_to_segments(x: DesignMatrix, seg: SegmentMap) -> DesignMatrix:
    """Integrate pixelated design columns over each segment.

    Output column m is the row-wise sum of the input columns whose
    pixel label is m; label -1 (outside the disk) columns are dropped.
    """
    if x.geometry != "pixelated":
        raise ValueError(f"expected a pixelated design, got {x.geometry!r}")
    k, l = seg.dims
    if x.detector_dims != (k, l) or x.p != k * l:
        raise ValueError(
            f"design covers detector {x.detector_dims} with {x.p} columns, "
            f"segment map is {seg.dims}")
    labels = seg.labels.ravel()
    m = seg.n_segments
    values = np.empty((x.n, m), dtype=np.float64)
    for s in range(m):
        values[:, s] = x.values[:, np.flatnonzero(labels == s)].sum(axis=1)
    return DesignMatrix(values, np.arange(m, dtype=np.int64), (k, l), "segmented")


def expand_segment_filter(weights: np.ndarray, seg: SegmentMap) -> FilterImage:
    """Paint segment weights onto the detector grid.

    F(k, l) = weights[label(k, l)] on interior pixels, 0 outside, so
    applying the expanded filter to a dataset equals multiplying the
    segment-reduced design by the weights.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (seg.n_segments,):
        raise ValueError(
            f"expected {seg.n_segments} weights, got shape {w.shape}")
    values = np.where(seg.labels >= 0, w[np.maximum(seg.labels, 0)], 0.0)
    return FilterImage(values, "segmented-expanded")


def export_labels_csv(grid: np.ndarray, path: str) -> None:
    """Write an integer grid (mask flags or segment labels) as CSV."""
    arr = np.asarray(grid)
    rows = arr.astype(np.int64)

    def writer(f):
        for row in rows:
            f.write((",".join(str(int(v)) for v in row) + "\n").encode("ascii"))

    _atomic_write(path, writer)
