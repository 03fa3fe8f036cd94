"""Synthetic training targets and planted-truth 4D datasets.

Training targets cover the qualitative families used to probe the
estimator: a high-resolution honeycomb lattice rendering, random atom
sites, concentric rings, rasterized text, complements, and single
sub-lattices.

The accompanying 4D datasets come from a declared LINEAR forward model,
not a physical scattering simulation.  Each CBED frame is

    D(i, j, k, l) = bf * disk(k, l)
                  + sum_c gain_c(i, j) * bump_c(k, l)
                  + sum_t ctex_t(i, j) * tex_t(k, l)
                  + noise(i, j, k, l),   clamped at 0,

where gain_c is a Gaussian proximity field around the lattice sites of
class c (sub-lattice A, sub-lattice B, dopant), bump_c is a smooth
per-class response confined to the bright-field disk, and the optional
texture terms add seeded low-rank detector structure so that noiseless
designs still carry column diversity.  The planted filter w* is drawn
once, and the ground-truth image is computed from the stored float32
tensor by the same contraction the estimator inverts, so dataset,
ground truth, and w* satisfy the linear filter relation exactly, noise
included.

The linearity is the point: the statistical claims under test
(fit, validate, overfit) become oracle-checkable.  No physical
fidelity is claimed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .datamodel import Dataset4D, FilterImage, RealImage, ScanRegion, \
    apply_filter, full_region
from .detector import BFDisk

# Synthetic frames are generated in fixed-size scan-row chunks so that
# the noise stream and the stored bytes never depend on memory or
# worker settings.
_GEN_CHUNK = 512

# 5x7 bitmap font, one int per row, bit 4 = leftmost column.
_FONT = {
    "A": (0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001),
    "B": (0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110),
    "C": (0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110),
    "D": (0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100),
    "E": (0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111),
    "F": (0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000),
    "G": (0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111),
    "H": (0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001),
    "I": (0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110),
    "J": (0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100),
    "K": (0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001),
    "L": (0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111),
    "M": (0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001),
    "N": (0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001),
    "O": (0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110),
    "P": (0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000),
    "Q": (0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101),
    "R": (0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001),
    "S": (0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110),
    "T": (0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100),
    "U": (0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110),
    "V": (0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100),
    "W": (0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010),
    "X": (0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001),
    "Y": (0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100),
    "Z": (0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111),
    "0": (0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110),
    "1": (0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110),
    "2": (0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111),
    "3": (0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110),
    "4": (0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010),
    "5": (0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110),
    "6": (0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110),
    "7": (0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000),
    "8": (0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110),
    "9": (0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100),
    " ": (0, 0, 0, 0, 0, 0, 0),
}


@dataclass(frozen=True)
class LatticeSpec:
    """Honeycomb lattice rendered in scan coordinates.

    a is the lattice constant in scan pixels; the two sub-lattices A
    and B sit at the standard honeycomb basis offsets (nearest-neighbor
    distance a / sqrt(3)).  Atom peaks are Gaussians of width sigma and
    the given amplitude.  An optional dopant boosts one site's
    amplitude by a multiplier > 1, imitating a heavier substitutional
    atom; the dopant site is indexed into the deterministic site
    enumeration for the rendered dims.
    """

    a: float = 12.0
    sigma: float = 1.6
    amplitude: float = 1.0
    dopant: tuple[int, float] | None = None

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError(f"lattice constant must be positive, got {self.a}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.dopant is not None:
            idx, mult = self.dopant
            if mult <= 1:
                raise ValueError(
                    f"dopant amplitude multiplier must exceed 1, got {mult}")
            if idx < 0:
                raise ValueError(f"dopant site index must be >= 0, got {idx}")


@dataclass(frozen=True)
class Site:
    y: float
    x: float
    basis: str        # "A" or "B"
    class_id: int     # 0 = A, 1 = B, 2 = dopant
    amplitude: float


def enumerate_sites(lattice: LatticeSpec, dims: tuple[int, int]) -> list[Site]:
    """Deterministic site list for a lattice rendered at the given dims.

    Sites are ordered by (cell row, cell column, basis) and include a
    3-sigma margin beyond the image edges so boundary peaks render
    smoothly.  The dopant, when configured, replaces the site at its
    index with a boosted-amplitude class-2 site.
    """
    h, w = dims
    a = lattice.a
    margin = 3.0 * lattice.sigma + 1.0
    # lattice vectors in (y, x): a1 along x, a2 at 60 degrees
    a1 = (0.0, a)
    a2 = (a * np.sqrt(3.0) / 2.0, a * 0.5)
    basis = {"A": (0.0, 0.0),
             "B": ((a1[0] + a2[0]) / 3.0, (a1[1] + a2[1]) / 3.0)}
    origin = (a * 0.5, a * 0.5)

    sites = []
    i1_lo = int(np.floor((-margin - origin[0] - basis["B"][0]) / a2[0]))
    i1_hi = int(np.ceil((h + margin - origin[0]) / a2[0]))
    for i1 in range(i1_lo, i1_hi + 1):
        x_base = origin[1] + i1 * a2[1]
        i2_lo = int(np.floor((-margin - x_base - basis["B"][1]) / a1[1]))
        i2_hi = int(np.ceil((w + margin - x_base) / a1[1]))
        for i2 in range(i2_lo, i2_hi + 1):
            for b in ("A", "B"):
                by, bx = basis[b]
                y = origin[0] + i1 * a2[0] + by
                x = x_base + i2 * a + bx
                if -margin <= y <= h + margin and -margin <= x <= w + margin:
                    sites.append(Site(y, x, b, 0 if b == "A" else 1,
                                      lattice.amplitude))
    if not sites:
        raise ValueError("zero sites: lattice constant too large for dims")

    if lattice.dopant is not None:
        idx, mult = lattice.dopant
        if idx >= len(sites):
            raise ValueError(
                f"dopant site index {idx} out of range ({len(sites)} sites)")
        s = sites[idx]
        sites[idx] = Site(s.y, s.x, s.basis, 2, s.amplitude * mult)
    return sites


def _render_sites(sites, dims, sigma) -> np.ndarray:
    h, w = dims
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    img = np.zeros((h, w), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for s in sites:
        img += s.amplitude * np.exp(-((yy - s.y) ** 2 + (xx - s.x) ** 2) * inv)
    return img


@dataclass(frozen=True)
class PatternSpec:
    """One training-target variant.

    Build with the classmethods; site-based variants carry their
    LatticeSpec.  Nested complements collapse structurally, so the
    complement of a complement is the original pattern, bit for bit.
    """

    kind: str
    lattice: LatticeSpec | None = None
    count: int | None = None
    seed: int | None = None
    spacing: float | None = None
    text: str | None = None
    sub: str | None = None
    sigma: float = 1.5
    inner: "PatternSpec | None" = None

    def __post_init__(self):
        kinds = ("lattice", "random_sites", "rings", "text", "complement",
                 "sublattice")
        if self.kind not in kinds:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.kind in ("lattice", "sublattice") and self.lattice is None:
            raise ValueError(f"{self.kind} pattern needs a lattice spec")
        if self.kind == "random_sites":
            if self.count is None or self.count < 1:
                raise ValueError("random_sites needs count >= 1")
            if self.seed is None:
                raise ValueError("random_sites needs a seed")
        if self.kind == "rings" and (self.spacing is None or self.spacing <= 0):
            raise ValueError("rings needs spacing > 0")
        if self.kind == "text" and not self.text:
            raise ValueError("text pattern needs a non-empty string")
        if self.kind == "sublattice" and self.sub not in ("A", "B"):
            raise ValueError("sublattice needs sub = 'A' or 'B'")
        if self.kind == "complement" and self.inner is None:
            raise ValueError("complement needs an inner pattern")

    @classmethod
    def lattice_highres(cls, lattice: LatticeSpec) -> "PatternSpec":
        return cls(kind="lattice", lattice=lattice)

    @classmethod
    def random_sites(cls, count: int, seed: int, sigma: float = 1.5) -> "PatternSpec":
        return cls(kind="random_sites", count=count, seed=seed, sigma=sigma)

    @classmethod
    def rings(cls, spacing: float) -> "PatternSpec":
        return cls(kind="rings", spacing=spacing)

    @classmethod
    def glyph_text(cls, text: str) -> "PatternSpec":
        return cls(kind="text", text=text)

    @classmethod
    def complement_of(cls, inner: "PatternSpec") -> "PatternSpec":
        if inner.kind == "complement":
            return inner.inner  # double complement is the identity
        return cls(kind="complement", inner=inner)

    @classmethod
    def sublattice(cls, lattice: LatticeSpec, sub: str) -> "PatternSpec":
        return cls(kind="sublattice", lattice=lattice, sub=sub)


def _render_text(text: str, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    glyphs = []
    for ch in text.upper():
        if ch not in _FONT:
            raise ValueError(f"no glyph for character {ch!r}")
        glyphs.append(_FONT[ch])
    gw = 6 * len(glyphs) - 1
    scale = min((w - 2) // gw, (h - 2) // 7)
    if scale < 1:
        raise ValueError(f"text {text!r} wider than image dims {dims}")
    img = np.zeros((h, w), dtype=np.float64)
    y0 = (h - 7 * scale) // 2
    x0 = (w - gw * scale) // 2
    for ci, rows in enumerate(glyphs):
        for ry, bits in enumerate(rows):
            for cx in range(5):
                if bits & (1 << (4 - cx)):
                    ys = y0 + ry * scale
                    xs = x0 + (ci * 6 + cx) * scale
                    img[ys:ys + scale, xs:xs + scale] = 1.0
    if img.max() == 0:
        raise ValueError("text target is blank")
    return img


def gen_training_image(spec: PatternSpec, dims: tuple[int, int]) -> RealImage:
    """Render a training target, normalized into [0, 1].

    Site-based patterns render Gaussians of the lattice's width at the
    lattice sites; the sigma is small relative to the lattice constant,
    so nearest-neighbor peaks stay separated (a deliberately higher
    resolution than any filter output can reach).  Sub-lattice images
    share the full lattice's normalization constant, so the A and B
    images sum elementwise to the full lattice image.  The complement
    is (max - image); complementing twice returns the original exactly.
    """
    if spec.kind == "complement":
        if spec.inner.kind == "complement":
            return gen_training_image(spec.inner.inner, dims)
        inner = gen_training_image(spec.inner, dims).values
        return RealImage(inner.max() - inner)

    if spec.kind in ("lattice", "sublattice"):
        sites = enumerate_sites(spec.lattice, dims)
        full = _render_sites(sites, dims, spec.lattice.sigma)
        peak = full.max()
        if peak <= 0:
            raise ValueError("zero sites: nothing rendered")
        if spec.kind == "lattice":
            return RealImage(full / peak)
        subset = [s for s in sites if s.basis == spec.sub]
        if not subset:
            raise ValueError(f"zero sites on sub-lattice {spec.sub}")
        return RealImage(_render_sites(subset, dims, spec.lattice.sigma) / peak)

    if spec.kind == "random_sites":
        h, w = dims
        rng = np.random.default_rng(spec.seed)
        ys = rng.uniform(0, h, spec.count)
        xs = rng.uniform(0, w, spec.count)
        sites = [Site(float(y), float(x), "A", 0, 1.0) for y, x in zip(ys, xs)]
        img = _render_sites(sites, dims, spec.sigma)
        peak = img.max()
        if peak <= 0:
            raise ValueError("zero sites: nothing rendered")
        return RealImage(img / peak)

    if spec.kind == "rings":
        h, w = dims
        yy = np.arange(h, dtype=np.float64)[:, None] - (h - 1) / 2.0
        xx = np.arange(w, dtype=np.float64)[None, :] - (w - 1) / 2.0
        dist = np.sqrt(yy ** 2 + xx ** 2)
        img = 0.5 * (1.0 + np.cos(2.0 * np.pi * dist / spec.spacing))
        return RealImage(img / img.max())

    if spec.kind == "text":
        return RealImage(_render_text(spec.text, dims))

    raise ValueError(f"unknown pattern kind {spec.kind!r}")


@dataclass(frozen=True)
class TruthSpec:
    """Seeded sparse planted filter: s standard-normal weights placed
    uniformly at random over the allowed support ("all" pixels or
    "disk" interior)."""

    s: int = 20
    seed: int = 7
    support: str = "all"
    scale: float = 1.0

    def __post_init__(self):
        if self.s < 1:
            raise ValueError(f"need s >= 1 nonzeros, got {self.s}")
        if self.support not in ("all", "disk"):
            raise ValueError(f"support must be 'all' or 'disk', got {self.support!r}")


@dataclass(frozen=True)
class ForwardModelSpec:
    """Declared linear CBED model for one dataset.

    bf_amplitude scales the constant bright-field disk indicator.
    Per-class response bumps are Gaussians of width bump_sigma (default
    radius/3) centered at radius/2 from the disk center, confined to
    the disk interior.  proximity_sigma (default: the lattice sigma)
    sets the scan-side Gaussian reach of each site; using the lattice
    sigma makes the rendered lattice targets exactly representable by a
    detector filter.  texture_rank adds that many seeded random
    detector patterns modulated by smooth scan fields, giving noiseless
    designs full column diversity.  Noise is Gaussian with noise_sigma,
    or derived from snr_db against the noiseless signal power.
    truth_weights, when given, overrides the sampled TruthSpec filter.
    """

    detector_dims: tuple[int, int]
    disk: BFDisk
    bf_amplitude: float = 1.0
    bump_sigma: float | None = None
    bump_amplitude: float = 1.0
    proximity_sigma: float | None = None
    truth: TruthSpec = field(default_factory=TruthSpec)
    truth_weights: np.ndarray | None = None
    texture_rank: int = 0
    texture_amplitude: float = 0.02
    texture_seed: int = 101
    noise_sigma: float = 0.0
    snr_db: float | None = None
    noise_seed: int = 0

    def __post_init__(self):
        k, l = self.detector_dims
        if k < 1 or l < 1:
            raise ValueError(f"bad detector dims {(k, l)}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.texture_rank < 0:
            raise ValueError(f"texture rank must be >= 0, got {self.texture_rank}")
        if self.truth_weights is not None:
            w = np.ascontiguousarray(
                np.asarray(self.truth_weights, dtype=np.float64))
            if w.shape != (k, l):
                raise ValueError(
                    f"truth weights shape {w.shape} does not match detector {(k, l)}")
            if not np.isfinite(w).all():
                raise ValueError("non-finite truth weights")
            w.setflags(write=False)
            object.__setattr__(self, "truth_weights", w)


def _disk_indicator(dims, disk) -> np.ndarray:
    k, l = dims
    kc, lc = disk.center
    kk, ll = np.ogrid[0:k, 0:l]
    return ((kk - kc) ** 2 + (ll - lc) ** 2 <= disk.radius ** 2).astype(np.float64)


def _class_bumps(fm: ForwardModelSpec, n_classes: int) -> np.ndarray:
    k, l = fm.detector_dims
    kc, lc = fm.disk.center
    sigma = fm.bump_sigma if fm.bump_sigma is not None else fm.disk.radius / 3.0
    indicator = _disk_indicator((k, l), fm.disk)
    kk = np.arange(k, dtype=np.float64)[:, None]
    ll = np.arange(l, dtype=np.float64)[None, :]
    bumps = np.empty((n_classes, k * l), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for c in range(n_classes):
        theta = 2.0 * np.pi * c / 3.0
        bk = kc + 0.5 * fm.disk.radius * np.cos(theta)
        bl = lc + 0.5 * fm.disk.radius * np.sin(theta)
        g = np.exp(-((kk - bk) ** 2 + (ll - bl) ** 2) * inv)
        bumps[c] = (fm.bump_amplitude * g * indicator).ravel()
    return bumps


def _site_gains(sites, scan_dims, sigma, n_classes) -> np.ndarray:
    i, j = scan_dims
    yy = np.arange(i, dtype=np.float64)[:, None]
    xx = np.arange(j, dtype=np.float64)[None, :]
    gains = np.zeros((n_classes, i, j), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for s in sites:
        gains[s.class_id] += s.amplitude * np.exp(
            -((yy - s.y) ** 2 + (xx - s.x) ** 2) * inv)
    return gains.reshape(n_classes, i * j).T.copy()


def _texture(fm: ForwardModelSpec, scan_dims) -> tuple[np.ndarray, np.ndarray]:
    i, j = scan_dims
    n = i * j
    p = fm.detector_dims[0] * fm.detector_dims[1]
    t = fm.texture_rank
    if t == 0:
        return np.zeros((n, 0)), np.zeros((0, p))
    rng = np.random.default_rng(fm.texture_seed)
    # Zero-mean patterns: a shared positive mean would give every
    # detector column a common rank-1 component, which ruins the
    # conditioning of reduced (segment-summed) designs.
    patterns = fm.texture_amplitude * (2.0 * rng.random((t, p)) - 1.0)
    freqs = rng.uniform(0.5, 3.0, (t, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, t)
    ii = np.arange(i, dtype=np.float64)[:, None] / i
    jj = np.arange(j, dtype=np.float64)[None, :] / j
    gains = np.empty((n, t), dtype=np.float64)
    for s in range(t):
        f = np.cos(2.0 * np.pi * (freqs[s, 0] * ii + freqs[s, 1] * jj)
                   + phases[s])
        gains[:, s] = f.ravel()
    return gains, patterns


def _planted_filter(fm: ForwardModelSpec) -> FilterImage:
    k, l = fm.detector_dims
    if fm.truth_weights is not None:
        return FilterImage(fm.truth_weights)
    allowed = np.arange(k * l, dtype=np.int64)
    if fm.truth.support == "disk":
        allowed = np.flatnonzero(_disk_indicator((k, l), fm.disk).ravel() > 0)
        if allowed.size == 0:
            raise ValueError("disk support is empty on this detector")
    if fm.truth.s > allowed.size:
        raise ValueError(
            f"cannot place {fm.truth.s} nonzeros on {allowed.size} allowed pixels")
    rng = np.random.default_rng(fm.truth.seed)
    idx = rng.choice(allowed, size=fm.truth.s, replace=False)
    vals = fm.truth.scale * rng.standard_normal(fm.truth.s)
    w = np.zeros(k * l, dtype=np.float64)
    w[idx] = vals
    return FilterImage(w.reshape(k, l))


def _build_tensor(base, gains, bumps, tex_gains, tex_patterns, sigma, seed,
                  scan_dims, detector_dims) -> np.ndarray:
    n = scan_dims[0] * scan_dims[1]
    p = detector_dims[0] * detector_dims[1]
    frames = np.empty((n, p), dtype=np.float32)
    rng = np.random.default_rng(seed)
    zero_chunk = np.zeros((min(_GEN_CHUNK, n), p), dtype=np.float64)
    for lo in range(0, n, _GEN_CHUNK):
        m = min(_GEN_CHUNK, n - lo)
        if sigma > 0:
            noise = sigma * rng.standard_normal((m, p))
        else:
            noise = zero_chunk[:m]
        _kernels.build_frames(base, gains[lo:lo + m], bumps,
                              tex_gains[lo:lo + m], tex_patterns, noise,
                              frames[lo:lo + m])
    return frames.reshape(scan_dims[0], scan_dims[1], *detector_dims)


def gen_synthetic_4d(lattice: LatticeSpec, fm: ForwardModelSpec,
                     scan_dims: tuple[int, int]
                     ) -> tuple[Dataset4D, RealImage, FilterImage]:
    """Generate a dataset, its ground-truth image, and the planted filter.

    The ground truth is computed from the generated (noisy, clamped,
    float32-stored) tensor by the same filter contraction the estimator
    inverts, so the returned triple satisfies the linear model with
    zero residual by construction.
    """
    i, j = scan_dims
    if i < 1 or j < 1:
        raise ValueError(f"bad scan dims {scan_dims}")
    k, l = fm.detector_dims

    sites = enumerate_sites(lattice, scan_dims)
    n_classes = 3 if any(s.class_id == 2 for s in sites) else 2
    prox_sigma = (fm.proximity_sigma if fm.proximity_sigma is not None
                  else lattice.sigma)

    base = (fm.bf_amplitude * _disk_indicator((k, l), fm.disk)).ravel()
    gains = _site_gains(sites, scan_dims, prox_sigma, n_classes)
    bumps = _class_bumps(fm, n_classes)
    tex_gains, tex_patterns = _texture(fm, scan_dims)

    sigma = fm.noise_sigma
    if fm.snr_db is not None:
        clean = _build_tensor(base, gains, bumps, tex_gains, tex_patterns,
                              0.0, fm.noise_seed, scan_dims, (k, l))
        rms = float(np.sqrt(np.mean(
            clean.astype(np.float64, copy=False) ** 2, dtype=np.float64)))
        sigma = rms / (10.0 ** (fm.snr_db / 20.0))

    tensor = _build_tensor(base, gains, bumps, tex_gains, tex_patterns,
                           sigma, fm.noise_seed, scan_dims, (k, l))
    data = Dataset4D(tensor)
    wstar = _planted_filter(fm)
    truth = apply_filter(data, wstar, full_region(scan_dims))
    return data, truth, wstar


# line-oriented key=value settings understood by build_specs
_SPEC_KEYS = {
    "scan.i": int, "scan.j": int,
    "detector.k": int, "detector.l": int,
    "disk.center_k": float, "disk.center_l": float, "disk.radius": float,
    "lattice.a": float, "lattice.sigma": float, "lattice.amplitude": float,
    "lattice.dopant_site": int, "lattice.dopant_boost": float,
    "bf.amplitude": float,
    "bump.sigma": float, "bump.amplitude": float,
    "proximity.sigma": float,
    "texture.rank": int, "texture.amplitude": float, "texture.seed": int,
    "truth.s": int, "truth.seed": int, "truth.support": str,
    "truth.scale": float,
    "noise.sigma": float, "noise.snr_db": float, "noise.seed": int,
}


def parse_spec_items(lines) -> dict:
    """Parse key=value lines (blank lines and # comments ignored)."""
    from .errors import UsageError
    items = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SPEC_KEYS:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        try:
            items[key] = _SPEC_KEYS[key](value)
        except ValueError as e:
            raise UsageError(f"line {lineno}: bad value for {key}: {e}") from e
    return items


def load_spec_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_spec_items(f)


def set_spec_item(items: dict, assignment: str) -> None:
    """Apply one key=value override (the CLI --set flag)."""
    from .errors import UsageError
    if "=" not in assignment:
        raise UsageError(f"expected key=value, got {assignment!r}")
    key, _, value = assignment.partition("=")
    key, value = key.strip(), value.strip()
    if key not in _SPEC_KEYS:
        raise UsageError(f"unknown key {key!r}")
    try:
        items[key] = _SPEC_KEYS[key](value)
    except ValueError as e:
        raise UsageError(f"bad value for {key}: {e}") from e


def build_specs(items: dict) -> tuple[LatticeSpec, ForwardModelSpec,
                                      tuple[int, int]]:
    """Construct (lattice, forward model, scan dims) from key=value items.

    Defaults give a desk-scale dataset: 64 x 64 scan, 64 x 64 detector,
    centered disk of radius 0.22 min(K, L), a = 12 lattice, sparse
    20-pixel truth, no texture, no noise.
    """
    from .errors import UsageError
    unknown = set(items) - set(_SPEC_KEYS)
    if unknown:
        raise UsageError(f"unknown keys {sorted(unknown)}")

    scan = (items.get("scan.i", 64), items.get("scan.j", 64))
    det = (items.get("detector.k", 64), items.get("detector.l", 64))
    center = (items.get("disk.center_k", det[0] / 2.0),
              items.get("disk.center_l", det[1] / 2.0))
    radius = items.get("disk.radius", 0.22 * min(det))
    disk = BFDisk(center, radius)

    dopant = None
    if "lattice.dopant_site" in items or "lattice.dopant_boost" in items:
        if not ("lattice.dopant_site" in items and "lattice.dopant_boost" in items):
            raise UsageError(
                "lattice.dopant_site and lattice.dopant_boost go together")
        dopant = (items["lattice.dopant_site"], items["lattice.dopant_boost"])
    lattice = LatticeSpec(
        a=items.get("lattice.a", 12.0),
        sigma=items.get("lattice.sigma", 1.6),
        amplitude=items.get("lattice.amplitude", 1.0),
        dopant=dopant,
    )

    fm = ForwardModelSpec(
        detector_dims=det,
        disk=disk,
        bf_amplitude=items.get("bf.amplitude", 1.0),
        bump_sigma=items.get("bump.sigma"),
        bump_amplitude=items.get("bump.amplitude", 1.0),
        proximity_sigma=items.get("proximity.sigma"),
        truth=TruthSpec(
            s=items.get("truth.s", 20),
            seed=items.get("truth.seed", 7),
            support=items.get("truth.support", "all"),
            scale=items.get("truth.scale", 1.0),
        ),
        texture_rank=items.get("texture.rank", 0),
        texture_amplitude=items.get("texture.amplitude", 0.02),
        texture_seed=items.get("texture.seed", 101),
        noise_sigma=items.get("noise.sigma", 0.0),
        snr_db=items.get("noise.snr_db"),
        noise_seed=items.get("noise.seed", 0),
    )
    return lattice, fm, scan


def split_region(scan_dims: tuple[int, int], fraction: float | None = None,
                 rows: int | None = None) -> tuple[ScanRegion, ScanRegion]:
    """Split the scan into a top training block and bottom test block.

    Give either a training fraction of the rows or an explicit training
    row count.  Both regions span the full scan width, are disjoint,
    and cover the scan; an empty side is an error.
    """
    i, j = scan_dims
    if (fraction is None) == (rows is None):
        raise ValueError("give exactly one of fraction or rows")
    if rows is None:
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"fraction must be in (0, 1), got {fraction}")
        rows = int(np.floor(i * fraction))
    if not 0 < rows < i:
        raise ValueError(f"split at {rows} rows leaves an empty region "
                         f"for scan dims {scan_dims}")
    return ScanRegion(0, rows, 0, j), ScanRegion(rows, i, 0, j)
