"""Command orchestration: synthesis, fitting, paths, validation.

One command is one process.  Every output file is written atomically,
all randomness is seeded, and the numerical kernels are sequential, so
a repeated run with the same inputs produces byte-identical outputs
regardless of worker or memory settings.

The design matrix is materialized in float64 when it fits in the
memory budget (default 4 GB); otherwise column blocks are streamed
from the tensor file each sweep, which is slower but arrives at the
same bytes, since the coordinate update sequence does not change.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import datamodel, detector, solver, synth
from .datamodel import (Dataset4D, FilterImage, RealImage, ScanRegion,
                        full_region)
from .errors import FormatError, NumericsError, UsageError

_DEFAULT_BUDGET = 4 * 1024 ** 3


def parse_bytes(text: str) -> int:
    """Parse a byte budget such as '4G', '512M', or a plain integer."""
    t = text.strip().upper()
    mult = 1
    for suffix, m in (("G", 1024 ** 3), ("M", 1024 ** 2), ("K", 1024)):
        if t.endswith(suffix):
            t, mult = t[:-1], m
            break
    try:
        value = int(float(t) * mult)
    except ValueError as e:
        raise UsageError(f"bad byte size {text!r}") from e
    if value < 1:
        raise UsageError(f"byte size must be positive, got {text!r}")
    return value


def parse_region(text: str) -> ScanRegion:
    """Parse 'i0:i1:j0:j1' into a scan region."""
    parts = text.split(":")
    if len(parts) != 4:
        raise UsageError(f"expected i0:i1:j0:j1, got {text!r}")
    try:
        i0, i1, j0, j1 = (int(p) for p in parts)
        return ScanRegion(i0, i1, j0, j1)
    except ValueError as e:
        raise UsageError(f"bad region {text!r}: {e}") from e


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True)
class ValidationRow:
    lam: float
    train_rmse: float
    test_rmse: float
    filling_ratio: float
    kkt_violation: float


@dataclass(frozen=True)
class ValidationReport:
    """Per-lambda train/test errors, ordered by descending lambda.

    The selected entry minimizes test RMSE (ties keep the largest
    lambda); the selection rule is explicit here because eyeballing the
    resolution-versus-discrepancy trade-off does not reproduce.
    """

    rows: tuple[ValidationRow, ...]
    selected_index: int

    def __post_init__(self):
        lams = [r.lam for r in self.rows]
        if any(b >= a for a, b in zip(lams, lams[1:])):
            raise ValueError("report lambdas must be strictly descending")
        if any(r.train_rmse < 0 or r.test_rmse < 0 for r in self.rows):
            raise ValueError("negative RMSE")
        if not 0 <= self.selected_index < len(self.rows):
            raise ValueError("selected index out of range")

    @property
    def selected(self) -> ValidationRow:
        return self.rows[self.selected_index]

    def write_csv(self, path: str) -> None:
        def writer(f):
            f.write(b"lambda,train_rmse,test_rmse,filling_ratio,"
                    b"kkt_violation,selected\n")
            for i, r in enumerate(self.rows):
                f.write((f"{r.lam:.17g},{r.train_rmse:.17g},{r.test_rmse:.17g},"
                         f"{r.filling_ratio:.17g},{r.kkt_violation:.17g},"
                         f"{int(i == self.selected_index)}\n").encode("ascii"))

        datamodel._atomic_write(path, writer)


def select_lambda(rows) -> int:
    best = 0
    for i, r in enumerate(rows):
        if r.test_rmse < rows[best].test_rmse:
            best = i
    return best


@dataclass(frozen=True)
class RunConfig:
    """Everything one fitting command needs.

    geometry is one of 'pixelated', 'mask:interior', 'mask:exterior',
    'segments:M', or 'segments:RxS'.  Train/test splitting takes either
    a row count or a fraction of scan rows; the training block is the
    top of the scan.
    """

    dataset: str
    target: str
    out_dir: str
    geometry: str = "pixelated"
    train_rows: int | None = None
    train_fraction: float | None = None
    disk_center: tuple[float, float] | None = None
    disk_radius: float | None = None
    enet: solver.ElasticNetConfig = field(default_factory=solver.ElasticNetConfig)
    path: solver.PathConfig = field(default_factory=solver.PathConfig)
    memory_budget: int = _DEFAULT_BUDGET
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise UsageError(f"workers must be >= 1, got {self.workers}")
        if self.memory_budget < 1:
            raise UsageError("memory budget must be positive")


class S4DMColumnSource:
    """Streams design-matrix column blocks from a tensor file.

    Each sweep re-reads the file one column block at a time; the block
    values and the coordinate update sequence match the in-memory
    design exactly, so fits are bitwise identical in both modes.
    """

    def __init__(self, path: str, rows: np.ndarray, cols: np.ndarray,
                 block_cols: int):
        dims, frames = datamodel.open_s4dm_frames(path)
        if rows.size and (rows.min() < 0 or rows.max() >= frames.shape[0]):
            raise ValueError("scan rows out of range for dataset")
        if cols.size and (cols.min() < 0 or cols.max() >= frames.shape[1]):
            raise ValueError("detector columns out of range for dataset")
        self._frames = frames
        self._rows = np.asarray(rows, dtype=np.int64)
        self._cols = np.asarray(cols, dtype=np.int64)
        self._block = max(1, int(block_cols))
        self.n = int(self._rows.size)
        self.p = int(self._cols.size)

    def blocks(self):
        for j0 in range(0, self.p, self._block):
            cols = self._cols[j0:j0 + self._block]
            block = np.asarray(self._frames[np.ix_(self._rows, cols)],
                               dtype=np.float64)
            yield j0, np.ascontiguousarray(block.T)


def _resolve_geometry(data: Dataset4D, config: RunConfig):
    """Return (mask, segment_map), at most one of them set."""
    g = config.geometry
    if g == "pixelated":
        return None, None
    needs_disk_args = {}
    if config.disk_center is not None:
        needs_disk_args["center"] = config.disk_center
    if config.disk_radius is not None:
        needs_disk_args["radius"] = config.disk_radius
    if g in ("mask:interior", "mask:exterior"):
        disk = detector.estimate_bf_disk(data, **needs_disk_args)
        return detector.mask_from_disk(disk, data.detector_dims,
                                       g.split(":")[1]), None
    if g.startswith("segments:"):
        spec = g.split(":", 1)[1]
        disk = detector.estimate_bf_disk(data, **needs_disk_args)
        try:
            if "x" in spec:
                r_txt, s_txt = spec.split("x")
                seg = detector.build_segment_map(disk, data.detector_dims,
                                                 rings=int(r_txt),
                                                 sectors=int(s_txt))
            else:
                seg = detector.build_segment_map(disk, data.detector_dims,
                                                 segments=int(spec))
        except ValueError as e:
            raise UsageError(f"bad geometry {g!r}: {e}") from e
        return None, seg
    raise UsageError(f"unknown geometry {g!r}")


def _load_target(path: str) -> RealImage:
    if path.endswith(".pgm"):
        return datamodel.load_pgm16(path)
    return datamodel.load_image_csv(path)


def _split(data: Dataset4D, config: RunConfig) -> tuple[ScanRegion, ScanRegion]:
    if config.train_rows is not None:
        return synth.split_region(data.scan_dims, rows=config.train_rows)
    fraction = 0.5 if config.train_fraction is None else config.train_fraction
    return synth.split_region(data.scan_dims, fraction=fraction)


def _region_values(image: RealImage, region: ScanRegion) -> np.ndarray:
    return image.values[region.i0:region.i1, region.j0:region.j1].ravel()


def _design_or_stream(data: Dataset4D, dataset_path: str, region: ScanRegion,
                      mask, seg, budget: int):
    """Build the training design, streaming from disk when it is too big.

    Returns (solver input, finalize) where finalize(weights) maps
    covariate weights back to a detector FilterImage.
    """
    k, l = data.detector_dims
    if seg is not None:
        x = datamodel.assemble_design(data, region, seg)
        return x, lambda w: detector.expand_segment_filter(w, seg)

    if mask is not None:
        cols = np.flatnonzero(mask.flags.ravel()).astype(np.int64)
        geometry_tag = "masked"
    else:
        cols = np.arange(k * l, dtype=np.int64)
        geometry_tag = "pixelated"

    def finalize(w):
        return datamodel.filter_from_weights(w, cols, (k, l), geometry_tag)

    n = region.size
    need = n * cols.size * 8 * 2  # design plus its transposed copy
    if need <= budget:
        return datamodel.assemble_design(data, region, mask), finalize
    rows = region.row_ids(data.scan_dims)
    block = max(256, budget // max(1, n * 8 * 4))
    source = S4DMColumnSource(dataset_path, rows, cols, block)
    return source, finalize


def _quantized(filt: FilterImage) -> FilterImage:
    """Round weights to stored (float32) precision.

    Reports are computed from the quantized filter so that recomputing
    them from the written files reproduces the same numbers.
    """
    return FilterImage(filt.values.astype(np.float32).astype(np.float64),
                       filt.geometry)


def run_path(config: RunConfig, trace: bool = False):
    """Fit a regularization path and validate each entry.

    Fits on the training block, reconstructs the full scan per lambda,
    reports train/test RMSE, and writes filters, reconstructions, the
    solver diagnostics table, and the validation report.
    """
    data = datamodel.load_s4dm(config.dataset)
    target = _load_target(config.target)
    if target.dims != data.scan_dims:
        raise ValueError(f"target dims {target.dims} do not match "
                         f"scan dims {data.scan_dims}")
    train, test = _split(data, config)
    mask, seg = _resolve_geometry(data, config)
    x, finalize = _design_or_stream(data, config.dataset, train, mask, seg,
                                    config.memory_budget)
    y_train = _region_values(target, train)

    path = solver.fit_path(x, y_train, config.enet, config.path, trace=trace)

    os.makedirs(config.out_dir, exist_ok=True)
    rows = []
    filters = []
    for idx, entry in enumerate(path):
        filt = _quantized(finalize(entry.weights))
        filters.append(filt)
        recon = datamodel.apply_filter(data, filt)
        rows.append(ValidationRow(
            lam=entry.lam,
            train_rmse=rmse(_region_values(recon, train),
                            _region_values(target, train)),
            test_rmse=rmse(_region_values(recon, test),
                           _region_values(target, test)),
            filling_ratio=entry.filling_ratio,
            kkt_violation=entry.kkt_max_violation,
        ))
        datamodel.store_filter(filt, os.path.join(
            config.out_dir, f"filter_{idx:03d}.f4dm"))
        datamodel.export_image(recon, "csv", os.path.join(
            config.out_dir, f"recon_{idx:03d}.csv"))

    report = ValidationReport(tuple(rows), select_lambda(rows))
    report.write_csv(os.path.join(config.out_dir, "validation.csv"))
    solver.write_diagnostics(path, os.path.join(config.out_dir,
                                                "diagnostics.csv"))
    sel = report.selected_index
    datamodel.store_filter(filters[sel],
                           os.path.join(config.out_dir, "filter_selected.f4dm"))
    datamodel.export_image(
        datamodel.apply_filter(data, filters[sel]), "pgm16",
        os.path.join(config.out_dir, "recon_selected.pgm"))
    return path, report


def run_fit(config: RunConfig, lam: float, region: ScanRegion | None = None,
            trace: bool = False):
    """Fit a single penalty level on one region (default: full scan)."""
    data = datamodel.load_s4dm(config.dataset)
    target = _load_target(config.target)
    if target.dims != data.scan_dims:
        raise ValueError(f"target dims {target.dims} do not match "
                         f"scan dims {data.scan_dims}")
    if region is None:
        region = full_region(data.scan_dims)
    mask, seg = _resolve_geometry(data, config)
    x, finalize = _design_or_stream(data, config.dataset, region, mask, seg,
                                    config.memory_budget)
    y = _region_values(target, region)

    result = solver.fit(x, y, lam, config.enet, trace=trace)
    filt = _quantized(finalize(result.weights))

    os.makedirs(config.out_dir, exist_ok=True)
    datamodel.store_filter(filt, os.path.join(config.out_dir, "filter.f4dm"))
    recon = datamodel.apply_filter(data, filt)
    datamodel.export_image(recon, "csv",
                           os.path.join(config.out_dir, "recon.csv"))
    solver.write_diagnostics(
        solver.RegPath((result,)),
        os.path.join(config.out_dir, "diagnostics.csv"))
    return result, filt


def run_reconstruct(dataset_path: str, filter_path: str, out_dir: str,
                    region: ScanRegion | None = None) -> RealImage:
    """Apply a stored filter to any dataset with matching detector dims.

    In particular a dataset other than the one the filter was trained
    on; that transfer is the point of storing filters.  Writes
    recon.csv and recon.pgm into out_dir, like the fitting commands.
    """
    data = datamodel.load_s4dm(dataset_path)
    filt = datamodel.load_filter(filter_path)
    recon = datamodel.apply_filter(data, filt, region)
    os.makedirs(out_dir, exist_ok=True)
    datamodel.export_image(recon, "csv", os.path.join(out_dir, "recon.csv"))
    datamodel.export_image(recon, "pgm16", os.path.join(out_dir, "recon.pgm"))
    return recon


def run_validate(dataset_path: str, filter_path: str, target_path: str,
                 train_rows: int | None = None,
                 train_fraction: float | None = None,
                 out_csv: str | None = None) -> tuple[float, float]:
    """Report train/test RMSE of a stored filter against a target."""
    data = datamodel.load_s4dm(dataset_path)
    filt = datamodel.load_filter(filter_path)
    target = _load_target(target_path)
    if target.dims != data.scan_dims:
        raise ValueError(f"target dims {target.dims} do not match "
                         f"scan dims {data.scan_dims}")
    if train_rows is not None:
        train, test = synth.split_region(data.scan_dims, rows=train_rows)
    else:
        train, test = synth.split_region(
            data.scan_dims, fraction=0.5 if train_fraction is None
            else train_fraction)
    recon = datamodel.apply_filter(data, filt)
    tr = rmse(_region_values(recon, train), _region_values(target, train))
    te = rmse(_region_values(recon, test), _region_values(target, test))
    if out_csv is not None:
        def writer(f):
            f.write(b"train_rmse,test_rmse\n")
            f.write(f"{tr:.17g},{te:.17g}\n".encode("ascii"))

        datamodel._atomic_write(out_csv, writer)
    return tr, te


def linetrace(image: RealImage, box: tuple[int, int, int, int],
              width: int = 3) -> np.ndarray:
    """Average a width-pixel band along the box's long axis, then
    subtract the image minimum and normalize the trace maximum to 1.

    The box is (x0, y0, x1, y1) with x = column and y = row; it must be
    axis-aligned (horizontal or vertical).  width must be odd so the
    band centers on the line.
    """
    x0, y0, x1, y1 = box
    if width < 1 or width % 2 == 0:
        raise UsageError(f"width must be odd and >= 1, got {width}")
    h, w = image.dims
    if not (0 <= x0 < w and 0 <= x1 < w and 0 <= y0 < h and 0 <= y1 < h):
        raise ValueError(f"box {box} outside image dims {image.dims}")
    half = width // 2
    if abs(x1 - x0) >= abs(y1 - y0):
        if y0 != y1:
            raise UsageError("trace box must be horizontal or vertical")
        if y0 - half < 0 or y0 + half >= h:
            raise ValueError(f"width {width} band leaves the image at row {y0}")
        cols = np.arange(min(x0, x1), max(x0, x1) + 1)
        band = image.values[y0 - half:y0 + half + 1, cols]
        trace = band.mean(axis=0, dtype=np.float64)
        if x1 < x0:
            trace = trace[::-1]
    else:
        if x0 != x1:
            raise UsageError("trace box must be horizontal or vertical")
        if x0 - half < 0 or x0 + half >= w:
            raise ValueError(f"width {width} band leaves the image at column {x0}")
        rows = np.arange(min(y0, y1), max(y0, y1) + 1)
        band = image.values[rows, x0 - half:x0 + half + 1]
        trace = band.mean(axis=1, dtype=np.float64)
        if y1 < y0:
            trace = trace[::-1]

    trace = trace - image.values.min()
    peak = trace.max()
    if peak <= 0:
        raise ValueError("constant trace cannot be normalized")
    return trace / peak


def run_linetrace(image_path: str, box: tuple[int, int, int, int],
                  width: int, out_csv: str) -> np.ndarray:
    image = _load_target(image_path)
    trace = linetrace(image, box, width)

    def writer(f):
        f.write(b"position,value\n")
        for i, v in enumerate(trace):
            f.write(f"{i},{v:.17g}\n".encode("ascii"))

    datamodel._atomic_write(out_csv, writer)
    return trace


def run_fillcurve(diagnostics_csv: str, out_csv: str) -> list[tuple[float, float]]:
    """Extract the (lambda, filling_ratio) columns of a diagnostics table."""
    try:
        with open(diagnostics_csv, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or \
                    "lambda" not in reader.fieldnames or \
                    "filling_ratio" not in reader.fieldnames:
                raise FormatError(
                    f"{diagnostics_csv}: missing lambda/filling_ratio columns")
            pairs = [(float(row["lambda"]), float(row["filling_ratio"]))
                     for row in reader]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{diagnostics_csv}: malformed diagnostics ({e})") from e
    if not pairs:
        raise FormatError(f"{diagnostics_csv}: no rows")
    if any(b >= a for (a, _), (b, _) in zip(pairs, pairs[1:])):
        raise FormatError(f"{diagnostics_csv}: lambda column not descending")

    def writer(f):
        f.write(b"lambda,filling_ratio\n")
        for lam, fr in pairs:
            f.write(f"{lam:.17g},{fr:.17g}\n".encode("ascii"))

    datamodel._atomic_write(out_csv, writer)
    return pairs


_PATTERN_HELP = ("lattice | sublattice:A | sublattice:B | random_sites:N:SEED "
                 "| rings:SPACING | text:STRING | complement:<pattern>")


def parse_pattern(text: str, lattice: synth.LatticeSpec) -> synth.PatternSpec:
    """Parse a CLI pattern name into a PatternSpec."""
    try:
        head, _, rest = text.partition(":")
        if head == "lattice" and not rest:
            return synth.PatternSpec.lattice_highres(lattice)
        if head == "sublattice":
            return synth.PatternSpec.sublattice(lattice, rest)
        if head == "random_sites":
            count, seed = rest.split(":")
            return synth.PatternSpec.random_sites(int(count), int(seed))
        if head == "rings":
            return synth.PatternSpec.rings(float(rest))
        if head == "text":
            return synth.PatternSpec.glyph_text(rest)
        if head == "complement":
            return synth.PatternSpec.complement_of(parse_pattern(rest, lattice))
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad pattern {text!r}: {e}") from e
    raise UsageError(f"unknown pattern {text!r}; expected {_PATTERN_HELP}")


def design_footprint_bytes(scan_dims, detector_dims) -> int:
    """float64 design-matrix bytes for a full-scan pixelated fit."""
    return scan_dims[0] * scan_dims[1] * detector_dims[0] * detector_dims[1] * 8


def run_synth(items: dict, out_dir: str, patterns: tuple[str, ...] = ("lattice",),
              force: bool = False, budget: int = _DEFAULT_BUDGET,
              echo=print) -> dict:
    """Generate a dataset with targets and write everything to out_dir.

    Refuses configurations whose full-scan design matrix would exceed
    the memory budget unless force is set; the warning quotes the
    byte count computed from the requested dims.
    """
    try:
        lattice, fm, scan = synth.build_specs(items)
    except ValueError as e:
        raise UsageError(str(e)) from e

    need = design_footprint_bytes(scan, fm.detector_dims)
    if need > budget and not force:
        raise UsageError(
            f"scan {scan[0]}x{scan[1]} with detector {fm.detector_dims[0]}x"
            f"{fm.detector_dims[1]} needs {need / 1024**3:.2f} GiB for the "
            f"float64 design matrix, over the {budget / 1024**3:.2f} GiB "
            f"budget; pass --force to proceed (fits will stream from disk)")

    data, truth, wstar = synth.gen_synthetic_4d(lattice, fm, scan)

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "dataset": os.path.join(out_dir, "dataset.s4dm"),
        "ground_truth": os.path.join(out_dir, "ground_truth.csv"),
        "truth_filter": os.path.join(out_dir, "truth_filter.f4dm"),
    }
    datamodel.store_s4dm(data, paths["dataset"])
    datamodel.export_image(truth, "csv", paths["ground_truth"])
    datamodel.store_filter(wstar, paths["truth_filter"])
    for name in patterns:
        spec = parse_pattern(name, lattice)
        image = synth.gen_training_image(spec, scan)
        safe = name.replace(":", "_").replace("/", "_")
        p = os.path.join(out_dir, f"target_{safe}.csv")
        datamodel.export_image(image, "csv", p)
        paths[f"target_{name}"] = p

    i, j = scan
    k, l = fm.detector_dims
    echo(f"dataset {i}x{j} scan, {k}x{l} detector, "
         f"{i * j * k * l * 4 / 1024**2:.1f} MiB float32")
    echo(f"seeds: truth={fm.truth.seed} noise={fm.noise_seed} "
         f"texture={fm.texture_seed}")
    for key, p in paths.items():
        echo(f"wrote {key}: {p}")
    return paths
