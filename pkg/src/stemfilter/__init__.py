"""Detector-plane filters for 4D scanning diffraction data.

A 4D dataset D(i, j, k, l) maps scan positions (i, j) to detector
images (k, l).  Any virtual detector is a filter F(k, l) applied as
image(i, j) = sum_kl D(i, j, k, l) F(k, l); this package estimates F
by elastic-net regression of a training image on the recorded frames,
with the regularization path validated on held-out scan rows.
"""

from .datamodel import (Dataset4D, DesignMatrix, FilterImage, RealImage,
                        ScanRegion, apply_filter, assemble_design,
                        export_image, filter_from_weights, full_region,
                        load_filter, load_image_csv, load_pgm16, load_s4dm,
                        store_filter, store_s4dm, vectorize, devectorize)
from .detector import (BFDisk, DetectorMask, SegmentMap, build_segment_map,
                       estimate_bf_disk, expand_segment_filter,
                       mask_from_disk, reduce_to_segments)
from .errors import FormatError, NumericsError, UsageError
from .pipeline import (RunConfig, ValidationReport, ValidationRow, linetrace,
                       run_fit, run_path, run_reconstruct, run_synth,
                       run_validate, select_lambda)
from .solver import (CDState, ElasticNetConfig, FitResult, PathConfig,
                     RegPath, coordinate_sweep, fit, fit_path, kkt_check,
                     lambda_max, objective, soft_threshold, write_diagnostics)
from .synth import (ForwardModelSpec, LatticeSpec, PatternSpec, TruthSpec,
                    enumerate_sites, gen_synthetic_4d, gen_training_image,
                    split_region)

__version__ = "0.1.0"

__all__ = [
    "Dataset4D", "DesignMatrix", "FilterImage", "RealImage", "ScanRegion",
    "apply_filter", "assemble_design", "export_image", "filter_from_weights",
    "full_region", "load_filter", "load_image_csv", "load_pgm16", "load_s4dm",
    "store_filter", "store_s4dm", "vectorize", "devectorize",
    "BFDisk", "DetectorMask", "SegmentMap", "build_segment_map",
    "estimate_bf_disk", "expand_segment_filter", "mask_from_disk",
    "reduce_to_segments",
    "FormatError", "NumericsError", "UsageError",
    "RunConfig", "ValidationReport", "ValidationRow", "linetrace",
    "run_fit", "run_path", "run_reconstruct", "run_synth", "run_validate",
    "select_lambda",
    "CDState", "ElasticNetConfig", "FitResult", "PathConfig", "RegPath",
    "coordinate_sweep", "fit", "fit_path", "kkt_check", "lambda_max",
    "objective", "soft_threshold", "write_diagnostics",
    "ForwardModelSpec", "LatticeSpec", "PatternSpec", "TruthSpec",
    "enumerate_sites", "gen_synthetic_4d", "gen_training_image",
    "split_region",
    "__version__",
]
